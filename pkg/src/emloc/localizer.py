"""Online localization: particles over graph nodes, each carrying an EKF over
its 6-DoF pose relative to that node.

Side channels reweight particles every frame; 6-DoF PnP against the most
probable nodes only runs when the weights say the particle cloud agrees
with the live fingerprint (N_eff above a threshold).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DataError
from .geometry import Pose6D, euler_to_matrix, matrix_to_euler, wrap_angle
from .graph import LocalizationGraph
from .odometry import PdrDelta
from .sidechannel import ChannelConfig, FingerprintIndex, SideChannelFingerprint
from .vision import (
    BODY_FROM_CAMERA,
    CameraIntrinsics,
    ObservationSet,
    PoseEstimate,
    RansacConfig,
    match_features,
    ransac_pnp,
)

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-12


@dataclass
class LocalizerConfig:
    n_particles: int = 500
    k: int = 1
    tau_eff: Optional[float] = None  # defaults to N / 2
    resample_threshold: Optional[float] = None  # defaults to N / 2
    # (x, y, z, yaw, pitch, roll) standard deviations
    prior_sigma: tuple = (0.5, 0.5, 0.1, 0.3, 0.05, 0.05)
    process_sigma: tuple = (0.1, 0.1, 0.02, 0.05, 0.01, 0.01)  # per PDR step
    jitter_sigma: tuple = (0.05, 0.05, 0.02)  # sampled on x, y, yaw per PDR step
    measurement_sigma: tuple = (0.05, 0.05, 0.05, 0.02, 0.02, 0.02)
    reassign_hops: int = 2
    channels: ChannelConfig = field(default_factory=ChannelConfig)
    ratio: float = 0.8
    ransac: RansacConfig = field(default_factory=RansacConfig)
    all_k: bool = False  # True: try every candidate and keep the best
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.tau_eff is not None and not (1.0 < self.tau_eff <= self.n_particles):
            raise ConfigError("tau_eff must lie in (1, N]")
        for name in ("prior_sigma", "process_sigma", "measurement_sigma"):
            v = np.asarray(getattr(self, name), float)
            if v.shape != (6,) or np.any(v < 0):
                raise ConfigError(f"{name} must be six non-negative numbers")
        if np.any(np.asarray(self.measurement_sigma) <= 0) or np.any(np.asarray(self.prior_sigma) <= 0):
            raise ConfigError("prior and measurement sigmas must be positive")

    @property
    def gate(self) -> float:
        return 0.5 * self.n_particles if self.tau_eff is None else float(self.tau_eff)

    @property
    def resample_below(self) -> float:
        return 0.5 * self.n_particles if self.resample_threshold is None else float(self.resample_threshold)


@dataclass(eq=False)
class ParticleSet:
    """Struct-of-arrays particle storage.

    The mean is (x, y, z, yaw, pitch, roll) of the body in the node frame.
    Covariances are over (dx, dy, dz, dphi_z, dphi_y, dphi_x): translation
    error plus a body-frame rotation-vector error listed z-first so it lines
    up index-wise with yaw, pitch, roll.
    """

    nodes: np.ndarray  # (N,) int64
    means: np.ndarray  # (N, 6)
    covs: np.ndarray  # (N, 6, 6)
    weights: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.nodes.size

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.nodes.copy(), self.means.copy(), self.covs.copy(), self.weights.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("nodes", "means", "covs", "weights")}

    @classmethod
    def from_dict(cls, d: dict) -> "ParticleSet":
        return cls(np.array(d["nodes"], dtype=np.int64), np.array(d["means"], float).reshape(-1, 6),
                   np.array(d["covs"], float).reshape(-1, 6, 6), np.array(d["weights"], float))


@dataclass
class LocalizerFrame:
    index: int
    fingerprint: Optional[SideChannelFingerprint] = None
    deltas: Sequence[PdrDelta] = ()
    observations: Optional[ObservationSet] = None
    timestamp: float = 0.0


@dataclass
class LocalizerOutput:
    frame_index: int
    map_node: int
    pose: Pose6D  # fused world pose of the body
    n_eff: float
    pnp_attempted: bool
    attempted_nodes: list
    success: bool
    success_node: Optional[int]
    pnp_pose: Optional[Pose6D]  # world body pose from the accepted PnP solution
    inliers: int
    matching_cost: int
    timing: dict
    wall_time: float


# ---------------------------------------------------------------- helpers


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def make_spd(P: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrize and lift eigenvalues to ``floor`` where needed."""
    P = _sym(np.asarray(P, float))
    w, V = np.linalg.eigh(P)
    bad = np.any(w <= floor, axis=-1)
    if np.any(bad):
        log.debug("flooring %d covariance(s)", int(np.sum(bad)))
        w = np.maximum(w, 2 * floor)
        fixed = _sym((V * w[..., None, :]) @ np.swapaxes(V, -1, -2))
        P = np.where(bad[..., None, None], fixed, P)
    return P


def _rotvec_zyx(R: np.ndarray) -> np.ndarray:
    """Body rotation vector of R, reordered (z, y, x)."""
    return Rotation.from_matrix(R).as_rotvec()[..., ::-1]


def _exp_zyx(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w)[..., ::-1]).as_matrix()


class NodeLikelihood:
    """Live fingerprint -> per-node likelihood, averaging the combined weight
    over each node's fingerprinted incident edges."""

    def __init__(self, g: LocalizationGraph):
        self.node_ids = np.array(g.node_ids, dtype=np.int64)
        self.row = {int(n): r for r, n in enumerate(self.node_ids)}
        fp_edges = [k for k, e in enumerate(g.edges) if e.fingerprint is not None]
        self.index = FingerprintIndex([g.edges[k].fingerprint for k in fp_edges],
                                      g.idf() if len(g.vocabulary) else None)
        M = np.zeros((self.node_ids.size, len(fp_edges)))
        for c, k in enumerate(fp_edges):
            e = g.edges[k]
            M[self.row[e.from_node], c] = 1.0
            M[self.row[e.to_node], c] = 1.0
        deg = M.sum(axis=1)
        self.has_fp = deg > 0
        self.M = np.divide(M, deg[:, None], out=np.zeros_like(M), where=deg[:, None] > 0)

    def __call__(self, live: Optional[SideChannelFingerprint], channels: ChannelConfig) -> np.ndarray:
        """Likelihood per node in ``node_ids`` order."""
        out = np.ones(self.node_ids.size) * channels.scale ** 3
        if live is None or self.index.size == 0:
            return out
        s = self.index.score(live, channels)
        comb = s[:, 0] * s[:, 1] * s[:, 2]
        out[self.has_fp] = self.M[self.has_fp] @ comb
        return out


# ---------------------------------------------------------------- operations


def init_uniform(g: LocalizationGraph, cfg: LocalizerConfig, rng=None) -> ParticleSet:
    if len(g) == 0:
        raise DataError("cannot initialize particles on an empty graph")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ids = np.array(g.node_ids, dtype=np.int64)
    N = cfg.n_particles
    nodes = ids[rng.integers(0, ids.size, N)]
    P0 = np.diag(np.asarray(cfg.prior_sigma, float) ** 2)
    return ParticleSet(nodes, np.zeros((N, 6)), np.broadcast_to(P0, (N, 6, 6)).copy(), np.full(N, 1.0 / N))


def predict(ps: ParticleSet, delta: PdrDelta, cfg: LocalizerConfig, g: LocalizationGraph, rng=None) -> ParticleSet:
    """Advance every particle by one PDR step expressed in its node frame."""
    out = ps.copy()
    d_world = np.array([delta.dx, delta.dy, 0.0])
    uniq, inv = np.unique(out.nodes, return_inverse=True)
    Rn = np.stack([g.nodes[int(n)].world_pose.R for n in uniq]) if uniq.size else np.zeros((0, 3, 3))
    d_node = (Rn.transpose(0, 2, 1) @ d_world)[inv]
    out.means[:, :3] += d_node
    out.means[:, 3] = wrap_angle(out.means[:, 3] + delta.dtheta)
    q = np.asarray(cfg.process_sigma, float) ** 2
    out.covs = out.covs + np.diag(q)
    js = np.asarray(cfg.jitter_sigma, float)
    if rng is not None and np.any(js > 0):
        jit = rng.standard_normal((len(out), 3)) * js
        out.means[:, 0] += jit[:, 0]
        out.means[:, 1] += jit[:, 1]
        out.means[:, 3] = wrap_angle(out.means[:, 3] + jit[:, 2])
    return out


def _normalize(w: np.ndarray) -> np.ndarray:
    s = w.sum()
    if not np.isfinite(s) or s <= 0:
        log.warning("weights collapsed to zero; resetting to uniform")
        return np.full(w.size, 1.0 / w.size)
    return w / s


def weight_update(ps: ParticleSet, live: Optional[SideChannelFingerprint], g: LocalizationGraph,
                  model: Optional[NodeLikelihood] = None, channels: ChannelConfig = ChannelConfig()) -> ParticleSet:
    model = NodeLikelihood(g) if model is None else model
    lik = model(live, channels)
    top = lik.max()
    if top > 0:
        lik = lik / top  # ratios are all that matter; keeps products in range
    out = ps.copy()
    rows = np.array([model.row[int(n)] for n in out.nodes]) if len(out) else np.zeros(0, np.int64)
    out.weights = _normalize(out.weights * lik[rows])
    return out


def distance_reweight(ps: ParticleSet, g: Optional[LocalizationGraph] = None) -> ParticleSet:
    out = ps.copy()
    d = np.linalg.norm(out.means[:, :3], axis=1)
    out.weights = _normalize(out.weights * np.exp(-d))
    return out


def effective_particles(ps_or_weights) -> float:
    w = ps_or_weights.weights if isinstance(ps_or_weights, ParticleSet) else np.asarray(ps_or_weights, float)
    return float(1.0 / np.sum(w * w))


def node_mass(ps: ParticleSet) -> tuple[np.ndarray, np.ndarray]:
    uniq, inv = np.unique(ps.nodes, return_inverse=True)
    return uniq, np.bincount(inv, weights=ps.weights, minlength=uniq.size)


def select_candidate_nodes(ps: ParticleSet, k: int) -> list:
    """Top-k nodes by total particle weight, lowest id first on ties."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    uniq, mass = node_mass(ps)
    order = np.lexsort((uniq, -mass))
    return [int(n) for n in uniq[order[:k]]]


def ekf_update_arrays(means: np.ndarray, covs: np.ndarray, z: np.ndarray, Rm: np.ndarray):
    """Error-state Kalman update of many particles with one direct pose
    measurement ``z`` = (x, y, z, yaw, pitch, roll)."""
    means = np.atleast_2d(means)
    covs = covs.reshape(-1, 6, 6)
    n = means.shape[0]
    R_mu = euler_to_matrix(means[:, 3], means[:, 4], means[:, 5])
    R_z = euler_to_matrix(z[3], z[4], z[5])
    y = np.zeros((n, 6))
    y[:, :3] = z[:3] - means[:, :3]
    y[:, 3:] = _rotvec_zyx(np.swapaxes(R_mu, 1, 2) @ R_z)
    S = covs + Rm
    K = np.swapaxes(np.linalg.solve(S, covs), 1, 2)  # P S^-1 (both symmetric)
    dx = np.einsum("nij,nj->ni", K, y)
    I = np.eye(6)
    A = I - K
    P = A @ covs @ np.swapaxes(A, 1, 2) + K @ Rm @ np.swapaxes(K, 1, 2)
    P = make_spd(P)
    out = means.copy()
    out[:, :3] += dx[:, :3]
    R_new = R_mu @ _exp_zyx(dx[:, 3:])
    out[:, 3:] = matrix_to_euler(R_new)
    return out, P


def ekf_measurement_update(ps: ParticleSet, node: int, z_pose: Pose6D, cfg: LocalizerConfig) -> ParticleSet:
    """Update every particle on ``node`` with a body pose measured in that node's frame."""
    out = ps.copy()
    sel = np.flatnonzero(out.nodes == node)
    if sel.size == 0:
        return out
    Rm = np.diag(np.asarray(cfg.measurement_sigma, float) ** 2)
    m, P = ekf_update_arrays(out.means[sel], out.covs[sel], z_pose.to_vector(), Rm)
    out.means[sel] = m
    out.covs[sel] = P
    return out


def systematic_indices(weights: np.ndarray, u0: float) -> np.ndarray:
    """Survivor index per slot for offsets (u0 + i) / N."""
    N = weights.size
    c = np.cumsum(weights)
    c[-1] = 1.0
    u = (u0 + np.arange(N)) / N
    return np.minimum(np.searchsorted(c, u, side="right"), N - 1)


def reassign_nodes(ps: ParticleSet, g: LocalizationGraph, hops: int = 2, max_rounds: int = 10) -> ParticleSet:
    """Move each particle to the nearest node (within ``hops``) of its implied
    world position, repeating until nothing moves, and re-express its mean
    and covariance in the new node frame."""
    out = ps.copy()
    pos_cache = {}
    for _ in range(max_rounds):
        moved = False
        uniq = np.unique(out.nodes)
        for n in uniq:
            n = int(n)
            sel = np.flatnonzero(out.nodes == n)
            pose_n = g.nodes[n].world_pose
            world = pose_n.transform(out.means[sel, :3])
            cand = pos_cache.get(n)
            if cand is None:
                ids = np.array(g.within_hops(n, hops), dtype=np.int64)
                cand = (ids, g.node_positions(ids))
                pos_cache[n] = cand
            ids, cpos = cand
            d = np.linalg.norm(world[:, None, :] - cpos[None], axis=2)
            best = ids[np.argmin(d, axis=1)]  # ids sorted, so argmin takes the lowest id on ties
            for m in np.unique(best):
                m = int(m)
                if m == n:
                    continue
                moved = True
                rows = sel[best == m]
                rel = g.relative_pose_between(m, n)
                Rr = rel.R
                out.means[rows, :3] = out.means[rows, :3] @ Rr.T + rel.translation
                R_old = euler_to_matrix(out.means[rows, 3], out.means[rows, 4], out.means[rows, 5])
                out.means[rows, 3:] = matrix_to_euler(Rr @ R_old)
                J = np.eye(6)
                J[:3, :3] = Rr
                out.covs[rows] = _sym(J @ out.covs[rows] @ J.T)
                out.nodes[rows] = m
        if not moved:
            break
    return out


def resample(ps: ParticleSet, cfg: LocalizerConfig, g: LocalizationGraph, rng) -> tuple[ParticleSet, bool]:
    """Systematic resampling below the configured N_eff threshold."""
    if effective_particles(ps) >= cfg.resample_below:
        return ps, False
    idx = systematic_indices(ps.weights, float(rng.random()))
    N = len(ps)
    out = ParticleSet(ps.nodes[idx].copy(), ps.means[idx].copy(), ps.covs[idx].copy(), np.full(N, 1.0 / N))
    return reassign_nodes(out, g, cfg.reassign_hops), True


def fused_pose(ps: ParticleSet, node: int, g: LocalizationGraph) -> Pose6D:
    """World body pose from the weighted mean of the particles on ``node``."""
    sel = ps.nodes == node
    w = ps.weights[sel]
    w = w / w.sum() if w.sum() > 0 else np.full(w.size, 1.0 / max(w.size, 1))
    m = ps.means[sel]
    t = w @ m[:, :3]
    ang = [float(np.arctan2(w @ np.sin(m[:, j]), w @ np.cos(m[:, j]))) for j in (3, 4, 5)]
    rel = Pose6D.from_euler(t, *ang)
    return g.nodes[node].world_pose @ rel


# ---------------------------------------------------------------- PnP against nodes


class NodePnp:
    """Match + RANSAC-PnP of one frame against one node, solved in the node frame.

    Results are cached per (frame, node); the RANSAC seed depends only on
    (seed, frame, node) so every policy sees the same outcome for a pair.
    """

    def __init__(self, g: LocalizationGraph, K: CameraIntrinsics, ratio: float = 0.8,
                 ransac: RansacConfig = RansacConfig(), seed: int = 0, cache: bool = True,
                 local_points: Optional[dict] = None):
        self.g, self.K, self.ratio, self.ransac, self.seed = g, K, ratio, ransac, seed
        # node -> features in node coordinates; may be shared between instances on one graph
        self._local = {} if local_points is None else local_points
        self._cache = {} if cache else None
        self.timing = {"matching": 0.0, "ransac": 0.0}

    def node_points(self, node: int):
        hit = self._local.get(node)
        if hit is None:
            ids, pos, desc = self.g.node_features(node)
            local = self.g.nodes[node].world_pose.inverse().transform(pos) if ids.size else pos
            hit = (ids, local, desc)
            self._local[node] = hit
        return hit

    def cost(self, node: int, obs: Optional[ObservationSet]) -> int:
        n_obs = 0 if obs is None else len(obs)
        return int(len(self.g.nodes[node].visible_features) * n_obs)

    def rng_seed(self, frame: int, node: int) -> int:
        return int(np.random.SeedSequence([self.seed, int(frame), int(node)]).generate_state(1)[0])

    def solve(self, frame: int, node: int, obs: ObservationSet) -> tuple[PoseEstimate, Optional[Pose6D], dict]:
        """(estimate, body pose in node frame or None, timing)."""
        key = (frame, node)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        ids, local, desc = self.node_points(node)
        t0 = time.perf_counter()
        ms = match_features(obs, (ids, local, desc), self.ratio)
        t1 = time.perf_counter()
        cfg = RansacConfig(**{**self.ransac.__dict__, "seed": self.rng_seed(frame, node)})
        est = ransac_pnp(ms, self.K, cfg) if len(ms) >= cfg.min_inliers else PoseEstimate.failure(0)
        t2 = time.perf_counter()
        body = est.pose @ BODY_FROM_CAMERA.inverse() if est.success else None
        res = (est, body, {"matching": t1 - t0, "ransac": t2 - t1})
        if self._cache is not None:
            self._cache[key] = res
        return res


# ---------------------------------------------------------------- the filter

Ranker = Callable[["LocalizerState", LocalizerFrame, int], list]


@dataclass(eq=False)
class LocalizerState:
    particles: ParticleSet
    rng: np.random.Generator
    frame: int = 0


def default_ranker(state: LocalizerState, frame: LocalizerFrame, k: int) -> list:
    return select_candidate_nodes(state.particles, k)


class Localizer:
    def __init__(self, g: LocalizationGraph, cfg: LocalizerConfig = LocalizerConfig(),
                 K: CameraIntrinsics = CameraIntrinsics(), ranker: Optional[Ranker] = None,
                 pnp: Optional[NodePnp] = None, model: Optional[NodeLikelihood] = None):
        self.g = g
        self.cfg = cfg
        self.model = NodeLikelihood(g) if model is None else model
        self.ranker = ranker or default_ranker
        self.pnp = pnp or NodePnp(g, K, cfg.ratio, cfg.ransac, cfg.seed)
        self.reset()

    def reset(self) -> None:
        rng = np.random.default_rng(self.cfg.seed)
        self.state = LocalizerState(init_uniform(self.g, self.cfg, rng), rng)

    def step(self, frame: LocalizerFrame) -> LocalizerOutput:
        return localize_step(self, frame)


def localize_step(loc: Localizer, frame: LocalizerFrame) -> LocalizerOutput:
    cfg, g, st = loc.cfg, loc.g, loc.state
    t_start = time.perf_counter()
    timing = {"matching": 0.0, "ransac": 0.0, "filter": 0.0, "sidechannel": 0.0}

    t0 = time.perf_counter()
    ps = st.particles
    for d in frame.deltas:
        ps = predict(ps, d, cfg, g, st.rng)
    timing["filter"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    ps = weight_update(ps, frame.fingerprint, g, loc.model, cfg.channels)
    timing["sidechannel"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    ps = distance_reweight(ps, g)
    n_eff = effective_particles(ps)
    timing["filter"] += time.perf_counter() - t0
    st.particles = ps

    attempted, cost = [], 0
    best = None  # (inliers, order, node, body pose)
    has_obs = frame.observations is not None and len(frame.observations) > 0
    attempt = has_obs and n_eff > cfg.gate
    if attempt:
        cands = loc.ranker(st, frame, cfg.k)
        assert len(cands) <= cfg.k, "ranker returned more than k nodes"
        for order, node in enumerate(cands):
            attempted.append(int(node))
            cost += loc.pnp.cost(node, frame.observations)
            est, body, tm = loc.pnp.solve(frame.index, int(node), frame.observations)
            timing["matching"] += tm["matching"]
            timing["ransac"] += tm["ransac"]
            if est.success:
                if best is None or est.inlier_count > best[0]:
                    best = (est.inlier_count, order, int(node), body)
                if not cfg.all_k:
                    break
    assert len(attempted) <= cfg.k

    t0 = time.perf_counter()
    ps = st.particles
    if best is not None:
        ps = ekf_measurement_update(ps, best[2], best[3], cfg)
    ps, _ = resample(ps, cfg, g, st.rng)
    st.particles = ps
    uniq, mass = node_mass(ps)
    map_node = int(uniq[np.lexsort((uniq, -mass))[0]])
    pose = fused_pose(ps, map_node, g)
    timing["filter"] += time.perf_counter() - t0
    st.frame += 1

    pnp_pose = g.nodes[best[2]].world_pose @ best[3] if best is not None else None
    return LocalizerOutput(
        frame_index=frame.index,
        map_node=map_node,
        pose=pose,
        n_eff=n_eff,
        pnp_attempted=bool(attempted),
        attempted_nodes=attempted,
        success=best is not None,
        success_node=None if best is None else best[2],
        pnp_pose=pnp_pose,
        inliers=0 if best is None else int(best[0]),
        matching_cost=int(cost),
        timing=timing,
        wall_time=time.perf_counter() - t_start,
    )


def frames_from_trace(trace, pdr_cfg=None) -> list:
    """Localizer inputs for every frame of a query trace: fingerprint, the PDR
    steps since the previous frame and the camera detections."""
    from .odometry import PdrConfig, pdr_deltas, split_deltas

    pdr_cfg = PdrConfig() if pdr_cfg is None else pdr_cfg
    ts = trace.timestamps
    deltas = pdr_deltas(trace.imu, pdr_cfg) if trace.imu is not None and len(trace.imu) else []
    buckets = split_deltas(deltas, ts)
    return [
        LocalizerFrame(k, f.fingerprint, buckets[k], f.observations, float(f.timestamp))
        for k, f in enumerate(trace.frames)
    ]
