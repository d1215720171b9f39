"""2D-3D matching and camera resectioning (DLT + Gauss-Newton inside RANSAC)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConfigurationError, DimensionMismatchError
from .geometry import Pose6D, so3_exp

MIN_INLIERS = 8
SAMPLE_SIZE = 6

# camera axes expressed in the body frame: z forward (= body x), x right, y down
BODY_FROM_CAMERA_R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
BODY_FROM_CAMERA = Pose6D.from_matrix(BODY_FROM_CAMERA_R)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


@dataclass(frozen=True, eq=False)
class Observation2D:
    uv: np.ndarray
    descriptor: np.ndarray


@dataclass(eq=False)
class ObservationSet:
    """Batch of 2D detections in one image: pixel locations and descriptors."""

    uv: np.ndarray  # (m, 2)
    descriptors: np.ndarray  # (m, D)

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != self.uv.shape[0]:
            raise DimensionMismatchError("one descriptor row per observation required")

    def __len__(self) -> int:
        return self.uv.shape[0]

    @classmethod
    def from_list(cls, obs: Sequence[Observation2D], dim: int = 0) -> "ObservationSet":
        if not obs:
            return cls(np.zeros((0, 2)), np.zeros((0, dim)))
        return cls(np.stack([o.uv for o in obs]), np.stack([o.descriptor for o in obs]))

    def to_dict(self) -> dict:
        return {"uv": self.uv.tolist(), "descriptors": self.descriptors.tolist(), "dim": self.descriptors.shape[1]}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationSet":
        dim = int(d.get("dim", 0))
        return cls(np.array(d["uv"], dtype=float).reshape(-1, 2),
                   np.array(d["descriptors"], dtype=float).reshape(-1, dim))


@dataclass(eq=False)
class MatchSet:
    """Correspondences between observation rows and 3D points (one-to-one)."""

    obs_index: np.ndarray
    feature_ids: np.ndarray
    uv: np.ndarray  # (m, 2)
    points: np.ndarray  # (m, 3) in the frame the pose is solved in
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.uv.shape[0]

    def subset(self, idx) -> "MatchSet":
        return MatchSet(self.obs_index[idx], self.feature_ids[idx], self.uv[idx], self.points[idx],
                        self.distances[idx] if self.distances.size else self.distances)

    def with_points(self, points: np.ndarray) -> "MatchSet":
        return MatchSet(self.obs_index, self.feature_ids, self.uv, np.asarray(points, float), self.distances)


@dataclass(eq=False)
class PoseEstimate:
    pose: Optional[Pose6D]  # camera pose in the reference (node) frame
    inlier_count: int
    rms: float
    success: bool
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.success:
            assert self.inlier_count >= MIN_INLIERS, "success requires at least 8 inliers"

    @classmethod
    def failure(cls, inliers: int = 0) -> "PoseEstimate":
        return cls(None, int(inliers), float("nan"), False)


@dataclass
class RansacConfig:
    iterations: int = 500
    threshold_px: float = 2.0
    min_inliers: int = MIN_INLIERS
    seed: int = 0
    max_refits: int = 10
    # stop early once the best consensus makes a missed clean sample unlikely
    adaptive: bool = True
    confidence: float = 0.99
    chunk: int = 25


# ------------------------------------------------------------------ projection


def project_points(pose: Pose6D, points: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project reference-frame points through a camera whose pose (camera in
    reference frame) is ``pose``. Returns (uv, in_front); rows behind the
    camera hold NaN."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    pc = (P - pose.translation) @ pose.R
    front = pc[:, 2] > 0
    uv = np.full((P.shape[0], 2), np.nan)
    z = pc[front, 2]
    uv[front, 0] = K.fx * pc[front, 0] / z + K.cx
    uv[front, 1] = K.fy * pc[front, 1] / z + K.cy
    return uv, front


def project(pose: Pose6D, point, K: CameraIntrinsics) -> Optional[tuple[float, float]]:
    """Pixel of one point, or None when it lies on or behind the image plane."""
    uv, front = project_points(pose, np.asarray(point, float)[None], K)
    if not front[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


# ------------------------------------------------------------------ matching


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def match_descriptors(obs_desc: np.ndarray, cand_desc: np.ndarray, ratio: float = 0.8):
    """Ratio-test matching with one-to-one resolution.

    Returns (obs_idx, cand_idx, distance) sorted by observation index. Ties in
    nearest-neighbour search go to the lowest candidate index; on conflicts
    the smaller distance wins, then the lower observation index.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    m, n = obs_desc.shape[0], cand_desc.shape[0]
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    if m == 0 or n == 0:
        return empty
    if obs_desc.shape[1] != cand_desc.shape[1]:
        raise DimensionMismatchError("descriptor dimensions differ")
    D = _pairwise_distances(obs_desc, cand_desc)
    rows = np.arange(m)
    j1 = np.argmin(D, axis=1)
    d1 = D[rows, j1]
    if n > 1:
        D2 = D.copy()
        D2[rows, j1] = np.inf
        d2 = D2.min(axis=1)
    else:
        d2 = np.full(m, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = d1 < ratio * d2
    oi, cj, dd = rows[keep], j1[keep], d1[keep]
    if oi.size == 0:
        return empty
    # one-to-one: per candidate keep the closest observation
    order = np.lexsort((oi, dd, cj))
    cj_sorted = cj[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = cj_sorted[1:] != cj_sorted[:-1]
    sel = np.sort(order[first])
    return oi[sel], cj[sel], dd[sel]


def match_features(obs, candidates, ratio: float = 0.8, points: Optional[np.ndarray] = None) -> MatchSet:
    """Match observations (ObservationSet or list of Observation2D) against
    candidate features (list of Feature3D, or an (ids, positions, descriptors)
    triple). ``points`` overrides the 3D positions carried into the MatchSet."""
    if not isinstance(obs, ObservationSet):
        obs = ObservationSet.from_list(list(obs))
    if isinstance(candidates, tuple):
        ids, pos, desc = candidates
    else:
        cands = list(candidates)
        ids = np.array([c.id for c in cands], dtype=np.int64)
        pos = np.stack([c.position for c in cands]) if cands else np.zeros((0, 3))
        desc = np.stack([c.descriptor for c in cands]) if cands else np.zeros((0, obs.descriptors.shape[1]))
    oi, cj, dd = match_descriptors(obs.descriptors, desc, ratio)
    P = pos if points is None else points
    return MatchSet(oi, np.asarray(ids)[cj], obs.uv[oi], np.asarray(P, float).reshape(-1, 3)[cj], dd)


# ------------------------------------------------------------------ PnP


def _normalized_coords(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy], axis=-1)


def _hartley_2d(x: np.ndarray):
    """Similarity normalizing batches of 2D points: (.., n, 2) -> T (.., 3, 3)."""
    c = x.mean(axis=-2)
    s = np.sqrt(2.0) / np.maximum(np.linalg.norm(x - c[..., None, :], axis=-1).mean(axis=-1), 1e-300)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0]
    T[..., 1, 2] = -s * c[..., 1]
    T[..., 2, 2] = 1.0
    return T


def _hartley_3d(X: np.ndarray):
    c = X.mean(axis=-2)
    s = np.sqrt(3.0) / np.maximum(np.linalg.norm(X - c[..., None, :], axis=-1).mean(axis=-1), 1e-300)
    T = np.zeros(X.shape[:-2] + (4, 4))
    for k in range(3):
        T[..., k, k] = s
        T[..., k, 3] = -s * c[..., k]
    T[..., 3, 3] = 1.0
    return T


def _apply_h(T, x):
    xh = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    y = np.einsum("...ij,...nj->...ni", T, xh)
    return y[..., :-1] / y[..., -1:]


def _project_out(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (batched) via SVD."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def _null_vectors(A: np.ndarray):
    """Right null vector of each (2n, p) system; a single system uses the SVD,
    hypothesis batches the cheaper normal-equation eigendecomposition."""
    if A.shape[0] == 1:
        _, S, Vt = np.linalg.svd(A)
        return Vt[:, -1], S[:, -2] / np.maximum(S[:, 0], 1e-300)
    w, V = np.linalg.eigh(np.einsum("bki,bkj->bij", A, A))
    return V[:, :, 0], np.sqrt(np.maximum(w[:, 1], 0) / np.maximum(w[:, -1], 1e-300))


def _dlt_batch(X: np.ndarray, x: np.ndarray):
    """Batched normalized DLT. X (B, n, 3), x (B, n, 2) normalized image
    coordinates. Returns camera-from-reference (R, t) and the singular value
    ratio used to flag rank deficiency."""
    T3 = _hartley_3d(X)
    T2 = _hartley_2d(x)
    Xn = _apply_h(T3, X)
    xn = _apply_h(T2, x)
    B, n = X.shape[:2]
    Xh = np.concatenate([Xn, np.ones((B, n, 1))], axis=-1)
    A = np.zeros((B, 2 * n, 12))
    A[:, 0::2, 0:4] = Xh
    A[:, 0::2, 8:12] = -xn[..., 0:1] * Xh
    A[:, 1::2, 4:8] = Xh
    A[:, 1::2, 8:12] = -xn[..., 1:2] * Xh
    Pn, cond = _null_vectors(A)
    Pn = Pn.reshape(B, 3, 4)
    P = np.linalg.inv(T2) @ Pn @ T3
    M = P[:, :, :3]
    det = np.linalg.det(M)
    P = P * np.sign(np.where(det == 0, 1.0, det))[:, None, None]
    M = P[:, :, :3]
    U, sv, Vt3 = np.linalg.svd(M)
    R = U @ Vt3
    scale = sv.mean(axis=1)
    t = P[:, :, 3] / np.where(scale == 0, 1.0, scale)[:, None]
    return R, t, cond


def _plane_frames(X: np.ndarray):
    """Per-batch plane frame: centroid c and rotation Rp with plane normal as 3rd column."""
    c = X.mean(axis=-2)
    _, _, Vt = np.linalg.svd(X - c[..., None, :])
    Rp = np.swapaxes(Vt, -1, -2).copy()
    Rp[..., :, 2] *= np.sign(np.linalg.det(Rp))[..., None]
    return c, Rp


def _homography_batch(X: np.ndarray, x: np.ndarray):
    """Pose from (near-)coplanar points through a plane-induced homography."""
    c, Rp = _plane_frames(X)
    Xp = np.einsum("bji,bnj->bni", Rp, X - c[:, None, :])[..., :2]
    T1 = _hartley_2d(Xp)
    T2 = _hartley_2d(x)
    a = _apply_h(T1, Xp)
    b = _apply_h(T2, x)
    B, n = X.shape[:2]
    ah = np.concatenate([a, np.ones((B, n, 1))], axis=-1)
    A = np.zeros((B, 2 * n, 9))
    A[:, 0::2, 0:3] = ah
    A[:, 0::2, 6:9] = -b[..., 0:1] * ah
    A[:, 1::2, 3:6] = ah
    A[:, 1::2, 6:9] = -b[..., 1:2] * ah
    Hn, _ = _null_vectors(A)
    Hn = Hn.reshape(B, 3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    h1, h2, h3 = H[:, :, 0], H[:, :, 1], H[:, :, 2]
    lam = 2.0 / np.maximum(np.linalg.norm(h1, axis=1) + np.linalg.norm(h2, axis=1), 1e-300)
    # points must end up in front of the camera
    lam = lam * np.where(h3[:, 2] < 0, -1.0, 1.0)
    r1 = h1 * lam[:, None]
    r2 = h2 * lam[:, None]
    Rh = _project_out(np.stack([r1, r2, np.cross(r1, r2)], axis=2))
    th = h3 * lam[:, None]
    R = Rh @ np.swapaxes(Rp, -1, -2)
    t = th - np.einsum("bij,bj->bi", R, c)
    return R, t


def _planarity(X: np.ndarray) -> np.ndarray:
    S = np.linalg.svd(X - X.mean(axis=-2, keepdims=True), compute_uv=False)
    return S[..., 2] / np.maximum(S[..., 0], 1e-300), S[..., 1] / np.maximum(S[..., 0], 1e-300)


PLANAR_RATIO = 0.05
COLLINEAR_RATIO = 1e-6


def _initial_pose_batch(X: np.ndarray, x: np.ndarray):
    planar, spread = _planarity(X)
    R = np.empty(X.shape[:1] + (3, 3))
    t = np.empty(X.shape[:1] + (3,))
    use_h = planar < PLANAR_RATIO
    if np.any(~use_h):
        R[~use_h], t[~use_h], _ = _dlt_batch(X[~use_h], x[~use_h])
    if np.any(use_h):
        R[use_h], t[use_h] = _homography_batch(X[use_h], x[use_h])
    bad = spread < COLLINEAR_RATIO
    return R, t, bad


def _reprojection(R, t, X, uv, K: CameraIntrinsics):
    """Residuals (B, n, 2) and depth for batches of camera-from-reference poses."""
    pc = np.einsum("bij,nj->bni", R, X) + t[:, None, :]
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / z + K.cx
        v = K.fy * pc[..., 1] / z + K.cy
    r = np.stack([u, v], axis=-1) - uv[None]
    return r, z


def _gauss_newton(R, t, X, uv, K: CameraIntrinsics, iterations=10, grad_tol=1e-10, rel_tol=1e-9):
    """Reprojection refinement with a left perturbation on camera-from-reference."""
    fx, fy, cx, cy = K.fx, K.fy, K.cx, K.cy
    n = X.shape[0]

    def residual(R_, t_):
        pc = X @ R_.T + t_
        z = pc[:, 2]
        if np.any(z <= 0):
            return np.inf, None, pc
        r = np.empty((n, 2))
        r[:, 0] = fx * pc[:, 0] / z + cx - uv[:, 0]
        r[:, 1] = fy * pc[:, 1] / z + cy - uv[:, 1]
        return float(np.sum(r * r)), r, pc

    cost, r, pc = residual(R, t)
    if r is None:
        return _project_out(R[None])[0], t
    J = np.zeros((n, 2, 6))
    for _ in range(iterations):
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        iz = 1.0 / z
        # d(u, v)/d(rho, omega) for pc' = exp(omega) pc + rho
        J[:, 0, 0] = fx * iz
        J[:, 0, 2] = -fx * x * iz * iz
        J[:, 1, 1] = fy * iz
        J[:, 1, 2] = -fy * y * iz * iz
        J[:, 0, 3] = J[:, 0, 2] * y
        J[:, 0, 4] = fx * iz * z - J[:, 0, 2] * x
        J[:, 0, 5] = -fx * iz * y
        J[:, 1, 3] = -fy * iz * z + J[:, 1, 2] * y
        J[:, 1, 4] = -J[:, 1, 2] * x
        J[:, 1, 5] = fy * iz * x
        Jf = J.reshape(-1, 6)
        rv = r.reshape(-1)
        g = Jf.T @ rv
        if np.linalg.norm(g) < grad_tol:
            break
        H = Jf.T @ Jf
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            delta, *_ = np.linalg.lstsq(Jf, -rv, rcond=None)
        step = 1.0
        improved = converged = False
        for _ in range(8):
            dR = so3_exp(step * delta[3:])
            Rn = dR @ R
            tn = dR @ t + step * delta[:3]
            cn, rn, pcn = residual(Rn, tn)
            if cn <= cost:
                converged = cost - cn <= rel_tol * cost
                R, t, cost, r, pc = Rn, tn, cn, rn, pcn
                improved = True
                break
            step *= 0.5
        if not improved or converged:
            break
    return _project_out(R[None])[0], t


def _to_camera_pose(R_cw, t_cw) -> Pose6D:
    return Pose6D.from_matrix(R_cw.T, -R_cw.T @ t_cw)


def solve_pnp(matches, K: CameraIntrinsics, uv: Optional[np.ndarray] = None) -> Pose6D:
    """Camera pose (camera in the points' frame) from >= 6 correspondences.

    Accepts a MatchSet or an (n, 3) point array together with ``uv``.
    """
    if isinstance(matches, MatchSet):
        X, uv = matches.points, matches.uv
    else:
        X = np.asarray(matches, dtype=float)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if X.shape[0] < SAMPLE_SIZE:
        raise DegenerateConfigurationError(f"PnP needs at least {SAMPLE_SIZE} correspondences")
    R, t, bad = _initial_pose_batch(X[None], _normalized_coords(uv, K)[None])
    if bad[0]:
        raise DegenerateConfigurationError("3D points are collinear")
    R, t = R[0], t[0]
    if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
        raise DegenerateConfigurationError("rank-deficient PnP system")
    R, t = _gauss_newton(R, t, X, uv, K)
    return _to_camera_pose(R, t)


def _inlier_mask(R, t, X, uv, K, thr):
    r, z = _reprojection(R, t, X, uv, K)
    err = np.linalg.norm(r, axis=-1)
    return (z > 0) & (err < thr), err


def ransac_pnp(matches: MatchSet, K: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Seeded RANSAC over 6-point subsets; refit on the consensus until the
    inlier set stops changing."""
    m = len(matches)
    if m < max(cfg.min_inliers, SAMPLE_SIZE):
        return PoseEstimate.failure()
    X, uv = matches.points, matches.uv
    xn = _normalized_coords(uv, K)
    rng = np.random.default_rng(cfg.seed)
    samples = np.argsort(rng.random((cfg.iterations, m)), axis=1)[:, :SAMPLE_SIZE]
    best_count, mask, best_Rt = -1, None, None
    step = cfg.chunk if cfg.adaptive else cfg.iterations
    for lo in range(0, cfg.iterations, step):
        sub = samples[lo: lo + step]
        with np.errstate(all="ignore"):
            R, t, bad = _initial_pose_batch(X[sub], xn[sub])
            ok = ~bad & np.all(np.isfinite(R), axis=(1, 2)) & np.all(np.isfinite(t), axis=1)
            inl, _ = _inlier_mask(R, t, X, uv, K, cfg.threshold_px)
        counts = np.where(ok, inl.sum(axis=1), -1)
        b = int(np.argmax(counts))
        if counts[b] > best_count:
            best_count, mask = int(counts[b]), inl[b]
            best_Rt = (R[b], t[b])
        if cfg.adaptive and best_count >= SAMPLE_SIZE:
            eps = best_count / m
            p_clean = eps**SAMPLE_SIZE
            needed = np.inf if p_clean <= 0 else (
                0 if p_clean >= 1 else np.log(1 - cfg.confidence) / np.log(1 - p_clean)
            )
            if lo + sub.shape[0] >= needed:
                break
    if best_count < SAMPLE_SIZE:
        return PoseEstimate.failure(max(best_count, 0))
    # refit on the consensus; pose and mask always describe the same solution
    # (each refit warm-starts from the previous solution)
    pose, cur = None, mask
    Rc, tc = best_Rt
    for _ in range(cfg.max_refits):
        idx = np.flatnonzero(cur)
        try:
            with np.errstate(all="ignore"):
                Rn, tn = _gauss_newton(Rc, tc, X[idx], uv[idx], K)
        except np.linalg.LinAlgError:
            break
        if not (np.all(np.isfinite(Rn)) and np.all(np.isfinite(tn))):
            break
        new_mask = _inlier_mask(Rn[None], tn[None], X, uv, K, cfg.threshold_px)[0][0]
        if new_mask.sum() < SAMPLE_SIZE:
            break
        Rc, tc = Rn, tn
        pose, mask = _to_camera_pose(Rn, tn), new_mask
        if np.array_equal(new_mask, cur):
            break
        cur = new_mask
    if pose is None:
        return PoseEstimate.failure(int(best_count))
    idx = np.flatnonzero(mask)
    r, _ = _reprojection(Rc[None], tc[None], X[idx], uv[idx], K)
    rms = float(np.sqrt(np.mean(np.sum(r[0] ** 2, axis=-1)))) if idx.size else float("nan")
    success = idx.size >= cfg.min_inliers
    return PoseEstimate(pose, int(idx.size), rms, bool(success), idx)
