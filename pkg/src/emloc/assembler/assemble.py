"""Offline map building: traces -> optimized, visibility-augmented localization graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import DataError
from ..geometry import Pose6D, so3_exp, wrap_angle
from ..graph import Feature3D, GraphEdge, GraphNode, LocalizationGraph
from ..sidechannel import BowHistogram, ChannelConfig, idf_weights, quantize
from .colocation import detect_colocations
from .posegraph import Constraint, PoseGraphProblem, optimize_graph
from .traces import DataTrace
from .visibility import MAX_VISIBILITY_RANGE, DepthModel, visible_sets
from .vocabulary import build_vocabulary

log = logging.getLogger(__name__)


@dataclass
class AssemblyConfig:
    tau: Union[float, dict] = 0.85
    channels: ChannelConfig = field(default_factory=ChannelConfig)
    vocabulary_size: int = 64
    seed: int = 0
    max_visibility_range: float = MAX_VISIBILITY_RANGE
    anchor_pose: Pose6D = field(default_factory=Pose6D.identity)
    odometry_sigma_t: float = 0.05
    odometry_sigma_r: float = 0.01
    colocation_sigma_t: float = 1.0
    colocation_rot_information: float = 1e-6
    switch_prior_weight: float = 1.0
    switch_keep: float = 0.5
    max_iterations: int = 100
    alignment_inlier_m: float = 1.5


@dataclass
class AssemblyReport:
    links: list
    switches: np.ndarray
    kept_links: list
    initial_cost: float
    final_cost: float


def _odometry_information(cfg: AssemblyConfig) -> np.ndarray:
    return np.diag([cfg.odometry_sigma_t**-2] * 3 + [cfg.odometry_sigma_r**-2] * 3)


def _colocation_information(cfg: AssemblyConfig) -> np.ndarray:
    return np.diag([cfg.colocation_sigma_t**-2] * 3 + [cfg.colocation_rot_information] * 3)


def _fit_se2(p: np.ndarray, q: np.ndarray):
    """Least-squares yaw + translation with q ~ R p + t (z handled as an offset)."""
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    a, b = p[:, :2] - pc[:2], q[:, :2] - qc[:2]
    yaw = np.arctan2(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]), np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    R = so3_exp([0.0, 0.0, yaw])
    return R, qc - R @ pc


def robust_se2_alignment(p: np.ndarray, q: np.ndarray, yaw_hint: float, inlier_m: float):
    """Rigid planar alignment of trace-local positions ``p`` onto placed ``q``.

    Every pair of correspondences proposes a model; the largest consensus
    (lowest pair index on ties) is refit by least squares. A single
    correspondence uses ``yaw_hint``.
    """
    n = p.shape[0]
    if n == 1:
        R = so3_exp([0.0, 0.0, yaw_hint])
        return R, q[0] - R @ p[0]
    best, best_inl = None, None
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(p[i, :2] - p[j, :2]) < 1e-6:
                continue
            R, t = _fit_se2(p[[i, j]], q[[i, j]])
            inl = np.linalg.norm(p @ R.T + t - q, axis=1) < inlier_m
            if best_inl is None or inl.sum() > best_inl.sum():
                best, best_inl = (R, t), inl
    if best is None:
        R = so3_exp([0.0, 0.0, yaw_hint])
        return R, (q - p @ R.T).mean(axis=0)
    if best_inl.sum() >= 2:
        return _fit_se2(p[best_inl], q[best_inl])
    return best


def _initial_poses(traces, links, cfg: AssemblyConfig) -> list:
    local = [t.cumulative_poses() for t in traces]
    placed: dict[int, list] = {0: [cfg.anchor_pose @ p for p in local[0]]}
    remaining = set(range(1, len(traces)))
    while remaining:
        def n_links(k):
            return sum(1 for L in links if (L.trace_a == k and L.trace_b in placed) or (L.trace_b == k and L.trace_a in placed))
        k = min(remaining, key=lambda k: (-n_links(k), k))
        pairs = []
        for L in links:
            if L.trace_a == k and L.trace_b in placed:
                pairs.append((L.frame_a, placed[L.trace_b][L.frame_b]))
            elif L.trace_b == k and L.trace_a in placed:
                pairs.append((L.frame_b, placed[L.trace_a][L.frame_a]))
        if not pairs:
            # nothing ties this trace to the map: leave it as its own component
            placed[k] = list(local[k])
        else:
            p = np.array([local[k][f].translation for f, _ in pairs])
            q = np.array([w.translation for _, w in pairs])
            f0, w0 = pairs[0]
            hint = float(wrap_angle(w0.euler[0] - local[k][f0].euler[0]))
            R, t = robust_se2_alignment(p, q, hint, cfg.alignment_inlier_m)
            T = Pose6D.from_matrix(R, t)
            placed[k] = [T @ pp for pp in local[k]]
        remaining.discard(k)
    return [pose for k in range(len(traces)) for pose in placed[k]]


def _merge_features(traces, poses, offsets, descriptor_dim) -> dict:
    sums: dict[int, list] = {}
    for ti, tr in enumerate(traces):
        for fi, fr in enumerate(tr.frames):
            if fr.landmark_ids.size == 0:
                continue
            world = poses[offsets[ti] + fi].transform(fr.positions)
            for lid, w, d in zip(fr.landmark_ids, world, fr.descriptors):
                acc = sums.setdefault(int(lid), [np.zeros(3), np.zeros(descriptor_dim), 0])
                acc[0] += w
                acc[1] += d
                acc[2] += 1
    feats = {}
    for lid in sorted(sums):
        ps, ds, c = sums[lid]
        d = ds / np.linalg.norm(ds)
        feats[lid] = Feature3D(lid, ps / c, d)
    return feats


def assemble_with_report(
    traces: Sequence[DataTrace],
    tau: Optional[Union[float, dict]] = None,
    depth: Optional[DepthModel] = None,
    config: AssemblyConfig = AssemblyConfig(),
) -> tuple[LocalizationGraph, AssemblyReport]:
    if not traces:
        raise DataError("assemble needs at least one trace")
    tau = config.tau if tau is None else tau
    if depth is None:
        depth = next((t.depth for t in traces if t.depth is not None), None)
    offsets = np.concatenate([[0], np.cumsum([len(t) for t in traces])]).astype(int)
    dims = {fr.descriptors.shape[1] for t in traces for fr in t.frames if fr.landmark_ids.size}
    if len(dims) > 1:
        raise DataError(f"traces mix descriptor dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0

    all_desc = [fr.descriptors for t in traces for fr in t.frames if fr.landmark_ids.size]
    vocab = np.zeros((0, dim))
    if all_desc and config.vocabulary_size > 0:
        vocab = build_vocabulary(np.vstack(all_desc), config.vocabulary_size, config.seed)
    fps = []
    for t in traces:
        row = []
        for fr in t.frames:
            fp = fr.fingerprint
            if vocab.size and fr.descriptors.shape[1] == dim:
                fp = fp.with_appearance(quantize(fr.descriptors, vocab) if fr.landmark_ids.size
                                        else BowHistogram(np.zeros(len(vocab), dtype=np.int64)))
            row.append(fp)
        fps.append(row)
    hists = [fp.appearance for row in fps for fp in row if fp.appearance is not None]
    idf = idf_weights(hists, len(vocab)) if vocab.size else None

    links = detect_colocations(fps, tau, config.channels, idf) if len(traces) > 1 else []
    init = _initial_poses(traces, links, config)

    info_o = _odometry_information(config)
    info_c = _colocation_information(config)
    odo = [
        Constraint(offsets[ti] + k - 1, offsets[ti] + k, fr.odometry, info_o)
        for ti, t in enumerate(traces)
        for k, fr in enumerate(t.frames)
        if k > 0
    ]
    loops = []
    for L in links:
        i, j = offsets[L.trace_a] + L.frame_a, offsets[L.trace_b] + L.frame_b
        rot = Pose6D.from_matrix(init[i].R.T @ init[j].R)
        loops.append(Constraint(i, j, rot, info_c))
    problem = PoseGraphProblem(init, odo, loops, anchors=None, switch_prior_weight=config.switch_prior_weight)
    res = optimize_graph(problem, max_iterations=config.max_iterations)
    poses = res.poses
    poses[0] = config.anchor_pose

    nodes = {}
    for ti, t in enumerate(traces):
        for k, fr in enumerate(t.frames):
            nid = int(offsets[ti] + k)
            nodes[nid] = GraphNode(nid, poses[nid], frozenset(int(x) for x in fr.landmark_ids), t.trace_id, k)
    edges = []
    for ti, t in enumerate(traces):
        for k in range(1, len(t)):
            i, j = int(offsets[ti] + k - 1), int(offsets[ti] + k)
            edges.append(GraphEdge(i, j, poses[i].inverse() @ poses[j], fps[ti][k], "odometry"))
    kept = []
    for L, s in zip(links, res.switches):
        if s >= config.switch_keep:
            i, j = int(offsets[L.trace_a] + L.frame_a), int(offsets[L.trace_b] + L.frame_b)
            edges.append(GraphEdge(i, j, poses[i].inverse() @ poses[j], None, "colocation"))
            kept.append(L)

    features = _merge_features(traces, poses, offsets, dim)
    if depth is not None and features:
        fids = np.array(sorted(features), dtype=np.int64)
        fpos = np.array([features[i].position for i in fids])
        vis = visible_sets({n: nodes[n].world_pose.translation for n in nodes}, fids, fpos, depth,
                           config.max_visibility_range)
        for n, node in nodes.items():
            node.visible_features = frozenset(node.visible_features | vis[n])
    g = LocalizationGraph(nodes, edges, features, dim, vocab)
    g.validate()
    if not g.is_connected():
        log.info("assembled graph has several components (no accepted link between some traces)")
    return g, AssemblyReport(links, np.asarray(res.switches), kept, res.initial_cost, res.final_cost)


def assemble(traces, tau=None, depth=None, config: AssemblyConfig = AssemblyConfig()) -> LocalizationGraph:
    return assemble_with_report(traces, tau, depth, config)[0]
