"""Voxel occupancy and segment raycasting for feature visibility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_VISIBILITY_RANGE = 15.0


@dataclass(eq=False)
class DepthModel:
    """Axis-aligned voxel occupancy grid in world coordinates."""

    origin: np.ndarray
    voxel_size: float
    occupied: np.ndarray  # bool (nx, ny, nz)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel size must be positive")
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.occupied.ndim != 3:
            raise ValueError("occupancy grid must be 3-D")

    @classmethod
    def empty(cls, origin, extent, voxel_size: float = 0.1) -> "DepthModel":
        shape = np.ceil(np.asarray(extent, dtype=float) / voxel_size).astype(int)
        return cls(np.asarray(origin, dtype=float), voxel_size, np.zeros(tuple(shape), dtype=bool))

    @property
    def shape(self) -> tuple:
        return self.occupied.shape

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points, dtype=float) - self.origin) / self.voxel_size).astype(np.int64)

    def is_occupied(self, points: np.ndarray) -> np.ndarray:
        v = self.voxel_of(np.atleast_2d(points))
        return self._lookup(v)

    def _lookup(self, v: np.ndarray) -> np.ndarray:
        shape = np.array(self.shape)
        inside = np.all((v >= 0) & (v < shape), axis=-1)
        out = np.zeros(v.shape[:-1], dtype=bool)
        vi = v[inside]
        out[inside] = self.occupied[vi[:, 0], vi[:, 1], vi[:, 2]]
        return out

    def fill_box(self, lo, hi, value: bool = True) -> None:
        """Set every voxel whose centre lies inside [lo, hi] (occupied by default)."""
        lo_v = np.ceil((np.asarray(lo, float) - self.origin) / self.voxel_size - 0.5 - 1e-9).astype(int)
        hi_v = np.floor((np.asarray(hi, float) - self.origin) / self.voxel_size - 0.5 + 1e-9).astype(int)
        lo_v = np.clip(lo_v, 0, np.array(self.shape))
        hi_v = np.clip(hi_v + 1, 0, np.array(self.shape))
        self.occupied[lo_v[0]:hi_v[0], lo_v[1]:hi_v[1], lo_v[2]:hi_v[2]] = value

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "voxel_size": float(self.voxel_size),
            "shape": list(self.shape),
            "occupied": np.flatnonzero(self.occupied.ravel()).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DepthModel":
        grid = np.zeros(int(np.prod(d["shape"])), dtype=bool)
        grid[np.asarray(d["occupied"], dtype=np.int64)] = True
        return cls(np.array(d["origin"]), float(d["voxel_size"]), grid.reshape(d["shape"]))


def trace_segments(
    depth: DepthModel,
    starts: np.ndarray,
    ends: np.ndarray,
    exclude_end_voxel: bool = True,
    count: bool = False,
) -> np.ndarray:
    """Exact voxel traversal (Amanatides-Woo) of many segments at once.

    Returns a bool array, True where the segment crosses an occupied voxel,
    or with ``count=True`` the number of occupied voxels each segment crosses
    (the end voxel still honours ``exclude_end_voxel``).
    """
    p0 = (np.atleast_2d(np.asarray(starts, dtype=float)) - depth.origin) / depth.voxel_size
    p1 = (np.atleast_2d(np.asarray(ends, dtype=float)) - depth.origin) / depth.voxel_size
    p0, p1 = np.broadcast_arrays(p0, p1)
    n = p0.shape[0]
    d = p1 - p0
    v = np.floor(p0).astype(np.int64)
    ve = np.floor(p1).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
        t_delta = np.abs(inv)
        nxt = np.where(step > 0, v + 1, v).astype(float)
        t_max = np.where(d != 0, (nxt - p0) * inv, np.inf)
    hits = np.zeros(n, dtype=np.int64)
    idx = np.arange(n)
    rows = np.arange(n)
    max_steps = int(np.max(np.abs(ve - v).sum(axis=1), initial=0)) + 2
    for _ in range(max_steps):
        if idx.size == 0:
            break
        vi = v[idx]
        at_end = np.all(vi == ve[idx], axis=1)
        occ = depth._lookup(vi)
        if exclude_end_voxel:
            occ &= ~at_end
        hits[idx] += occ
        done = at_end
        if not count:
            done = done | occ
        tm = t_max[idx]
        axis = np.argmin(tm, axis=1)
        tmin = tm[rows[: idx.size], axis]
        done |= tmin > 1.0
        keep = ~done
        idx = idx[keep]
        axis = axis[keep]
        v[idx, axis] += step[idx, axis]
        t_max[idx, axis] += t_delta[idx, axis]
    return hits if count else hits > 0


def segment_blocked(depth: DepthModel, start, end) -> bool:
    return bool(trace_segments(depth, np.asarray(start)[None], np.asarray(end)[None])[0])


def visible_sets(
    node_positions: dict,
    feature_ids: np.ndarray,
    feature_positions: np.ndarray,
    depth: DepthModel,
    max_range: float = MAX_VISIBILITY_RANGE,
    chunk: int = 200_000,
) -> dict:
    """node id -> frozenset of feature ids with an unobstructed line of sight.

    A feature is visible from a node when it lies within ``max_range`` and
    the segment between them crosses no occupied voxel other than the one
    holding the feature.
    """
    fids = np.asarray(feature_ids, dtype=np.int64)
    fpos = np.asarray(feature_positions, dtype=float).reshape(-1, 3)
    out = {}
    pair_node, pair_feat = [], []
    node_list = sorted(node_positions)
    for nid in node_list:
        p = np.asarray(node_positions[nid], dtype=float)
        near = np.flatnonzero(np.linalg.norm(fpos - p, axis=1) <= max_range)
        pair_node.append(np.full(near.size, nid, dtype=np.int64))
        pair_feat.append(near)
        out[nid] = set()
    if not node_list:
        return {}
    pn = np.concatenate(pair_node)
    pf = np.concatenate(pair_feat)
    starts_all = np.array([node_positions[i] for i in node_list], dtype=float)
    row_of = {nid: r for r, nid in enumerate(node_list)}
    rows = np.array([row_of[i] for i in pn], dtype=np.int64) if pn.size else np.zeros(0, np.int64)
    for lo in range(0, pn.size, chunk):
        sl = slice(lo, lo + chunk)
        blocked = trace_segments(depth, starts_all[rows[sl]], fpos[pf[sl]])
        for nid, f in zip(pn[sl][~blocked], pf[sl][~blocked]):
            out[int(nid)].add(int(fids[f]))
    return {nid: frozenset(s) for nid, s in out.items()}


def compute_visibility(g, depth: DepthModel, max_range: float = MAX_VISIBILITY_RANGE) -> dict:
    """Raycast visibility for every node of a localization graph."""
    fids = np.array(sorted(g.features), dtype=np.int64)
    fpos = np.array([g.features[i].position for i in fids]).reshape(-1, 3)
    positions = {nid: n.world_pose.translation for nid, n in g.nodes.items()}
    return visible_sets(positions, fids, fpos, depth, max_range)
