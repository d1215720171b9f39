"""Canned benchmark scenarios: a world, its mapping walks and a query walk."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Optional

import numpy as np

from ..assembler.traces import DataTrace, GroundTruth
from ..errors import ConfigError, UnknownScenarioError
from ..geometry import Pose6D
from ..vision import CameraIntrinsics
from .sensors import SensorConfig, TrajectorySpec, simulate_trace
from .world import WALL, WorldParams, WorldSpec, door_between, generate_world

SCENARIOS = ("corridor-loop", "two-rooms", "large-sparse")


@dataclass(eq=False)
class Scenario:
    name: str
    seed: int
    query_seed: int
    world: WorldSpec
    mapping: list  # DataTrace per mapping walk
    mapping_truth: list  # GroundTruth per mapping walk
    query: DataTrace
    truth: GroundTruth
    training: list = field(default_factory=list)  # (DataTrace, GroundTruth) labelled walks
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    query_path_fn: Optional[Callable] = None  # query seed -> planar waypoints
    query_hz: float = 1.0
    query_wifi_hz: float = 10.0

    def __iter__(self):
        # unpacks as (mapping traces, query trace, ground truth)
        return iter((self.mapping, self.query, self.truth))

    @property
    def anchor_pose(self) -> Pose6D:
        return self.mapping_truth[0].poses[0]

    @property
    def node_positions(self) -> np.ndarray:
        """Ground-truth position of every mapping frame in graph node order."""
        return np.array([p.translation for gt in self.mapping_truth for p in gt.poses])

    @property
    def node_regions(self) -> np.ndarray:
        return np.array([r for gt in self.mapping_truth for r in gt.rooms])


def nearest_nodes(node_positions: np.ndarray, poses) -> list:
    """Index of the nearest mapping frame to each pose (lowest index on ties)."""
    P = np.array([p.translation for p in poses]).reshape(-1, 3)
    d = np.linalg.norm(P[:, None, :] - node_positions[None], axis=2)
    return [int(i) for i in np.argmin(d, axis=1)]


# ---------------------------------------------------------------- paths


def _inset_loop(lo, hi, inset: float) -> np.ndarray:
    lo = np.asarray(lo, float) + inset
    hi = np.asarray(hi, float) - inset
    return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])


def _door_crossing(world: WorldSpec, a: int, b: int, reach: float = 1.0) -> np.ndarray:
    """Approach point in ``a``, door centre, landing point in ``b``."""
    d = door_between(world, a, b)
    c = d.center
    ra, rb = world.regions[a], world.regions[b]
    axis = 0 if (d.hi[0] - d.lo[0]) <= WALL + 1e-9 else 1
    sgn = np.sign(rb.center[axis] - ra.center[axis])
    step = np.zeros(2)
    step[axis] = sgn * (WALL / 2 + reach)
    return np.array([c - step, c, c + step])


def _loop_from(corners: np.ndarray, entry: np.ndarray) -> np.ndarray:
    k = int(np.argmin(np.linalg.norm(corners - entry, axis=1)))
    order = [(k + i) % 4 for i in range(5)]
    return corners[order]


def _snake_order(nx: int, ny: int) -> list:
    out = []
    for j in range(ny):
        cols = range(nx) if j % 2 == 0 else range(nx - 1, -1, -1)
        out.extend(j * nx + i for i in cols)
    return out


def _rooms_path(world: WorldSpec, rooms: list, inset: float) -> np.ndarray:
    pts = []
    entry = world.regions[rooms[0]].center
    for n, r in enumerate(rooms):
        reg = world.regions[r]
        pts.extend(_loop_from(_inset_loop(reg.lo, reg.hi, inset), entry))
        if n + 1 < len(rooms):
            cross = _door_crossing(world, r, rooms[n + 1])
            pts.extend(cross)
            entry = cross[-1]
    return _dedupe(np.array(pts))


def _dedupe(p: np.ndarray) -> np.ndarray:
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(p, axis=0), axis=1) > 1e-6
    return p[keep]


def _random_point(reg, rng, margin: float) -> np.ndarray:
    lo, hi = np.asarray(reg.lo) + margin, np.asarray(reg.hi) - margin
    return lo + rng.random(2) * (hi - lo)


def _path_length(p: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1))) if len(p) > 1 else 0.0


def _random_room_walk(world: WorldSpec, rng, length: float, margin: float = 1.0) -> np.ndarray:
    """Wander through rooms, crossing doors to random neighbours."""
    n = len(world.regions)
    adj = {i: [] for i in range(n)}
    for d in world.layout.doors:
        a, b = d.regions
        adj[a].append(b)
        adj[b].append(a)
    r = int(rng.integers(n))
    pts = [_random_point(world.regions[r], rng, margin)]
    while _path_length(np.array(pts)) < length:
        for _ in range(int(rng.integers(1, 3))):
            pts.append(_random_point(world.regions[r], rng, margin))
        if adj[r]:
            nxt = int(rng.choice(adj[r]))
            pts.extend(_door_crossing(world, r, nxt))
            r = nxt
    return _dedupe(np.array(pts))


def _route_segment(world: WorldSpec, route: np.ndarray, rng, length: float, jitter: float = 0.3,
                   margin: float = 1.2) -> np.ndarray:
    """A random stretch of a mapped route, walked either way, with waypoints
    well inside rooms nudged sideways."""
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = min(length, s[-1])
    s0 = rng.uniform(0.0, s[-1] - length)
    s1 = s0 + length
    inner = route[(s > s0) & (s < s1)]
    pts = np.vstack([
        np.array([np.interp(s0, s, route[:, 0]), np.interp(s0, s, route[:, 1])]),
        inner,
        np.array([np.interp(s1, s, route[:, 0]), np.interp(s1, s, route[:, 1])]),
    ])
    if rng.random() < 0.5:
        pts = pts[::-1].copy()
    for i in range(len(pts)):
        for reg in world.regions:
            if reg.contains(pts[i], margin)[0]:
                pts[i] = np.clip(pts[i] + rng.normal(0.0, jitter, 2), np.asarray(reg.lo) + margin,
                                 np.asarray(reg.hi) - margin)
                break
    return _dedupe(pts)


def _random_in_room(world: WorldSpec, room: int, rng, length: float, margin: float = 1.0) -> np.ndarray:
    reg = world.regions[room]
    pts = [_random_point(reg, rng, margin)]
    while _path_length(np.array(pts)) < length:
        q = _random_point(reg, rng, margin)
        if np.linalg.norm(q - pts[-1]) > 1.0:
            pts.append(q)
    return np.array(pts)


# ---------------------------------------------------------------- scenarios


def _mapping_sensors() -> SensorConfig:
    # mapping rigs carry depth cameras: their odometry drifts far less than PDR
    return SensorConfig(record="mapping", odometry_sigma_t=0.0005, odometry_sigma_yaw=0.0001, odometry_floor=0.0001)


def _query_sensors() -> SensorConfig:
    return SensorConfig(record="query")


def _label(truth: GroundTruth, node_positions: np.ndarray) -> GroundTruth:
    return GroundTruth(truth.poses, nearest_nodes(node_positions, truth.poses), truth.rooms)


def _build(name, seed, query_seed, world, map_paths, query_path_fn, n_training, map_hz=1.0,
           query_hz=1.0) -> Scenario:
    mapping, mapping_truth = [], []
    for i, path in enumerate(map_paths):
        tr, gt = simulate_trace(world, TrajectorySpec(path, camera_hz=map_hz), seed=seed * 1000 + i,
                                sensors=_mapping_sensors(), trace_id=f"{name}-map-{i}")
        mapping.append(tr)
        mapping_truth.append(gt)
    sizes = np.cumsum([0] + [len(t) for t in mapping])
    mapping_truth = [GroundTruth(gt.poses, list(range(sizes[i], sizes[i + 1])), gt.rooms)
                     for i, gt in enumerate(mapping_truth)]
    npos = np.array([p.translation for gt in mapping_truth for p in gt.poses])
    training = []
    for i in range(n_training):
        path = map_paths[i % len(map_paths)]
        tr, gt = simulate_trace(world, TrajectorySpec(path, camera_hz=map_hz), seed=seed * 1000 + 500 + i,
                                sensors=SensorConfig(record="query", outlier_rate=0.0), trace_id=f"{name}-train-{i}")
        training.append((tr, _label(gt, npos)))
    sc = Scenario(name, seed, query_seed, world, mapping, mapping_truth, None, None, training,
                  query_path_fn=query_path_fn, query_hz=query_hz)
    return with_query(sc, query_seed)


def with_query(sc: Scenario, query_seed: int) -> Scenario:
    """Same world and map, a fresh query walk for ``query_seed``."""
    path = sc.query_path_fn(query_seed)
    q, qgt = simulate_trace(sc.world, TrajectorySpec(path, camera_hz=sc.query_hz, wifi_hz=sc.query_wifi_hz),
                            seed=[sc.seed, query_seed, 7], sensors=_query_sensors(),
                            trace_id=f"{sc.name}-query-{query_seed}")
    return replace(sc, query_seed=query_seed, query=q, truth=_label(qgt, sc.node_positions))


def _override(params: WorldParams, world: Optional[dict]) -> WorldParams:
    if not world:
        return params
    try:
        return replace(params, **{k: tuple(v) if isinstance(v, list) else v for k, v in world.items()})
    except TypeError as e:
        raise ConfigError(f"bad world parameter: {e}") from None


def _segment_query(world, route, seed, length, qs):
    return _route_segment(world, route, np.random.default_rng([seed, qs, 1]), length)


def _room_query(world, seed, length, qs):
    # the query room alternates with the query seed so every run set is balanced
    return _random_in_room(world, 1 + (qs % 2), np.random.default_rng([seed, qs, 2]), length)


def _loop_query(corners, seed, laps, qs):
    rng = np.random.default_rng([seed, qs, 3])
    start = int(rng.integers(4))
    direction = 1 if rng.random() < 0.5 else -1
    n_legs = int(round(4 * laps))
    lateral = rng.uniform(-0.3, 0.3, (n_legs + 1, 2))
    return np.array([corners[(start + direction * i) % 4] for i in range(n_legs + 1)]) + lateral


def large_sparse(seed: int = 0, query_seed: Optional[int] = None, query_length: float = 90.0,
                 n_training: int = 2, world: Optional[dict] = None) -> Scenario:
    query_seed = seed if query_seed is None else query_seed
    params = WorldParams(layout="grid", rooms_x=4, rooms_y=4, room_size=7.0, feature_count=2400,
                         ap_placement="random", n_access_points=2)
    world = generate_world(_override(params, world), seed)
    path = _rooms_path(world, _snake_order(4, 4), inset=1.5)

    query = partial(_segment_query, world, path, seed, query_length)
    return _build("large-sparse", seed, query_seed, world, [path], query, n_training)


def two_rooms(seed: int = 0, query_seed: Optional[int] = None, query_length: float = 35.0,
              n_training: int = 2, world: Optional[dict] = None) -> Scenario:
    query_seed = seed if query_seed is None else query_seed
    params = WorldParams(layout="two-rooms", room_size=6.0, corridor_width=2.0, feature_count=500,
                         ap_placement="per-region", clone_regions=((1, 2),))
    world = generate_world(_override(params, world), seed)
    cor = world.regions[0]
    ya = cor.center[1]
    path = [np.array([cor.lo[0] + 0.8, ya])]
    for room in (1, 2):
        cross = _door_crossing(world, 0, room)
        path.append(np.array([cross[0][0], ya]))
        path.extend(cross[1:])
        reg = world.regions[room]
        path.extend(_loop_from(_inset_loop(reg.lo, reg.hi, 1.2), cross[-1]))
        path.extend(cross[::-1][:-1])
        path.append(np.array([cross[0][0], ya]))
    path.append(np.array([cor.hi[0] - 0.8, ya]))

    query = partial(_room_query, world, seed, query_length)
    return _build("two-rooms", seed, query_seed, world, [_dedupe(np.array(path))], query, n_training)


def corridor_loop(seed: int = 0, query_seed: Optional[int] = None, query_laps: float = 1.0,
                  n_training: int = 2, world: Optional[dict] = None) -> Scenario:
    query_seed = seed if query_seed is None else query_seed
    params = WorldParams(layout="loop", loop_size=(16.0, 12.0), corridor_width=2.0, feature_count=800,
                         ap_placement="random", n_access_points=3)
    params = _override(params, world)
    world = generate_world(params, seed)
    W, H = params.loop_size
    m = WALL + params.corridor_width / 2
    corners = np.array([[m, m], [W - m, m], [W - m, H - m], [m, H - m]])

    query = partial(_loop_query, corners, seed, query_laps)
    return _build("corridor-loop", seed, query_seed, world, [corners[[0, 1, 2, 3, 0]], corners[[2, 3, 0, 1]]],
                  query, n_training)


_FACTORIES = {"large-sparse": large_sparse, "two-rooms": two_rooms, "corridor-loop": corridor_loop}


def make_benchmark_scenario(name: str, seed: int = 0, query_seed: Optional[int] = None, **kw) -> Scenario:
    """Build a canned scenario by name; unpacks as (mapping traces, query trace, truth)."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise UnknownScenarioError(f"unknown scenario {name!r}; choose from {sorted(_FACTORIES)}") from None
    return factory(seed, query_seed, **kw)
