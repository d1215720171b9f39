"""Synthetic indoor worlds: voxel walls, wall-mounted features, WiFi and magnetic fields.

A layout is a set of free axis-aligned rectangles (rooms, corridors) carved
out of a solid block, plus door openings carved through the walls between
them. Everything that is not carved stays occupied, so walls are exactly
the material left between regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..assembler.visibility import DepthModel, trace_segments

VOXEL = 0.1
WALL = 0.2
HEIGHT = 3.0
FEATURE_OFFSET = 0.01  # features sit just in front of the wall face


@dataclass(frozen=True)
class Region:
    index: int
    name: str
    lo: tuple  # (x, y) of the free interior
    hi: tuple

    def contains(self, xy: np.ndarray, margin: float = 0.0) -> np.ndarray:
        xy = np.atleast_2d(xy)
        lo, hi = np.asarray(self.lo) + margin, np.asarray(self.hi) - margin
        return np.all((xy[:, :2] >= lo) & (xy[:, :2] <= hi), axis=1)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)


@dataclass(frozen=True)
class Door:
    lo: tuple  # (x, y) box carved through a wall, full height
    hi: tuple
    regions: tuple  # the two region indices it joins

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2


@dataclass(frozen=True)
class AccessPoint:
    id: str
    position: np.ndarray
    tx_power: float = -35.0  # dBm at 1 m
    gamma: float = 2.2
    shadowing: float = 3.0


@dataclass(frozen=True)
class Layout:
    extent: tuple  # (x, y) size of the whole block
    regions: tuple
    doors: tuple


@dataclass
class WorldParams:
    layout: str = "grid"  # grid | two-rooms | loop
    rooms_x: int = 2
    rooms_y: int = 1
    room_size: float = 6.0
    corridor_width: float = 2.0
    loop_size: tuple = (16.0, 12.0)
    door_width: float = 1.2
    height: float = HEIGHT
    feature_count: int = 400
    descriptor_dim: int = 32
    # access points: "random" spreads n_access_points over regions; "per-region"
    # mounts one at the same relative spot of every non-corridor region
    ap_placement: str = "random"
    n_access_points: int = 3
    tx_power: float = -35.0
    gamma: float = 2.2
    shadowing: float = 3.0
    wall_loss: float = 2.5  # dB per occupied voxel crossed
    magnetic_base: tuple = (20.0, 0.0, -40.0)  # uT
    n_bumps: tuple = (5, 20)
    bump_amplitude: tuple = (5.0, 15.0)
    bump_width: tuple = (1.0, 2.0)
    # pairs (source, target) of regions whose features are copied by translation
    clone_regions: tuple = ()

    def __post_init__(self):
        if self.feature_count < 0:
            raise ValueError("feature_count must be non-negative")
        if self.layout not in ("grid", "two-rooms", "loop"):
            raise ValueError(f"unknown layout {self.layout!r}")


@dataclass(eq=False)
class WorldSpec:
    params: WorldParams
    seed: int
    layout: Layout
    depth: DepthModel
    access_points: list
    bump_centers: np.ndarray  # (B, 3)
    bump_vectors: np.ndarray  # (B, 3) peak field perturbation, uT
    bump_widths: np.ndarray  # (B,)
    feature_ids: np.ndarray
    feature_positions: np.ndarray
    feature_descriptors: np.ndarray
    feature_regions: np.ndarray
    feature_normals: np.ndarray = field(default=None)

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.layout.extent[0], self.layout.extent[1], self.params.height])

    @property
    def regions(self) -> tuple:
        return self.layout.regions

    def region_of(self, points) -> np.ndarray:
        """Region index per point, -1 inside walls or door openings."""
        p = np.atleast_2d(np.asarray(points, float))
        out = np.full(p.shape[0], -1, dtype=np.int64)
        for r in self.layout.regions:
            out[(out < 0) & r.contains(p)] = r.index
        return out

    def is_free(self, points) -> np.ndarray:
        return ~self.depth.is_occupied(points)

    def magnetic_field(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        base = np.asarray(self.params.magnetic_base, float)
        if self.bump_centers.size == 0:
            return np.broadcast_to(base, p.shape).copy()
        d2 = np.sum((p[:, None, :] - self.bump_centers[None]) ** 2, axis=2)
        g = np.exp(-d2 / (2 * self.bump_widths[None] ** 2))
        return base + g @ self.bump_vectors

    def rssi_mean(self, points) -> np.ndarray:
        """(n, n_aps) noiseless RSS in dBm: log-distance path loss plus wall loss."""
        p = np.atleast_2d(np.asarray(points, float))
        out = np.zeros((p.shape[0], len(self.access_points)))
        for k, ap in enumerate(self.access_points):
            d = np.maximum(np.linalg.norm(p - ap.position, axis=1), 0.1)
            walls = trace_segments(self.depth, np.broadcast_to(ap.position, p.shape), p,
                                   exclude_end_voxel=False, count=True)
            out[:, k] = ap.tx_power - 10 * ap.gamma * np.log10(d) - self.params.wall_loss * walls
        return out


# ---------------------------------------------------------------- layouts


def grid_layout(nx: int, ny: int, room: float, door: float) -> Layout:
    regions, doors = [], []
    ext = (nx * room + (nx + 1) * WALL, ny * room + (ny + 1) * WALL)

    def lo(i, j):
        return (WALL + i * (room + WALL), WALL + j * (room + WALL))

    for j in range(ny):
        for i in range(nx):
            x0, y0 = lo(i, j)
            regions.append(Region(j * nx + i, f"room-{i}-{j}", (x0, y0), (x0 + room, y0 + room)))
    for j in range(ny):
        for i in range(nx):
            x0, y0 = lo(i, j)
            a = j * nx + i
            if i + 1 < nx:
                cy = y0 + room / 2
                doors.append(Door((x0 + room, cy - door / 2), (x0 + room + WALL, cy + door / 2), (a, a + 1)))
            if j + 1 < ny:
                cx = x0 + room / 2
                doors.append(Door((cx - door / 2, y0 + room), (cx + door / 2, y0 + room + WALL), (a, a + nx)))
    return Layout(ext, tuple(regions), tuple(doors))


def two_rooms_layout(room: float, corridor: float, door: float) -> Layout:
    """A corridor along the bottom with two identical rooms above it."""
    W = 2 * room + 3 * WALL
    H = corridor + room + 3 * WALL
    cor = Region(0, "corridor", (WALL, WALL), (W - WALL, WALL + corridor))
    y0 = 2 * WALL + corridor
    a = Region(1, "room-A", (WALL, y0), (WALL + room, y0 + room))
    b = Region(2, "room-B", (2 * WALL + room, y0), (2 * WALL + 2 * room, y0 + room))
    doors = []
    for r in (a, b):
        # same relative spot in both rooms so the clones stay exact
        cx = r.lo[0] + room * 0.3
        doors.append(Door((cx - door / 2, WALL + corridor), (cx + door / 2, y0), (0, r.index)))
    return Layout((W, H), (cor, a, b), tuple(doors))


def loop_layout(size: tuple, corridor: float) -> Layout:
    """Rectangular ring of four corridors around a solid core."""
    W, H = size
    c = corridor
    regions = (
        Region(0, "south", (WALL, WALL), (W - WALL, WALL + c)),
        Region(1, "east", (W - WALL - c, WALL + c), (W - WALL, H - WALL - c)),
        Region(2, "north", (WALL, H - WALL - c), (W - WALL, H - WALL)),
        Region(3, "west", (WALL, WALL + c), (WALL + c, H - WALL - c)),
    )
    return Layout((W, H), regions, ())


def build_layout(params: WorldParams) -> Layout:
    if params.layout == "grid":
        return grid_layout(params.rooms_x, params.rooms_y, params.room_size, params.door_width)
    if params.layout == "two-rooms":
        return two_rooms_layout(params.room_size, params.corridor_width, params.door_width)
    return loop_layout(params.loop_size, params.corridor_width)


def carve(layout: Layout, height: float) -> DepthModel:
    ext = (layout.extent[0], layout.extent[1], height)
    depth = DepthModel.empty((0.0, 0.0, 0.0), ext, VOXEL)
    depth.occupied[:] = True
    for r in layout.regions:
        depth.fill_box((*r.lo, -1.0), (*r.hi, height + 1.0), value=False)
    for d in layout.doors:
        depth.fill_box((*d.lo, -1.0), (*d.hi, height + 1.0), value=False)
    return depth


# ---------------------------------------------------------------- content


_FACES = (  # (axis, side): the wall face at lo (side 0) or hi (side 1) of the region
    (0, 0), (0, 1), (1, 0), (1, 1),
)


def sample_wall_points(region: Region, depth: DepthModel, n: int, rng, height: float,
                       z_range=(0.2, 2.8), offset: float = FEATURE_OFFSET, max_rounds: int = 200):
    """``n`` points on the region's wall faces, skipping door openings and open sides.

    Returns (points, inward normals).
    """
    size = region.size
    lengths = np.array([size[1], size[1], size[0], size[0]])
    prob = lengths / lengths.sum()
    pts, nrm = [], []
    got = 0
    for _ in range(max_rounds):
        if got >= n:
            break
        m = 2 * (n - got) + 8
        face = rng.choice(4, size=m, p=prob)
        u = rng.random(m)
        z = rng.uniform(z_range[0], min(z_range[1], height - 0.2), m)
        axis = np.array([_FACES[f][0] for f in face])
        side = np.array([_FACES[f][1] for f in face])
        p = np.zeros((m, 3))
        lo, hi = np.asarray(region.lo, float), np.asarray(region.hi, float)
        other = 1 - axis
        wall_coord = np.where(side == 0, lo[axis], hi[axis])
        inward = np.where(side == 0, 1.0, -1.0)
        along = lo[other] + u * (hi[other] - lo[other])
        p[np.arange(m), axis] = wall_coord + inward * offset
        p[np.arange(m), other] = along
        p[:, 2] = z
        behind = p.copy()
        behind[np.arange(m), axis] = wall_coord - inward * (VOXEL / 2)
        ok = depth.is_occupied(behind) & ~depth.is_occupied(p)
        # keep clear of corners so the face voxel really is a wall
        ok &= (along - lo[other] > 0.05) & (hi[other] - along > 0.05)
        n_vec = np.zeros((m, 3))
        n_vec[np.arange(m), axis] = inward
        take = np.flatnonzero(ok)[: n - got]
        pts.append(p[take])
        nrm.append(n_vec[take])
        got += take.size
    if got < n:
        raise RuntimeError(f"could not place {n} features in region {region.name}")
    return np.vstack(pts), np.vstack(nrm)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _split_counts(total: int, weights: np.ndarray) -> np.ndarray:
    raw = total * weights / weights.sum()
    c = np.floor(raw).astype(int)
    rem = total - c.sum()
    order = np.argsort(-(raw - c), kind="stable")
    c[order[:rem]] += 1
    return c


def generate_world(params: WorldParams = WorldParams(), seed: int = 0) -> WorldSpec:
    rng = np.random.default_rng(seed)
    layout = build_layout(params)
    depth = carve(layout, params.height)
    regions = layout.regions
    targets = {t for _, t in params.clone_regions}
    sources = {t: s for s, t in params.clone_regions}

    # features: split over non-clone regions by wall perimeter; clones copy their source
    perim = np.array([2 * r.size.sum() for r in regions])
    counts = np.zeros(len(regions), dtype=int)
    own = [r.index for r in regions if r.index not in targets]
    # a clone consumes the same count as its source
    w = perim[own].astype(float)
    for i, r in enumerate(own):
        w[i] *= 1 + sum(1 for s in sources.values() if s == r)
    split = _split_counts(params.feature_count, w)
    # give a clone source an even count it can share exactly with its copies
    for i, r in enumerate(own):
        copies = sum(1 for s in sources.values() if s == r)
        counts[r] = split[i] // (1 + copies)
        for t, s in sources.items():
            if s == r:
                counts[t] = counts[r]
    # any rounding remainder goes to the first region without clones
    deficit = params.feature_count - counts.sum()
    plain = [r for r in own if not any(s == r for s in sources.values())] or [own[0]]
    counts[plain[0]] += deficit

    pos = [None] * len(regions)
    nrm = [None] * len(regions)
    desc = [None] * len(regions)
    for r in regions:
        if r.index in targets:
            continue
        pos[r.index], nrm[r.index] = sample_wall_points(r, depth, counts[r.index], rng, params.height)
        desc[r.index] = _unit_rows(rng.standard_normal((counts[r.index], params.descriptor_dim)))
    for t, s in sources.items():
        shift = np.zeros(3)
        shift[:2] = np.asarray(regions[t].lo) - np.asarray(regions[s].lo)
        pos[t] = pos[s] + shift
        nrm[t] = nrm[s].copy()
        desc[t] = desc[s].copy()
    fpos = np.vstack([p for p in pos if p is not None and p.size] or [np.zeros((0, 3))])
    fnrm = np.vstack([p for p in nrm if p is not None and p.size] or [np.zeros((0, 3))])
    fdesc = np.vstack([d for d in desc if d is not None and d.size] or [np.zeros((0, params.descriptor_dim))])
    freg = np.concatenate([np.full(len(p), r, dtype=np.int64) for r, p in enumerate(pos) if p is not None])
    if fpos.size and depth.is_occupied(fpos).any():
        raise RuntimeError("feature placed inside an occupied voxel")

    # access points
    aps = []
    if params.ap_placement == "per-region":
        rooms = [r for r in regions if r.name.startswith("room")]
        for r in rooms:
            xy = np.asarray(r.lo) + r.size * np.array([0.7, 0.7])
            aps.append(AccessPoint(f"ap-{r.name}", np.array([xy[0], xy[1], 2.5]),
                                   params.tx_power, params.gamma, params.shadowing))
    else:
        picks = rng.choice(len(regions), size=min(params.n_access_points, len(regions)), replace=False)
        for k, ri in enumerate(sorted(int(i) for i in picks)):
            r = regions[ri]
            xy = np.asarray(r.lo) + 0.5 + rng.random(2) * (r.size - 1.0)
            aps.append(AccessPoint(f"ap-{k}", np.array([xy[0], xy[1], 2.5]),
                                   params.tx_power, params.gamma, params.shadowing))

    # magnetic distortions anchored to walls
    nb = int(rng.integers(params.n_bumps[0], params.n_bumps[1] + 1))
    owner = rng.choice(len(regions), size=nb, p=perim / perim.sum())
    centers = np.zeros((nb, 3))
    for b in range(nb):
        c, _ = sample_wall_points(regions[owner[b]], depth, 1, rng, params.height, z_range=(1.0, 2.0), offset=0.0)
        centers[b] = c[0]
    amp = rng.uniform(*params.bump_amplitude, nb)
    vec = _unit_rows(rng.standard_normal((nb, 3))) * amp[:, None] if nb else np.zeros((0, 3))
    # mostly vertical distortions: they move the magnitude, not the compass heading
    vec[:, :2] *= 0.3
    widths = rng.uniform(*params.bump_width, nb)

    return WorldSpec(
        params=params,
        seed=seed,
        layout=layout,
        depth=depth,
        access_points=aps,
        bump_centers=centers,
        bump_vectors=vec,
        bump_widths=widths,
        feature_ids=np.arange(fpos.shape[0], dtype=np.int64),
        feature_positions=fpos,
        feature_descriptors=fdesc,
        feature_regions=freg,
        feature_normals=fnrm,
    )


def free_path(world: WorldSpec, points: Sequence, height: float = 1.6) -> bool:
    """True when consecutive waypoints are joined by unobstructed segments."""
    p = np.asarray(points, float)
    if p.shape[1] == 2:
        p = np.column_stack([p, np.full(len(p), height)])
    if not np.all(world.is_free(p)):
        return False
    if len(p) < 2:
        return True
    return not np.any(trace_segments(world.depth, p[:-1], p[1:], exclude_end_voxel=False))


def door_between(world: WorldSpec, a: int, b: int) -> Optional[Door]:
    for d in world.layout.doors:
        if set(d.regions) == {a, b}:
            return d
    return None
