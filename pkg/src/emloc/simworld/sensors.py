"""Walk a body through a world and record everything its sensors would see."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..assembler.traces import DataTrace, GroundTruth, TraceFrame
from ..assembler.visibility import trace_segments
from ..errors import TrajectoryError
from ..geometry import Pose6D, so3_exp, wrap_angle
from ..odometry import PdrConfig, step_length
from ..sidechannel import MagneticSequence, RssiDistribution, SideChannelFingerprint
from ..vision import BODY_FROM_CAMERA, CameraIntrinsics, ObservationSet, project_points
from .world import WorldSpec

BODY_HEIGHT = 1.6


@dataclass
class TrajectorySpec:
    waypoints: np.ndarray  # (n, 2) planar path; a single point stands still
    cadence: float = 1.8  # Hz
    speed: Optional[float] = None  # m/s, defaults to cadence x modelled step length
    imu_hz: float = 50.0
    fingerprint_window: float = 2.0  # s
    wifi_hz: float = 10.0
    mag_hz: float = 10.0
    camera_hz: float = 1.0
    turn_rate: float = np.pi / 2  # rad/s, turns happen on the spot
    pause: float = 2.0  # standing time before walking (fills the first window)
    duration: Optional[float] = None  # total length; pads the end by standing
    initial_yaw: Optional[float] = None
    height: float = BODY_HEIGHT

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))[:, :2]
        if self.waypoints.shape[0] == 0:
            raise TrajectoryError("trajectory needs at least one waypoint")
        for name in ("cadence", "imu_hz", "wifi_hz", "mag_hz", "camera_hz", "turn_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def walking_speed(self) -> float:
        return self.speed if self.speed is not None else self.cadence * float(step_length(self.cadence, PdrConfig()))


@dataclass
class SensorConfig:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    record: str = "query"  # query: camera detections; mapping: body-frame landmarks
    camera_range: float = 10.0
    pixel_sigma: float = 0.5
    descriptor_sigma: float = 0.02  # per dimension, before renormalising
    outlier_rate: float = 0.2  # false detections per true detection
    depth_sigma: float = 0.01  # m, mapping landmark positions
    odometry_sigma_t: float = 0.02  # m per m travelled
    odometry_sigma_yaw: float = 0.01  # rad per rad turned
    odometry_floor: float = 0.002  # per frame, every axis
    gait_amplitude: float = 2.5  # m/s^2
    acc_sigma: float = 0.05
    gyro_sigma: float = 0.005
    gyro_bias: float = 0.002
    mag_sigma: float = 0.5  # uT, vector magnetometer
    magnitude_sigma: float = 0.3  # uT, magnitude sequence used as fingerprint
    detection_floor: float = -100.0  # dBm
    min_detection: float = 0.5  # fraction of scans an AP must appear in
    include_depth: bool = False


class _Timeline:
    """Piecewise body motion: stand, turn on the spot, walk straight."""

    def __init__(self, traj: TrajectorySpec):
        w = traj.waypoints
        v = traj.walking_speed
        legs = np.diff(w, axis=0)
        yaw = traj.initial_yaw
        if yaw is None:
            moving = [l for l in legs if np.linalg.norm(l) > 1e-9]
            yaw = float(np.arctan2(moving[0][1], moving[0][0])) if moving else 0.0
        segs = []  # (t0, t1, p0, p1, yaw0, yaw1, walking)
        t = 0.0
        p = w[0]
        if traj.pause > 0:
            segs.append((t, t + traj.pause, p, p, yaw, yaw, False))
            t += traj.pause
        for leg in legs:
            L = float(np.linalg.norm(leg))
            if L < 1e-9:
                continue
            h = float(np.arctan2(leg[1], leg[0]))
            dy = float(wrap_angle(h - yaw))
            if abs(dy) > 1e-9:
                dt = abs(dy) / traj.turn_rate
                segs.append((t, t + dt, p, p, yaw, yaw + dy, False))
                t += dt
                yaw = yaw + dy
            dt = L / v
            segs.append((t, t + dt, p, p + leg, yaw, yaw, True))
            t += dt
            p = p + leg
        end = max(t, traj.duration or 0.0)
        if end > t or not segs:
            segs.append((t, max(end, t + 1e-6), p, p, yaw, yaw, False))
            t = max(end, t + 1e-6)
        self.end = t
        self.t0 = np.array([s[0] for s in segs])
        self.t1 = np.array([s[1] for s in segs])
        self.p0 = np.array([s[2] for s in segs])
        self.p1 = np.array([s[3] for s in segs])
        self.y0 = np.array([s[4] for s in segs])
        self.y1 = np.array([s[5] for s in segs])
        self.walking = np.array([s[6] for s in segs])
        dur = self.t1 - self.t0
        self.walk_before = np.concatenate([[0.0], np.cumsum(np.where(self.walking, dur, 0.0))[:-1]])
        self.height = traj.height

    def state(self, t):
        """Positions (n, 3), yaw, yaw rate, walking flag and cumulative walking time."""
        t = np.atleast_1d(np.asarray(t, float))
        k = np.clip(np.searchsorted(self.t0, t, side="right") - 1, 0, self.t0.size - 1)
        dur = self.t1[k] - self.t0[k]
        a = np.clip((t - self.t0[k]) / dur, 0.0, 1.0)
        xy = self.p0[k] + a[:, None] * (self.p1[k] - self.p0[k])
        yaw = self.y0[k] + a * (self.y1[k] - self.y0[k])
        rate = np.where(t < self.t1[k], (self.y1[k] - self.y0[k]) / dur, 0.0)
        walking = self.walking[k] & (t < self.t1[k])
        walked = self.walk_before[k] + np.where(self.walking[k], np.clip(t - self.t0[k], 0, dur), 0.0)
        pos = np.column_stack([xy, np.full(t.size, self.height)])
        return pos, wrap_angle(yaw), rate, walking, walked


def _grid(rate: float, start: float, end: float) -> np.ndarray:
    k0 = int(np.ceil(start * rate - 1e-9))
    k1 = int(np.floor(end * rate + 1e-9))
    return np.arange(k0, k1 + 1) / rate


def _body_poses(pos: np.ndarray, yaw: np.ndarray) -> list:
    return [Pose6D.from_euler(p, float(y)) for p, y in zip(pos, yaw)]


def check_free(world: WorldSpec, traj: TrajectorySpec) -> None:
    p = np.column_stack([traj.waypoints, np.full(len(traj.waypoints), traj.height)])
    if not np.all(world.is_free(p)):
        raise TrajectoryError("waypoint inside an occupied voxel")
    if len(p) > 1 and np.any(trace_segments(world.depth, p[:-1], p[1:], exclude_end_voxel=False)):
        raise TrajectoryError("trajectory passes through a wall")


def visible_features(world: WorldSpec, cam: Pose6D, K: CameraIntrinsics, max_range: float):
    """Indices of world features inside the image, within range and with a clear ray."""
    P = world.feature_positions
    if P.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    uv, front = project_points(cam, P, K)
    rng = np.linalg.norm(P - cam.translation, axis=1)
    ok = front & (rng <= max_range)
    ok[ok] &= K.in_image(uv[ok])
    # features face into their room: skip ones seen from behind the wall plane
    if world.feature_normals is not None:
        ok &= np.einsum("ij,ij->i", cam.translation - P, world.feature_normals) > 0
    idx = np.flatnonzero(ok)
    if idx.size:
        blocked = trace_segments(world.depth, np.broadcast_to(cam.translation, (idx.size, 3)), P[idx])
        idx = idx[~blocked]
    return idx, uv[idx]


def _noisy_unit(d: np.ndarray, sigma: float, rng) -> np.ndarray:
    x = d + sigma * rng.standard_normal(d.shape)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def simulate_trace(
    world: WorldSpec,
    traj: TrajectorySpec,
    seed: int = 0,
    sensors: SensorConfig = SensorConfig(),
    trace_id: str = "trace",
) -> tuple[DataTrace, GroundTruth]:
    check_free(world, traj)
    rng = np.random.default_rng(seed)
    tl = _Timeline(traj)
    K = sensors.intrinsics
    aps = world.access_points

    # camera frames start once the first fingerprint window is full
    first = min(traj.fingerprint_window, tl.end)
    t_frames = _grid(traj.camera_hz, first, tl.end)
    if t_frames.size == 0:
        t_frames = np.array([tl.end])
    pos_f, yaw_f, _, _, _ = tl.state(t_frames)
    poses = _body_poses(pos_f, yaw_f)

    # IMU
    t_imu = _grid(traj.imu_hz, 0.0, tl.end)
    pos_i, yaw_i, rate_i, walk_i, walked_i = tl.state(t_imu)
    n = t_imu.size
    az = np.where(walk_i, sensors.gait_amplitude * np.sin(2 * np.pi * traj.cadence * walked_i), 0.0)
    acc = sensors.acc_sigma * rng.standard_normal((n, 3))
    acc[:, 2] += az
    gyro = sensors.gyro_sigma * rng.standard_normal((n, 3))
    gyro[:, 2] += rate_i + sensors.gyro_bias
    B = world.magnetic_field(pos_i)
    c, s = np.cos(yaw_i), np.sin(yaw_i)
    mag = np.column_stack([c * B[:, 0] + s * B[:, 1], -s * B[:, 0] + c * B[:, 1], B[:, 2]])
    mag += sensors.mag_sigma * rng.standard_normal((n, 3))
    imu = np.column_stack([t_imu, acc, gyro, mag])

    # side channels sampled on fixed grids, windowed per frame
    t_wifi = _grid(traj.wifi_hz, 0.0, tl.end)
    rss = np.zeros((t_wifi.size, len(aps)))
    if aps and t_wifi.size:
        rss = world.rssi_mean(tl.state(t_wifi)[0])
        shadow = np.array([ap.shadowing for ap in aps])
        rss = np.round(rss + shadow * rng.standard_normal(rss.shape))
    t_mag = _grid(traj.mag_hz, 0.0, tl.end)
    magn = np.linalg.norm(world.magnetic_field(tl.state(t_mag)[0]), axis=1)
    magn = np.abs(magn + sensors.magnitude_sigma * rng.standard_normal(magn.shape))

    frames = []
    prev = None
    for k, (tf, pose) in enumerate(zip(t_frames, poses)):
        w0 = tf - traj.fingerprint_window
        sel = (t_wifi > w0 + 1e-9) & (t_wifi <= tf + 1e-9)
        wifi = {}
        for a, ap in enumerate(aps):
            x = rss[sel, a]
            det = x[x >= sensors.detection_floor]
            if x.size and det.size >= sensors.min_detection * x.size and det.size > 0:
                wifi[ap.id] = RssiDistribution.from_samples(det)
        msel = (t_mag > w0 + 1e-9) & (t_mag <= tf + 1e-9)
        magseq = MagneticSequence(magn[msel]) if msel.any() else None
        fp = SideChannelFingerprint(wifi, magseq, None)

        if prev is None:
            odo = Pose6D.identity()
        else:
            odo = _noisy_odometry(prev.inverse() @ pose, sensors, rng)
        prev = pose

        cam = pose @ BODY_FROM_CAMERA
        if sensors.record == "mapping":
            idx, _ = visible_features(world, cam, K, sensors.camera_range)
            local = pose.inverse().transform(world.feature_positions[idx]) if idx.size else np.zeros((0, 3))
            local = local + sensors.depth_sigma * rng.standard_normal(local.shape)
            desc = _noisy_unit(world.feature_descriptors[idx], sensors.descriptor_sigma, rng) if idx.size \
                else np.zeros((0, world.params.descriptor_dim))
            frames.append(TraceFrame(float(tf), odo, fp, world.feature_ids[idx], local, desc, None))
        else:
            idx, uv = visible_features(world, cam, K, sensors.camera_range)
            uv = uv + sensors.pixel_sigma * rng.standard_normal(uv.shape)
            desc = _noisy_unit(world.feature_descriptors[idx], sensors.descriptor_sigma, rng) if idx.size \
                else np.zeros((0, world.params.descriptor_dim))
            n_out = int(rng.binomial(max(idx.size, 1), sensors.outlier_rate)) if idx.size else 0
            ouv = rng.random((n_out, 2)) * np.array([K.width, K.height])
            odesc = _noisy_unit(rng.standard_normal((n_out, world.params.descriptor_dim)), 0.0, rng) \
                if n_out else np.zeros((0, world.params.descriptor_dim))
            all_uv = np.vstack([uv, ouv])
            all_d = np.vstack([desc, odesc])
            order = rng.permutation(all_uv.shape[0])
            obs = ObservationSet(all_uv[order], all_d[order]) if all_uv.shape[0] else \
                ObservationSet(np.zeros((0, 2)), np.zeros((0, world.params.descriptor_dim)))
            frames.append(TraceFrame(float(tf), odo, fp, observations=obs))

    trace = DataTrace(trace_id, frames, imu, world.depth if sensors.include_depth else None)
    rooms = world.region_of(pos_f).tolist()
    return trace, GroundTruth(poses, None, rooms)


def _noisy_odometry(rel: Pose6D, s: SensorConfig, rng) -> Pose6D:
    dist = float(np.linalg.norm(rel.translation))
    turn = float(abs(rel.euler[0]))
    if s.odometry_sigma_t == 0 and s.odometry_sigma_yaw == 0 and s.odometry_floor == 0:
        return rel
    st = s.odometry_sigma_t * dist + s.odometry_floor
    sr = s.odometry_sigma_yaw * turn + s.odometry_floor
    dt = st * rng.standard_normal(3)
    dw = np.array([0.1 * s.odometry_floor, 0.1 * s.odometry_floor, sr]) * rng.standard_normal(3)
    return Pose6D.from_matrix(rel.R @ so3_exp(dw), rel.translation + dt)


def integrate_odometry(trace: DataTrace, start: Pose6D) -> list:
    return trace.cumulative_poses(start)

