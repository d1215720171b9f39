"""Pedestrian dead reckoning from a body-mounted IMU.

IMU rows are (t, ax, ay, az, gx, gy, gz, mx, my, mz); az is gravity-removed
vertical acceleration, gz is the yaw rate and the magnetometer is in the
body frame, so the magnetic heading is atan2(-my, mx).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .geometry import wrap_angle


@dataclass(frozen=True, eq=False)
class ImuSample:
    t: float
    acc: np.ndarray
    gyro: np.ndarray
    mag: np.ndarray

    def row(self) -> np.ndarray:
        return np.concatenate([[self.t], self.acc, self.gyro, self.mag])


@dataclass
class PdrConfig:
    alpha: float = 0.3  # m per Hz
    b: float = 0.25  # m
    peak_threshold: float = 1.0  # m/s^2
    min_step_interval: float = 0.3  # s
    nominal_cadence: float = 1.8  # Hz, used for the first step
    heading_gain: float = 0.5  # kappa, 1/s

    def __post_init__(self):
        if self.alpha < 0 or self.b <= 0:
            raise ValueError("step model requires alpha >= 0 and b > 0")
        if self.nominal_cadence <= 0:
            raise ValueError("nominal cadence must be positive")


@dataclass(frozen=True)
class StepEvent:
    timestamp: float
    frequency: float
    length: float
    heading: float


@dataclass(frozen=True)
class PdrDelta:
    dx: float
    dy: float
    dtheta: float
    timestamp: float = 0.0
    length: float = 0.0
    heading: float = 0.0


ImuInput = Union[np.ndarray, Sequence[ImuSample]]


def as_imu_array(samples: ImuInput) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        a = np.asarray(samples, dtype=float)
        return a.reshape(-1, 10) if a.size else np.zeros((0, 10))
    rows = [s.row() for s in samples]
    return np.array(rows, dtype=float).reshape(-1, 10)


def detect_steps(samples: ImuInput, cfg: PdrConfig = PdrConfig()) -> np.ndarray:
    """Timestamps of z-acceleration peaks above threshold with a refractory gap."""
    imu = as_imu_array(samples)
    if imu.shape[0] < 3:
        return np.zeros(0)
    t, az = imu[:, 0], imu[:, 3]
    # rising into the sample, not rising out of it (plateaus count once)
    peak = (az[1:-1] > az[:-2]) & (az[1:-1] >= az[2:]) & (az[1:-1] > cfg.peak_threshold)
    cand = np.flatnonzero(peak) + 1
    steps = []
    last = -np.inf
    for i in cand:
        if t[i] - last >= cfg.min_step_interval:
            steps.append(t[i])
            last = t[i]
    return np.array(steps)


def step_length(f, cfg: PdrConfig = PdrConfig()):
    return cfg.alpha * f + cfg.b


def magnetic_heading(mag: np.ndarray) -> np.ndarray:
    mag = np.atleast_2d(mag)
    return np.arctan2(-mag[:, 1], mag[:, 0])


class HeadingTracker:
    """Complementary filter: integrate gyro yaw rate, pull toward magnetic yaw."""

    def __init__(self, gain: float = PdrConfig.heading_gain):
        self.gain = gain
        self.theta = None
        self.t = None

    def update(self, t: float, gz: float, mag) -> float:
        m = float(magnetic_heading(np.asarray(mag, float))[0])
        if self.theta is None:
            self.theta = m
        else:
            dt = t - self.t
            th = self.theta + gz * dt
            th += self.gain * dt * wrap_angle(m - th)
            self.theta = wrap_angle(th)
        self.t = t
        return self.theta


def heading_series(samples: ImuInput, cfg: PdrConfig = PdrConfig()) -> np.ndarray:
    imu = as_imu_array(samples)
    tr = HeadingTracker(cfg.heading_gain)
    return np.array([tr.update(r[0], r[6], r[7:10]) for r in imu])


def heading(samples: ImuInput, cfg: PdrConfig = PdrConfig()) -> float:
    """Heading after the last sample, wrapped to (-pi, pi]."""
    imu = as_imu_array(samples)
    if imu.shape[0] == 0:
        raise ValueError("heading needs at least one sample")
    return float(heading_series(imu, cfg)[-1])


def step_events(samples: ImuInput, cfg: PdrConfig = PdrConfig()) -> list[StepEvent]:
    imu = as_imu_array(samples)
    steps = detect_steps(imu, cfg)
    if steps.size == 0:
        return []
    hs = heading_series(imu, cfg)
    idx = np.searchsorted(imu[:, 0], steps)
    out = []
    prev = None
    for ts, i in zip(steps, idx):
        f = cfg.nominal_cadence if prev is None else 1.0 / (ts - prev)
        out.append(StepEvent(float(ts), float(f), float(step_length(f, cfg)), float(hs[i])))
        prev = ts
    return out


def pdr_deltas(samples: ImuInput, cfg: PdrConfig = PdrConfig()) -> list[PdrDelta]:
    """One planar displacement per detected step, in the heading (world) frame."""
    imu = as_imu_array(samples)
    events = step_events(imu, cfg)
    if not events:
        return []
    h0 = float(heading_series(imu[:1], cfg)[0])
    out = []
    prev_h = h0
    for ev in events:
        out.append(
            PdrDelta(
                ev.length * np.cos(ev.heading),
                ev.length * np.sin(ev.heading),
                float(wrap_angle(ev.heading - prev_h)),
                ev.timestamp,
                ev.length,
                ev.heading,
            )
        )
        prev_h = ev.heading
    return out


def split_deltas(deltas: Sequence[PdrDelta], frame_times: np.ndarray) -> list[list[PdrDelta]]:
    """Assign each delta to the first frame at or after its timestamp."""
    frame_times = np.asarray(frame_times, dtype=float)
    buckets: list[list[PdrDelta]] = [[] for _ in frame_times]
    for d in deltas:
        k = int(np.searchsorted(frame_times, d.timestamp, side="left"))
        if k < len(buckets):
            buckets[k].append(d)
    return buckets
