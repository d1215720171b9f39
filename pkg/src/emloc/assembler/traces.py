"""Recorded multi-modal traces: the assembler's input and the localizer's query stream."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DataError, SchemaVersionError
from ..geometry import Pose6D
from ..sidechannel import SideChannelFingerprint
from ..vision import ObservationSet
from .visibility import DepthModel

TRACE_SCHEMA = "emloc.trace"
TRACE_SCHEMA_VERSION = 1
TRUTH_SCHEMA = "emloc.groundtruth"


@dataclass(eq=False)
class TraceFrame:
    timestamp: float
    odometry: Pose6D  # motion since the previous frame (identity for the first)
    fingerprint: SideChannelFingerprint
    # mapped features seen in this frame, positions in the body frame
    landmark_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    observations: Optional[ObservationSet] = None  # camera detections (query traces)

    def __post_init__(self):
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        d = np.asarray(self.descriptors, dtype=float)
        if d.ndim != 2:
            d = d.reshape(self.landmark_ids.size, -1) if self.landmark_ids.size else np.zeros((0, 0))
        self.descriptors = d
        if self.positions.shape[0] != self.landmark_ids.size or self.descriptors.shape[0] != self.landmark_ids.size:
            raise DataError("landmark ids, positions and descriptors must align")

    def to_dict(self) -> dict:
        return {
            "t": self.timestamp,
            "odometry": self.odometry.to_dict(),
            "fingerprint": self.fingerprint.to_dict(),
            "landmark_ids": self.landmark_ids.tolist(),
            "positions": self.positions.tolist(),
            "descriptors": self.descriptors.tolist(),
            "observations": None if self.observations is None else self.observations.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceFrame":
        ids = np.array(d["landmark_ids"], dtype=np.int64)
        return cls(
            float(d["t"]),
            Pose6D.from_dict(d["odometry"]),
            SideChannelFingerprint.from_dict(d["fingerprint"]),
            ids,
            np.array(d["positions"], dtype=float).reshape(-1, 3),
            np.array(d["descriptors"], dtype=float).reshape(ids.size, -1) if ids.size else np.zeros((0, 0)),
            None if d["observations"] is None else ObservationSet.from_dict(d["observations"]),
        )


@dataclass(eq=False)
class DataTrace:
    trace_id: str
    frames: list
    imu: Optional[np.ndarray] = None  # (T, 10) rows (t, acc, gyro, mag)
    depth: Optional[DepthModel] = None

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def validate(self) -> None:
        ts = self.timestamps
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise DataError(f"trace {self.trace_id}: timestamps must be strictly increasing")
        if self.imu is not None:
            self.imu = np.asarray(self.imu, dtype=float).reshape(-1, 10)
            if self.imu.shape[0] > 1 and np.any(np.diff(self.imu[:, 0]) <= 0):
                raise DataError(f"trace {self.trace_id}: IMU timestamps must be strictly increasing")

    def cumulative_poses(self, start: Pose6D = Pose6D.identity()) -> list:
        poses = []
        p = start
        for k, f in enumerate(self.frames):
            p = p if k == 0 else p @ f.odometry
            poses.append(p)
        return poses

    def to_dict(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "schema_version": TRACE_SCHEMA_VERSION,
            "trace_id": self.trace_id,
            "frames": [f.to_dict() for f in self.frames],
            "imu": None if self.imu is None else self.imu.tolist(),
            "depth": None if self.depth is None else self.depth.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataTrace":
        if d.get("schema") != TRACE_SCHEMA:
            raise DataError("not a trace file")
        if d.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise SchemaVersionError(f"trace schema version {d.get('schema_version')} unsupported")
        return cls(
            d["trace_id"],
            [TraceFrame.from_dict(f) for f in d["frames"]],
            None if d["imu"] is None else np.array(d["imu"], dtype=float).reshape(-1, 10),
            None if d["depth"] is None else DepthModel.from_dict(d["depth"]),
        )


@dataclass(eq=False)
class GroundTruth:
    poses: list  # true body pose per frame (world frame)
    nodes: Optional[list] = None  # true nearest graph node per frame
    rooms: Optional[list] = None  # room label per frame, when the world has rooms

    def __post_init__(self):
        for name in ("nodes", "rooms"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.poses):
                raise DataError(f"ground truth {name} must have one entry per frame")

    def __len__(self) -> int:
        return len(self.poses)

    def to_dict(self) -> dict:
        return {
            "schema": TRUTH_SCHEMA,
            "schema_version": TRACE_SCHEMA_VERSION,
            "poses": [p.to_dict() for p in self.poses],
            "nodes": None if self.nodes is None else [int(n) for n in self.nodes],
            "rooms": None if self.rooms is None else [int(r) for r in self.rooms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        if d.get("schema") != TRUTH_SCHEMA:
            raise DataError("not a ground-truth file")
        if d.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise SchemaVersionError("ground-truth schema version unsupported")
        return cls([Pose6D.from_dict(p) for p in d["poses"]], d.get("nodes"), d.get("rooms"))


def _dump(obj: dict, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh)
    os.replace(tmp, path)


def _load(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc


def save_trace(trace: DataTrace, path) -> None:
    _dump(trace.to_dict(), path)


def load_trace(path) -> DataTrace:
    return DataTrace.from_dict(_load(path))


def save_ground_truth(gt: GroundTruth, path) -> None:
    _dump(gt.to_dict(), path)


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(_load(path))
