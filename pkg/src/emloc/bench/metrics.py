"""Per-frame records and the efficiency / accuracy / time metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError
from ..geometry import Pose6D, geodesic_angle


@dataclass
class FrameRecord:
    policy: str
    k: int
    run: int
    frame: int
    attempted: bool
    success: bool
    nodes_tried: int
    matching_cost: int
    map_node: int
    n_eff: float
    true_node: int = -1
    map_room: int = -1
    true_room: int = -1
    t_err: float = float("nan")
    r_err: float = float("nan")
    # wall-clock, kept out of the deterministic tables
    loc_time: float = 0.0
    timing: dict = field(default_factory=dict)


@dataclass
class Metrics:
    frames: int
    attempts: int
    successes: int
    efficiency: float
    translation_errors: np.ndarray
    orientation_errors: np.ndarray
    localization_times: np.ndarray
    matching_cost: int
    room_accuracy: Optional[float] = None

    @property
    def cost_per_attempt(self) -> float:
        return self.matching_cost / self.attempts if self.attempts else 0.0

    def summary(self) -> dict:
        def stats(x):
            if x.size == 0:
                return {"n": 0, "median": None, "p90": None}
            return {"n": int(x.size), "median": float(np.median(x)), "p90": float(np.percentile(x, 90))}

        return {
            "frames": self.frames,
            "attempts": self.attempts,
            "successes": self.successes,
            "efficiency": self.efficiency,
            "matching_cost": self.matching_cost,
            "cost_per_attempt": self.cost_per_attempt,
            "translation_error": stats(self.translation_errors),
            "orientation_error": stats(self.orientation_errors),
            "room_accuracy": self.room_accuracy,
        }


def pose_errors(est: Pose6D, gt: Pose6D) -> tuple[float, float]:
    """Translation distance and geodesic angle of R_gt^-1 R_est."""
    return float(np.linalg.norm(est.translation - gt.translation)), geodesic_angle(gt.R, est.R)


def compute_metrics(records: Sequence, truth=None, estimates: Optional[Sequence] = None,
                    burn_in: int = 0) -> Metrics:
    """Aggregate frame records.

    ``records`` are FrameRecords, or LocalizerOutputs together with the
    query ``truth`` (GroundTruth); outputs must be aligned with truth frames.
    """
    recs = list(records)
    if recs and not isinstance(recs[0], FrameRecord):
        if truth is None:
            raise DataError("raw localizer outputs need ground truth to be scored")
        recs = records_from_outputs(recs, truth, "EMLOC", 1, 0, None)
    elif truth is not None and len(recs) and max(r.frame for r in recs) >= len(truth):
        raise DataError("records refer to frames beyond the ground truth")
    attempts = sum(1 for r in recs if r.attempted)
    succ = [r for r in recs if r.success]
    t = np.sort(np.array([r.t_err for r in succ if np.isfinite(r.t_err)]))
    o = np.sort(np.array([r.r_err for r in succ if np.isfinite(r.r_err)]))
    lt = np.array([r.loc_time for r in recs if r.attempted])
    rooms = [r for r in recs if r.frame >= burn_in and r.true_room >= 0]
    room_acc = float(np.mean([r.map_room == r.true_room for r in rooms])) if rooms else None
    return Metrics(
        frames=len(recs),
        attempts=attempts,
        successes=len(succ),
        efficiency=len(succ) / attempts if attempts else 0.0,
        translation_errors=t,
        orientation_errors=o,
        localization_times=lt,
        matching_cost=int(sum(r.matching_cost for r in recs)),
        room_accuracy=room_acc,
    )


def records_from_outputs(outputs: Sequence, truth, policy: str, k: int, run: int,
                         node_rooms: Optional[np.ndarray]) -> list:
    if len(outputs) != len(truth):
        raise DataError(f"{len(outputs)} outputs for {len(truth)} ground-truth frames")
    out = []
    for i, (o, gt) in enumerate(zip(outputs, truth.poses)):
        if o.frame_index != i:
            raise DataError(f"output {i} carries frame index {o.frame_index}")
        te, re = (pose_errors(o.pnp_pose, gt) if o.success and o.pnp_pose is not None
                  else (float("nan"), float("nan")))
        out.append(FrameRecord(
            policy=policy, k=k, run=run, frame=i,
            attempted=o.pnp_attempted, success=o.success,
            nodes_tried=len(o.attempted_nodes), matching_cost=o.matching_cost,
            map_node=o.map_node, n_eff=o.n_eff,
            true_node=-1 if truth.nodes is None else int(truth.nodes[i]),
            map_room=-1 if node_rooms is None else int(node_rooms[o.map_node]),
            true_room=-1 if truth.rooms is None else int(truth.rooms[i]),
            t_err=te, r_err=re,
            loc_time=o.timing.get("matching", 0.0) + o.timing.get("ransac", 0.0),
            timing=dict(o.timing),
        ))
    return out


def record_row(r: FrameRecord) -> dict:
    d = asdict(r)
    d.pop("timing")
    d.pop("loc_time")
    return d
