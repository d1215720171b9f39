"""Rigid-body poses and rotation helpers.

Rotations are unit quaternions stored as ``(w, x, y, z)``. Euler angles at
the interfaces follow the Z-Y-X intrinsic convention, i.e. ``(yaw, pitch,
roll)`` with ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    # canonical hemisphere keeps serialization and equality stable
    return -q if q[0] < 0 else q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return _normalize_quat(np.array([w, x, y, z]))


def euler_to_matrix(yaw, pitch, roll) -> np.ndarray:
    """Vectorized ZYX Euler to rotation matrix; scalar input gives (3, 3)."""
    yaw, pitch, roll = np.broadcast_arrays(
        np.asarray(yaw, float), np.asarray(pitch, float), np.asarray(roll, float)
    )
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(yaw.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Vectorized inverse of :func:`euler_to_matrix`; returns ``[..., 3]``."""
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(-R[..., 2, 0], -1.0, 1.0))
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return np.stack([yaw, pitch, roll], axis=-1)


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def wrap_angle(a):
    """Wrap to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return float(out) if out.ndim == 0 else out


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Rotation angle of ``Ra^T Rb`` in [0, pi]."""
    # rotation-vector norm stays accurate for tiny angles, unlike arccos of the trace
    return float(np.linalg.norm(so3_log(np.asarray(Ra).T @ np.asarray(Rb))))


@dataclass(frozen=True, eq=False)
class Pose6D:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        q = np.array(self.rotation, dtype=float).reshape(4)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            q = _normalize_quat(q)
        elif q[0] < 0:
            q = -q
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t=(0.0, 0.0, 0.0)) -> "Pose6D":
        return cls(np.asarray(t, float), matrix_to_quat(R))

    @classmethod
    def from_euler(cls, t, yaw: float, pitch: float = 0.0, roll: float = 0.0) -> "Pose6D":
        return cls.from_matrix(euler_to_matrix(yaw, pitch, roll), t)

    @classmethod
    def from_homogeneous(cls, T: np.ndarray) -> "Pose6D":
        return cls.from_matrix(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def euler(self) -> np.ndarray:
        """(yaw, pitch, roll) in radians."""
        return matrix_to_euler(self.R)

    def homogeneous(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose6D") -> "Pose6D":
        t = self.translation + self.R @ other.translation
        q = _normalize_quat(_quat_mul(self.rotation, other.rotation))
        return Pose6D(t, q)

    __matmul__ = compose

    def inverse(self) -> "Pose6D":
        w, x, y, z = self.rotation
        q_inv = np.array([w, -x, -y, -z])
        t = -(quat_to_matrix(q_inv) @ self.translation)
        return Pose6D(t, q_inv)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map points (N, 3) or (3,) from the local frame into the parent frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.translation

    def to_vector(self) -> np.ndarray:
        """(x, y, z, yaw, pitch, roll)."""
        return np.concatenate([self.translation, self.euler])

    @classmethod
    def from_vector(cls, v) -> "Pose6D":
        v = np.asarray(v, dtype=float)
        return cls.from_euler(v[:3], v[3], v[4], v[5])

    def almost_equal(self, other: "Pose6D", atol: float = 1e-9) -> bool:
        if not np.allclose(self.translation, other.translation, atol=atol, rtol=0):
            return False
        # q and -q encode the same rotation
        d = min(
            np.max(np.abs(self.rotation - other.rotation)),
            np.max(np.abs(self.rotation + other.rotation)),
        )
        return bool(d <= atol)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose6D):
            return NotImplemented
        return bool(
            np.array_equal(self.translation, other.translation)
            and np.array_equal(self.rotation, other.rotation)
        )

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.4g}" for v in self.translation)
        e = ", ".join(f"{v:.4g}" for v in self.euler)
        return f"Pose6D(t=[{t}], ypr=[{e}])"

    def to_dict(self) -> dict:
        return {"t": self.translation.tolist(), "q": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6D":
        # bypass renormalization so round-trips stay bit-exact
        p = cls.__new__(cls)
        t = np.array(d["t"], dtype=float)
        q = np.array(d["q"], dtype=float)
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(p, "translation", t)
        object.__setattr__(p, "rotation", q)
        return p
