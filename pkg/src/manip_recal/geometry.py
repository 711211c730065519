"""Unit-quaternion and pose helpers.

Quaternions are plain ``numpy`` arrays ordered ``[w, x, y, z]``. Most
functions broadcast over leading axes so the GP and calibration code can
work on whole batches of poses at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("zero-norm quaternion")
    return q / n


def canonical(q) -> np.ndarray:
    """Return the representative with ``w >= 0`` (normalized)."""
    q = normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def multiply(q1, q2) -> np.ndarray:
    """Hamilton product ``q1 * q2``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def geodesic_distance(q1, q2) -> np.ndarray | float:
    """Rotation angle between two unit quaternions, in ``[0, pi]``.

    ``2 * arccos(|<q1, q2>|)``; invariant to the sign of either argument.
    Evaluated as ``4 * atan2(|q1 - s q2|, |q1 + s q2|)`` with ``s`` the sign
    of the dot product, which keeps full precision near zero distance.
    """
    q1 = normalize(q1)
    q2 = normalize(q2)
    s = np.where(np.sum(q1 * q2, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    d = 4.0 * np.arctan2(np.linalg.norm(q1 - s * q2, axis=-1), np.linalg.norm(q1 + s * q2, axis=-1))
    return float(d) if np.ndim(d) == 0 else d


def align_sign(reference, candidate) -> np.ndarray:
    """Flip ``candidate`` onto the hemisphere of ``reference``.

    Component-wise quaternion differences are only meaningful after this.
    """
    reference = np.asarray(reference, dtype=float)
    candidate = np.asarray(candidate, dtype=float)
    dot = np.sum(reference * candidate, axis=-1, keepdims=True)
    return np.where(dot < 0.0, -candidate, candidate)


def same_rotation(q1, q2, atol: float = 1e-9) -> bool:
    return bool(np.all(geodesic_distance(q1, q2) <= atol))


def from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def from_matrix(m) -> np.ndarray:
    """Rotation matrix (or stack) to canonical quaternion(s)."""
    xyzw = Rotation.from_matrix(np.asarray(m, dtype=float)).as_quat()
    return canonical(np.roll(xyzw, 1, axis=-1))


def to_matrix(q) -> np.ndarray:
    q = normalize(q)
    return Rotation.from_quat(np.roll(q, -1, axis=-1)).as_matrix()


def rotation_vector(q) -> np.ndarray:
    """Axis-angle vector of the shortest rotation represented by ``q``."""
    q = canonical(q)
    return Rotation.from_quat(np.roll(q, -1, axis=-1)).as_rotvec()


def random_quat(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniformly distributed unit quaternions (canonical sign not applied)."""
    shape = (4,) if size is None else (size, 4)
    return normalize(rng.standard_normal(shape))


@dataclass(frozen=True, eq=False)
class Pose:
    """Element of S^3 x R^3: unit quaternion ``quat`` and ``pos`` in meters."""

    quat: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        q = normalize(np.array(self.quat, dtype=float).reshape(4))
        p = np.array(self.pos, dtype=float).reshape(3)
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "pos", p)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(IDENTITY_QUAT, np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[3:7], v[:3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = to_matrix(self.quat)
        m[:3, 3] = self.pos
        return m

    def as_vector(self) -> np.ndarray:
        """``[px, py, pz, qw, qx, qy, qz]``."""
        return np.concatenate([self.pos, self.quat])

    def canonical(self) -> "Pose":
        return Pose(canonical(self.quat), self.pos)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            multiply(self.quat, other.quat),
            self.pos + to_matrix(self.quat) @ other.pos,
        )

    def is_close(self, other: "Pose", pos_tol: float = 1e-9, rot_tol: float = 1e-9) -> bool:
        return (
            np.linalg.norm(self.pos - other.pos) <= pos_tol
            and geodesic_distance(self.quat, other.quat) <= rot_tol
        )

    def to_dict(self) -> dict:
        return {"quat": self.quat.tolist(), "pos": self.pos.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["quat"], d["pos"])

    def __repr__(self) -> str:
        q = np.array2string(self.quat, precision=4)
        p = np.array2string(self.pos, precision=4)
        return f"Pose(quat={q}, pos={p})"


def pose_difference(measured: Pose, computed: Pose) -> np.ndarray:
    """7-vector ``measured - computed`` with the measured quaternion
    sign-aligned to the computed one first."""
    q = align_sign(computed.quat, measured.quat)
    return np.concatenate([measured.pos - computed.pos, q - computed.quat])


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w
