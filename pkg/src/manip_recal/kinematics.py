"""Denavit-Hartenberg serial chains.

Standard DH convention, one homogeneous transform per link::

    T(phi, alpha, a, d) = Rz(phi) Tz(d) Tx(a) Rx(alpha)

The flat parameter vector of a chain with ``n`` joints is grouped by
parameter type, ``[phi_1..phi_n, alpha_1..alpha_n, a_1..a_n, d_1..d_n]``,
so index ``k * n + i`` is parameter type ``k`` of joint ``i``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import geometry as geo
from .geometry import Pose

log = logging.getLogger(__name__)

PARAM_TYPES = ("phi", "alpha", "a", "d")
ANGLE_TYPES = ("phi", "alpha")


class NoConvergence(RuntimeError):
    """Inverse kinematics did not reach the target within the iteration cap."""

    def __init__(self, msg, theta=None, pos_err=None, rot_err=None):
        super().__init__(msg)
        self.theta = theta
        self.pos_err = pos_err
        self.rot_err = rot_err


@dataclass(frozen=True)
class DhRow:
    phi: float = 0.0
    alpha: float = 0.0
    a: float = 0.0
    d: float = 0.0
    kind: str = "revolute"

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        object.__setattr__(self, "phi", geo.wrap_angle(self.phi))
        object.__setattr__(self, "alpha", geo.wrap_angle(self.alpha))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "d", float(self.d))


@dataclass(frozen=True, eq=False)
class DhChain:
    rows: tuple[DhRow, ...]
    base: Pose = field(default_factory=Pose.identity)
    tool: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        rows = tuple(self.rows)
        if not rows:
            raise ValueError("a chain needs at least one row")
        object.__setattr__(self, "rows", rows)

    @property
    def n_joints(self) -> int:
        return len(self.rows)

    @property
    def n_params(self) -> int:
        return 4 * len(self.rows)

    @property
    def revolute(self) -> np.ndarray:
        return np.array([r.kind == "revolute" for r in self.rows])

    def params(self) -> np.ndarray:
        """Flat DH parameter vector (type-major ordering)."""
        return np.array([[getattr(r, k) for r in self.rows] for k in PARAM_TYPES]).reshape(-1)

    def with_params(self, params) -> "DhChain":
        p = np.asarray(params, dtype=float).reshape(4, self.n_joints)
        rows = tuple(
            DhRow(p[0, i], p[1, i], p[2, i], p[3, i], r.kind) for i, r in enumerate(self.rows)
        )
        return replace(self, rows=rows)

    def perturbed(self, delta) -> "DhChain":
        return self.with_params(self.params() + np.asarray(delta, dtype=float))

    def param_names(self) -> list[str]:
        return [f"{k}{i + 1}" for k in PARAM_TYPES for i in range(self.n_joints)]

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"phi": r.phi, "alpha": r.alpha, "a": r.a, "d": r.d, "kind": r.kind}
                for r in self.rows
            ],
            "base": self.base.to_dict(),
            "tool": self.tool.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DhChain":
        rows = tuple(
            DhRow(r["phi"], r["alpha"], r["a"], r["d"], r.get("kind", "revolute"))
            for r in d["rows"]
        )
        base = Pose.from_dict(d["base"]) if "base" in d else Pose.identity()
        tool = Pose.from_dict(d["tool"]) if "tool" in d else Pose.identity()
        return cls(rows, base, tool)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, s: str) -> "DhChain":
        return cls.from_dict(json.loads(s))


def wam7(tool_length: float = 0.12) -> DhChain:
    """Nominal DH table of a 7-DoF Barrett WAM.

    The tool frame sits on the joint-7 axis, so an offset on the last joint
    changes only the end-effector orientation.
    """
    h = np.pi / 2
    rows = (
        DhRow(0.0, -h, 0.0, 0.0),
        DhRow(0.0, h, 0.0, 0.0),
        DhRow(0.0, -h, 0.045, 0.55),
        DhRow(0.0, h, -0.045, 0.0),
        DhRow(0.0, -h, 0.0, 0.3),
        DhRow(0.0, h, 0.0, 0.0),
        DhRow(0.0, 0.0, 0.0, 0.06),
    )
    return DhChain(rows, Pose.identity(), Pose(geo.IDENTITY_QUAT, [0.0, 0.0, tool_length]))


def _link_matrices(phi, alpha, a, d) -> np.ndarray:
    """Stack of DH link transforms; inputs broadcast to a common shape."""
    phi, alpha, a, d = np.broadcast_arrays(phi, alpha, a, d)
    cp, sp = np.cos(phi), np.sin(phi)
    ca, sa = np.cos(alpha), np.sin(alpha)
    T = np.zeros(phi.shape + (4, 4))
    T[..., 0, 0] = cp
    T[..., 0, 1] = -sp * ca
    T[..., 0, 2] = sp * sa
    T[..., 0, 3] = a * cp
    T[..., 1, 0] = sp
    T[..., 1, 1] = cp * ca
    T[..., 1, 2] = -cp * sa
    T[..., 1, 3] = a * sp
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def fk_matrices(chain: DhChain, thetas, params=None) -> np.ndarray:
    """End-effector transforms for a batch of joint vectors, shape (m, 4, 4).

    ``params`` overrides the chain's own DH vector (used by the Jacobian to
    avoid rebuilding chains).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = chain.n_joints
    if thetas.shape[1] != n:
        raise ValueError(f"expected {n} joint values, got {thetas.shape[1]}")
    p = (chain.params() if params is None else np.asarray(params, dtype=float)).reshape(4, n)
    rev = chain.revolute
    phi = p[0] + np.where(rev, thetas, 0.0)
    d = p[3] + np.where(rev, 0.0, thetas)
    links = _link_matrices(phi, p[1], p[2], d)
    T = np.broadcast_to(chain.base.matrix(), (thetas.shape[0], 4, 4))
    for i in range(n):
        T = T @ links[:, i]
    return T @ chain.tool.matrix()


def fk_vectors(chain: DhChain, thetas, params=None) -> np.ndarray:
    """Batch FK as 7-vectors ``[p, q]`` with canonical (w >= 0) quaternions."""
    T = fk_matrices(chain, thetas, params)
    return np.concatenate([T[:, :3, 3], geo.from_matrix(T[:, :3, :3])], axis=1)


def forward_kinematics(chain: DhChain, theta) -> Pose:
    T = fk_matrices(chain, np.asarray(theta, dtype=float)[None, :])[0]
    return Pose.from_matrix(T)


def free_indices(mask) -> np.ndarray:
    idx = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    if idx.size == 0:
        raise ValueError("mask selects no free parameter")
    return idx


def make_mask(n_joints: int, free: str | Sequence[str] = "joint_offsets") -> np.ndarray:
    """Boolean mask over the flat DH vector.

    ``free`` is ``"joint_offsets"``, ``"all"`` or a list of names such as
    ``["phi7", "d1"]``.
    """
    mask = np.zeros((4, n_joints), dtype=bool)
    if free == "joint_offsets":
        mask[0] = True
    elif free == "all":
        mask[:] = True
    else:
        for name in free:
            k = next((t for t in sorted(PARAM_TYPES, key=len, reverse=True) if name.startswith(t)), None)
            if k is None:
                raise ValueError(f"bad parameter name {name!r}")
            i = int(name[len(k):]) - 1
            if not 0 <= i < n_joints:
                raise ValueError(f"bad joint index in {name!r}")
            mask[PARAM_TYPES.index(k), i] = True
    return mask.reshape(-1)


@dataclass(frozen=True, eq=False)
class ParamDelta:
    """Corrections on the flat DH vector; entries outside ``mask`` are zero."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        m = np.array(self.mask, dtype=bool).reshape(-1)
        if v.shape != m.shape:
            raise ValueError("values and mask differ in length")
        v = np.where(m, v, 0.0)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_free(cls, free_values, mask) -> "ParamDelta":
        m = np.asarray(mask, dtype=bool).reshape(-1)
        v = np.zeros(m.size)
        v[m] = free_values
        return cls(v, m)

    @property
    def free_values(self) -> np.ndarray:
        return self.values[self.mask]


def _aligned_vectors(chain, thetas, params, ref_quats):
    v = fk_vectors(chain, thetas, params)
    v[:, 3:] = geo.align_sign(ref_quats, v[:, 3:])
    return v


def identification_jacobian(chain: DhChain, thetas, mask, h: float = 1e-6) -> np.ndarray:
    """Sensitivity of stacked 7-vector poses to the free DH parameters.

    Central differences with step ``h``; quaternion columns are aligned to
    the unperturbed pose. Returns a ``(7 m, n_free)`` matrix with rows
    ordered measurement by measurement.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[0] == 0:
        raise ValueError("need at least one joint vector")
    idx = free_indices(mask)
    p0 = chain.params()
    ref = fk_vectors(chain, thetas, p0)[:, 3:]
    J = np.empty((7 * thetas.shape[0], idx.size))
    for col, j in enumerate(idx):
        dp = np.zeros_like(p0)
        dp[j] = h
        plus = _aligned_vectors(chain, thetas, p0 + dp, ref)
        minus = _aligned_vectors(chain, thetas, p0 - dp, ref)
        J[:, col] = ((plus - minus) / (2.0 * h)).reshape(-1)
    return J


@dataclass(frozen=True)
class RankReport:
    rank: int
    n_free: int
    singular_values: tuple[float, ...]
    # free parameter names with a large share in the numerical null space
    unidentifiable: tuple[str, ...] = ()

    @property
    def deficient(self) -> bool:
        return self.rank < self.n_free


def rank_report(J: np.ndarray, names: Sequence[str], rtol: float = 1e-8) -> RankReport:
    s = np.linalg.svd(J, compute_uv=False)
    tol = rtol * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    weak: tuple[str, ...] = ()
    if rank < J.shape[1]:
        _, _, vt = np.linalg.svd(J)
        null = vt[rank:]
        share = np.sum(null**2, axis=0)
        weak = tuple(n for n, w in zip(names, share) if w > 0.1)
    return RankReport(rank, J.shape[1], tuple(float(x) for x in s), weak)


def _frames(chain: DhChain, theta) -> tuple[list[np.ndarray], np.ndarray]:
    """Joint frames ``T_0 .. T_{n-1}`` (the frame each joint acts in) and the
    tool transform."""
    p = chain.params().reshape(4, chain.n_joints)
    rev = chain.revolute
    phi = p[0] + np.where(rev, theta, 0.0)
    d = p[3] + np.where(rev, 0.0, theta)
    links = _link_matrices(phi, p[1], p[2], d)
    T = chain.base.matrix()
    frames = []
    for i in range(chain.n_joints):
        frames.append(T)
        T = T @ links[i]
    return frames, T @ chain.tool.matrix()


def geometric_jacobian(chain: DhChain, theta) -> tuple[np.ndarray, np.ndarray]:
    """6 x n spatial Jacobian (linear rows first) and the tool transform."""
    frames, T = _frames(chain, np.asarray(theta, dtype=float))
    pe = T[:3, 3]
    J = np.zeros((6, chain.n_joints))
    for i, (F, row) in enumerate(zip(frames, chain.rows)):
        z = F[:3, 2]
        if row.kind == "revolute":
            J[:3, i] = np.cross(z, pe - F[:3, 3])
            J[3:, i] = z
        else:
            J[:3, i] = z
    return J, T


def pose_error(T: np.ndarray, target: Pose) -> tuple[np.ndarray, float, float]:
    """Twist-like error from ``T`` to ``target``; returns (e, |e_p|, angle)."""
    ep = target.pos - T[:3, 3]
    R_err = geo.to_matrix(target.quat) @ T[:3, :3].T
    er = geo.rotation_vector(geo.from_matrix(R_err))
    return np.concatenate([ep, er]), float(np.linalg.norm(ep)), float(np.linalg.norm(er))


def solve_ik(
    chain: DhChain,
    target: Pose,
    theta0,
    pos_tol: float = 5e-4,
    rot_tol: float = np.deg2rad(0.1),
    damping: float = 1e-3,
    max_step: float = 0.2,
    max_iter: int = 200,
) -> np.ndarray:
    """Damped least-squares IK from ``theta0``.

    Raises :class:`NoConvergence` if the tolerances are not met after
    ``max_iter`` iterations.
    """
    if not (np.all(np.isfinite(target.pos)) and np.all(np.isfinite(target.quat))):
        raise ValueError("target must be finite")
    theta = np.array(theta0, dtype=float)
    lam2 = damping**2
    ep = er = np.inf
    for _ in range(max_iter + 1):
        J, T = geometric_jacobian(chain, theta)
        e, ep, er = pose_error(T, target)
        if ep < pos_tol and er < rot_tol:
            return theta
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), e)
        peak = np.max(np.abs(dq))
        if peak > max_step:
            dq *= max_step / peak
        theta = theta + dq
    raise NoConvergence(
        f"IK stopped with position error {ep:.3g} m, rotation error {er:.3g} rad",
        theta=theta,
        pos_err=ep,
        rot_err=er,
    )
