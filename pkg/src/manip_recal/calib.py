"""DH parameter identification from a measurement trace.

Linearize the pose residual around the current chain, solve the
box-constrained least-squares step, update, repeat.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .boed import BoedTrace
from .kinematics import (
    ANGLE_TYPES,
    PARAM_TYPES,
    DhChain,
    RankReport,
    fk_vectors,
    free_indices,
    identification_jacobian,
    rank_report,
)

log = logging.getLogger(__name__)


class MaxIterations(RuntimeError):
    """Active-set iteration cap hit (cycling or severe ill-conditioning)."""


class NotConverged(RuntimeError):
    """Outer Gauss-Newton loop hit its iteration cap."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class UndefinedAccuracy(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ResidualStack:
    delta: np.ndarray
    thetas: np.ndarray

    @property
    def n(self) -> int:
        return len(self.delta) // 7

    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))


def stacked_residual(measured: np.ndarray, chain: DhChain, thetas, params=None) -> np.ndarray:
    """``measured - FK(chain, thetas)`` as a flat 7n vector.

    ``measured`` is an (n, 7) array of ``[p, q]`` rows; each measured
    quaternion is flipped onto the hemisphere of its computed counterpart.
    """
    comp = fk_vectors(chain, thetas, params)
    meas = np.array(measured, dtype=float, copy=True)
    meas[:, 3:] = geo.align_sign(comp[:, 3:], meas[:, 3:])
    return (meas - comp).reshape(-1)


def build_residuals(trace: BoedTrace, chain: DhChain) -> ResidualStack:
    if len(trace) == 0:
        raise ValueError("empty trace")
    thetas = trace.joint_matrix
    measured = np.array([x.as_vector() for x in trace.measured])
    return ResidualStack(stacked_residual(measured, chain, thetas), thetas)


@dataclass(frozen=True, eq=False)
class QpBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("bounds differ in length")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("bounds must contain zero")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, mask, n_joints: int, angle: float = 0.8, length: float = 0.05) -> "QpBounds":
        kinds = np.repeat(PARAM_TYPES, n_joints)[free_indices(mask)]
        half = np.where(np.isin(kinds, ANGLE_TYPES), angle, length)
        return cls(-half, half)

    @classmethod
    def symmetric(cls, half) -> "QpBounds":
        half = np.asarray(half, dtype=float)
        return cls(-half, half)


def _kkt_violation(g, x, lb, ub, tol):
    # g is the negative gradient J^T (b - J x)
    at_lb = x <= lb + tol
    at_ub = x >= ub - tol
    v = np.abs(g)
    v = np.where(at_lb, np.maximum(g, 0.0), v)
    v = np.where(at_ub, np.maximum(-g, 0.0), v)
    v = np.where(at_lb & at_ub, 0.0, v)
    return v


def solve_qp(J, delta, bounds: QpBounds, tol: float = 1e-12, max_iter: int | None = None) -> np.ndarray:
    """``argmin ||delta - J x||^2`` subject to ``lower <= x <= upper``.

    Primal active-set method (Stark-Parker style BVLS). Starts from zero,
    which the bounds always admit.
    """
    J = np.asarray(J, dtype=float)
    b = np.asarray(delta, dtype=float)
    lb, ub = bounds.lower, bounds.upper
    m, n = J.shape
    if lb.size != n:
        raise ValueError(f"bounds have {lb.size} entries, J has {n} columns")
    if max_iter is None:
        max_iter = 10 * n + 50

    x = np.zeros(n)
    # +1 at upper, -1 at lower, 0 free; start with everything free
    state = np.zeros(n, dtype=int)
    fixed_bounds = lb == ub
    state[fixed_bounds] = -1
    x[fixed_bounds] = lb[fixed_bounds]
    scale = max(np.linalg.norm(J.T @ b), np.finfo(float).tiny)

    for _ in range(max_iter):
        free = state == 0
        if np.any(free):
            rhs = b - J[:, ~free] @ x[~free]
            z = np.linalg.lstsq(J[:, free], rhs, rcond=None)[0]
            xf = x[free]
            lo, hi = lb[free], ub[free]
            if np.all((z >= lo) & (z <= hi)):
                x[free] = z
            else:
                # step from the feasible x toward z until the first bound hit
                d = z - xf
                with np.errstate(divide="ignore", invalid="ignore"):
                    t_lo = np.where(d < 0, (lo - xf) / d, np.inf)
                    t_hi = np.where(d > 0, (hi - xf) / d, np.inf)
                t = np.clip(np.minimum(t_lo, t_hi), 0.0, 1.0)
                alpha = float(np.min(t))
                xf = np.clip(xf + alpha * d, lo, hi)
                idx = np.flatnonzero(free)
                hit_lo = (t_lo <= alpha + 1e-15) | (xf <= lo)
                hit_hi = (t_hi <= alpha + 1e-15) | (xf >= hi)
                xf[hit_lo] = lo[hit_lo]
                xf[hit_hi] = hi[hit_hi]
                x[free] = xf
                state[idx[hit_lo]] = -1
                state[idx[hit_hi]] = 1
                continue

        g = J.T @ (b - J @ x)
        # a bound variable wants to move inward when the descent direction points inside
        want = np.where(state == -1, g, np.where(state == 1, -g, -np.inf))
        want[fixed_bounds] = -np.inf
        j = int(np.argmax(want))
        if want[j] <= tol * scale:
            return x
        state[j] = 0
    raise MaxIterations(f"bounded least squares did not finish in {max_iter} iterations")


@dataclass
class CalibrationResult:
    chain: DhChain
    correction: np.ndarray
    mask: np.ndarray
    iterations: int
    residual_history: list[float]
    rank: RankReport
    converged: bool = True
    param_names: list[str] = field(default_factory=list)

    @property
    def free_correction(self) -> np.ndarray:
        return self.correction[self.mask]

    def correction_of(self, name: str) -> float:
        return float(self.correction[self.param_names.index(name)])

    def to_dict(self, ground_truth: dict | None = None) -> dict:
        out = {
            "corrections": {
                n: float(v) for n, v, m in zip(self.param_names, self.correction, self.mask) if m
            },
            "iterations": self.iterations,
            "residual_history": self.residual_history,
            "converged": self.converged,
            "rank": self.rank.rank,
            "n_free": self.rank.n_free,
            "rank_deficient": self.rank.deficient,
            "unidentifiable": list(self.rank.unidentifiable),
            "chain": self.chain.to_dict(),
        }
        if ground_truth:
            out["ground_truth"] = ground_truth
        return out


def calibrate(
    trace: BoedTrace,
    nominal: DhChain,
    mask,
    bounds: QpBounds | None = None,
    step_tol: float = 1e-8,
    improve_tol: float = 1e-10,
    max_iter: int = 50,
    h: float = 1e-6,
) -> CalibrationResult:
    """Iterated linearized box-constrained identification.

    Each outer step solves the bounded least-squares problem for an
    increment, shifted so the accumulated correction stays inside
    ``bounds``. A step that raises the residual norm is halved until it
    does not.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    idx = free_indices(mask)
    if len(trace) * 7 < idx.size:
        raise ValueError(f"{len(trace)} measurements cannot identify {idx.size} parameters")
    if bounds is None:
        bounds = QpBounds.default(mask, nominal.n_joints)
    names = nominal.param_names()
    free_names = [names[i] for i in idx]

    thetas = trace.joint_matrix
    measured = np.array([x.as_vector() for x in trace.measured])
    p0 = nominal.params()
    acc = np.zeros(idx.size)

    def residual(acc_vec):
        p = p0.copy()
        p[idx] += acc_vec
        return stacked_residual(measured, nominal, thetas, p)

    r = residual(acc)
    history = [float(np.linalg.norm(r))]
    report = None
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        chain = nominal.with_params(_apply(p0, idx, acc))
        J = identification_jacobian(chain, thetas, mask, h)
        if report is None:
            report = rank_report(J, free_names)
            if report.deficient:
                log.warning("identification Jacobian rank %d < %d; weak: %s", report.rank, report.n_free, report.unidentifiable)
        step = solve_qp(J, r, QpBounds(bounds.lower - acc, bounds.upper - acc))
        new_r = residual(acc + step)
        new_norm = float(np.linalg.norm(new_r))
        halvings = 0
        while new_norm > history[-1] and halvings < 30:
            step *= 0.5
            halvings += 1
            new_r = residual(acc + step)
            new_norm = float(np.linalg.norm(new_r))
        if new_norm > history[-1]:
            # no descent along this direction; keep the current estimate
            converged = True
            break
        acc = acc + step
        r = new_r
        improvement = history[-1] - new_norm
        history.append(new_norm)
        if np.max(np.abs(step)) < step_tol or improvement < improve_tol:
            converged = True
            break

    result = CalibrationResult(
        chain=nominal.with_params(_apply(p0, idx, acc)),
        correction=_apply(np.zeros_like(p0), idx, acc),
        mask=mask,
        iterations=it,
        residual_history=history,
        rank=report,
        converged=converged,
        param_names=names,
    )
    if not converged:
        result.converged = False
        raise NotConverged(f"no convergence after {max_iter} outer iterations", result)
    return result


def _apply(base, idx, values):
    out = np.array(base, dtype=float, copy=True)
    out[idx] += values
    return out


def accuracy_metric(true_offset: float, estimated_offset: float) -> float:
    """``100 * min(|a|, |b|) / max(|a|, |b|)`` for same-signed offsets."""
    if true_offset == 0 or estimated_offset == 0:
        raise UndefinedAccuracy("offsets must be nonzero")
    if math.copysign(1.0, true_offset) != math.copysign(1.0, estimated_offset):
        raise UndefinedAccuracy("offsets have opposite signs")
    a, b = abs(true_offset), abs(estimated_offset)
    return 100.0 * min(a, b) / max(a, b)


def write_result_json(path, result: CalibrationResult, ground_truth: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_dict(ground_truth), fh, indent=2, sort_keys=True)


def read_result_json(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    DhChain.from_dict(d["chain"])
    return d


VALIDATION_COLUMNS = ["pose", "source", "px", "py", "pz", "qw", "qx", "qy", "qz"]


def write_validation_csv(path, table: dict[str, np.ndarray]) -> None:
    """``table`` maps source name (measured/uncalibrated/calibrated) to (n, 7) arrays."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VALIDATION_COLUMNS)
        n = len(next(iter(table.values())))
        for i in range(n):
            for src, arr in table.items():
                w.writerow([i + 1, src] + [repr(float(x)) for x in arr[i]])


def read_validation_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["source"], []).append([float(rec[c]) for c in VALIDATION_COLUMNS[2:]])
    return {k: np.array(v) for k, v in rows.items()}
