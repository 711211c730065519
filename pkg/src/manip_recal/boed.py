"""GP-UCB experiment design for picking calibration poses."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Protocol

import numpy as np

from . import geometry as geo
from .geometry import Pose
from .gp import GpModel, KernelParams
from .kinematics import DhChain, fk_vectors, forward_kinematics

log = logging.getLogger(__name__)


class ServoFailed(RuntimeError):
    """The arm could not be servoed to a requested pose."""


class PoolExhausted(RuntimeError):
    """Every remaining candidate pose failed to servo."""


class Arm(Protocol):
    def servo_to(self, target: Pose, theta0=None) -> np.ndarray: ...

    def measure_marker_pose(self) -> Pose: ...


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha1: float = 0.5
    alpha2: float = 0.5
    sup_fp: float = 0.5
    sup_fq: float = math.pi

    def __post_init__(self):
        if not (0 < self.alpha1 < 1 and 0 < self.alpha2 < 1):
            raise ValueError("alpha1 and alpha2 must lie in (0, 1)")
        if abs(self.alpha1 + self.alpha2 - 1.0) > 1e-12:
            raise ValueError("alpha1 + alpha2 must equal 1")
        if self.sup_fp <= 0 or self.sup_fq <= 0:
            raise ValueError("normalizers must be positive")


def objective_terms(measured: Pose, computed: Pose) -> tuple[float, float]:
    """Position error (m) and rotation geodesic distance (rad)."""
    fp = float(np.linalg.norm(measured.pos - computed.pos))
    fq = geo.geodesic_distance(measured.quat, computed.quat)
    return fp, fq


def objective_value(measured: Pose, computed: Pose, weights: ObjectiveWeights = ObjectiveWeights()) -> float:
    fp, fq = objective_terms(measured, computed)
    f = -(weights.alpha1 * fp / weights.sup_fp + weights.alpha2 * fq / weights.sup_fq)
    if fp > weights.sup_fp:
        log.warning("position error %.3f m exceeds normalizer %.3f m", fp, weights.sup_fp)
    return f


@dataclass(frozen=True, eq=False)
class CandidatePool:
    """Finite acquisition domain: FK images of sampled joint vectors."""

    thetas: np.ndarray
    quats: np.ndarray
    positions: np.ndarray

    @classmethod
    def from_thetas(cls, chain: DhChain, thetas) -> "CandidatePool":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        v = fk_vectors(chain, thetas)
        return cls(thetas, v[:, 3:], v[:, :3])

    @classmethod
    def sample(cls, chain: DhChain, size: int, rng: np.random.Generator, half_range=np.pi) -> "CandidatePool":
        half = np.broadcast_to(np.asarray(half_range, dtype=float), (chain.n_joints,))
        thetas = rng.uniform(-half, half, size=(size, chain.n_joints))
        return cls.from_thetas(chain, thetas)

    @property
    def size(self) -> int:
        return len(self.thetas)

    def __len__(self) -> int:
        return len(self.thetas)

    def pose(self, i: int) -> Pose:
        return Pose(self.quats[i], self.positions[i])


def ucb_beta(pool_size: int, k: int, delta: float = 0.1) -> float:
    return 2.0 * math.log(pool_size * k**2 * math.pi**2 / (6.0 * delta))


def acquisition(model: GpModel, pool: CandidatePool, k: int, delta: float = 0.1) -> tuple[np.ndarray, float]:
    """UCB values over the pool and the ``beta_k`` used."""
    beta = ucb_beta(pool.size, k, delta)
    mean, var = model.predict(pool.quats, pool.positions)
    return mean + math.sqrt(beta) * np.sqrt(var), beta


def ucb_select(model: GpModel, pool: CandidatePool, k: int, delta: float = 0.1, exclude=()) -> tuple[int, float]:
    """Pool index maximizing the UCB acquisition (lowest index on ties).

    Returns ``(index, acquisition value)``. Indices in ``exclude`` are skipped.
    """
    if pool.size == 0:
        raise ValueError("empty candidate pool")
    values, _ = acquisition(model, pool, k, delta)
    if exclude:
        values = values.copy()
        values[list(exclude)] = -np.inf
    i = int(np.argmax(values))
    if not np.isfinite(values[i]):
        raise PoolExhausted("no selectable candidate left")
    return i, float(values[i])


@dataclass
class BoedTrace:
    """Per-iteration record of the design loop."""

    commanded: list[Pose] = field(default_factory=list)
    measured: list[Pose] = field(default_factory=list)
    computed: list[Pose] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    fp: list[float] = field(default_factory=list)
    fq: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    acquisition: list[float] = field(default_factory=list)
    post_mean: list[float] = field(default_factory=list)
    post_std: list[float] = field(default_factory=list)
    pool_index: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.measured)

    def head(self, n: int) -> "BoedTrace":
        return BoedTrace(**{k: list(v[:n]) for k, v in vars(self).items()})

    @property
    def joint_matrix(self) -> np.ndarray:
        return np.array(self.thetas)

    def to_csv(self, path) -> None:
        n_j = len(self.thetas[0]) if self.thetas else 0
        header = ["iter"]
        for tag in ("cmd", "meas", "comp"):
            header += [f"{tag}_{c}" for c in ("px", "py", "pz", "qw", "qx", "qy", "qz")]
        header += ["f_p", "f_q", "objective", "beta_k", "acquisition", "pool_index"]
        header += [f"theta{i + 1}" for i in range(n_j)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [i + 1]
                for pose in (self.commanded[i], self.measured[i], self.computed[i]):
                    row += [repr(float(x)) for x in pose.as_vector()]
                row += [repr(float(x)) for x in (self.fp[i], self.fq[i], self.objective[i], self.beta[i], self.acquisition[i])]
                row += [self.pool_index[i]]
                row += [repr(float(x)) for x in self.thetas[i]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "BoedTrace":
        tr = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                def vec(tag):
                    return np.array([float(rec[f"{tag}_{c}"]) for c in ("px", "py", "pz", "qw", "qx", "qy", "qz")])

                tr.commanded.append(Pose.from_vector(vec("cmd")))
                tr.measured.append(Pose.from_vector(vec("meas")))
                tr.computed.append(Pose.from_vector(vec("comp")))
                tr.fp.append(float(rec["f_p"]))
                tr.fq.append(float(rec["f_q"]))
                tr.objective.append(float(rec["objective"]))
                tr.beta.append(float(rec["beta_k"]))
                tr.acquisition.append(float(rec["acquisition"]))
                tr.pool_index.append(int(rec["pool_index"]))
                n_j = sum(1 for k in rec if k.startswith("theta"))
                tr.thetas.append(np.array([float(rec[f"theta{i + 1}"]) for i in range(n_j)]))
        return tr


def iter_boed(
    arm: Arm,
    chain: DhChain,
    pool: CandidatePool,
    weights: ObjectiveWeights = ObjectiveWeights(),
    gp_params: KernelParams | None = None,
    delta: float = 0.1,
) -> Iterator[BoedTrace]:
    """Run the design loop indefinitely, yielding the trace after each
    successful measurement.

    Candidates are never reused; servo failures discard the candidate and
    fall through to the next-best acquisition without counting an iteration.
    """
    model = GpModel(gp_params or KernelParams())
    trace = BoedTrace()
    used: set[int] = set()
    k = 0
    while True:
        k += 1
        while True:
            if len(used) >= pool.size:
                raise PoolExhausted(f"all {pool.size} candidates used or failed")
            i, acq = ucb_select(model, pool, k, delta, exclude=used)
            used.add(i)
            target = pool.pose(i)
            try:
                theta = arm.servo_to(target, pool.thetas[i])
                break
            except ServoFailed as exc:
                log.info("candidate %d discarded: %s", i, exc)
        measured = arm.measure_marker_pose()
        computed = forward_kinematics(chain, theta)
        fp, fq = objective_terms(measured, computed)
        y = objective_value(measured, computed, weights)
        mean, var = model.posterior(measured)
        model = model.add_observation(measured, y)

        trace.commanded.append(target)
        trace.measured.append(measured)
        trace.computed.append(computed)
        trace.thetas.append(np.asarray(theta, dtype=float))
        trace.fp.append(fp)
        trace.fq.append(fq)
        trace.objective.append(y)
        trace.beta.append(ucb_beta(pool.size, k, delta))
        trace.acquisition.append(acq)
        trace.post_mean.append(mean)
        trace.post_std.append(math.sqrt(var))
        trace.pool_index.append(i)
        yield trace


def run_boed(
    arm: Arm,
    chain: DhChain,
    pool: CandidatePool,
    weights: ObjectiveWeights = ObjectiveWeights(),
    n: int = 38,
    gp_params: KernelParams | None = None,
    delta: float = 0.1,
) -> BoedTrace:
    if n < 1:
        raise ValueError("need at least one iteration")
    trace = None
    for trace in iter_boed(arm, chain, pool, weights, gp_params, delta):
        if len(trace) >= n:
            break
    return trace

