"""Mission executive: halt on a declared fault, pick a recovery action,
recalibrate, validate, resume.

The executive ticks once per health slice. Sub-persistence suspicion is left
to the detection engine's persistence filter; the executive only reacts when
a suspicion either becomes a declared fault (halt) or clears (a transient,
handled by the RETRY path).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import geometry as geo
from .boed import CandidatePool, ObjectiveWeights, ServoFailed, run_boed
from .calib import NotConverged, QpBounds, calibrate
from .geometry import Pose
from .gp import KernelParams
from .kinematics import DhChain, NoConvergence, fk_vectors, make_mask, solve_ik
from .monsid import ComponentGraph, DetectionParams, Engine, Health, HealthStatus, coordinate
from .sim import SimArm, min_jerk_trajectory

log = logging.getLogger(__name__)


class ExecState(str, Enum):
    NOMINAL = "NOMINAL"
    SUSPECT = "SUSPECT"
    HALTED = "HALTED"
    RECALIBRATING = "RECALIBRATING"
    VALIDATING = "VALIDATING"
    SAFE_MODE = "SAFE_MODE"


class Action(str, Enum):
    RETRY = "RETRY"
    PAUSE = "PAUSE"
    RECALIBRATE = "RECALIBRATE"
    SAFE_MODE = "SAFE_MODE"


S = ExecState
EDGES: dict[ExecState, frozenset[ExecState]] = {
    S.NOMINAL: frozenset({S.SUSPECT, S.HALTED, S.SAFE_MODE}),
    S.SUSPECT: frozenset({S.NOMINAL, S.HALTED, S.SAFE_MODE}),
    # HALTED -> NOMINAL only through an operator resume
    S.HALTED: frozenset({S.RECALIBRATING, S.SAFE_MODE, S.NOMINAL}),
    S.RECALIBRATING: frozenset({S.VALIDATING, S.SAFE_MODE}),
    S.VALIDATING: frozenset({S.NOMINAL, S.RECALIBRATING, S.SAFE_MODE}),
    S.SAFE_MODE: frozenset(),
}

MOTION_COMMANDS = frozenset({"move", "retry", "servo"})
NO_MOTION_STATES = frozenset({S.HALTED, S.SAFE_MODE})


class IllegalTransition(RuntimeError):
    pass


class SafetyViolation(RuntimeError):
    """A motion command was requested in a state that forbids motion."""


class ValidationFailed(RuntimeError):
    def __init__(self, report):
        super().__init__("recalibration failed validation")
        self.report = report


# validation --------------------------------------------------------------------


@dataclass
class ValidationReport:
    passed: bool
    measured: np.ndarray
    uncalibrated: np.ndarray
    calibrated: np.ndarray
    pos_err_before: np.ndarray
    pos_err_after: np.ndarray
    rot_err_before: np.ndarray
    rot_err_after: np.ndarray
    pos_noise_floor: float
    rot_noise_floor: float

    @property
    def orientation_reduction(self) -> float:
        """Fractional drop in mean orientation error (nan when nothing to reduce)."""
        before = float(np.mean(self.rot_err_before))
        if before == 0:
            return math.nan
        return 1.0 - float(np.mean(self.rot_err_after)) / before

    @property
    def position_trace_shift(self) -> float:
        """Largest distance between uncalibrated and calibrated predicted positions."""
        return float(np.max(np.linalg.norm(self.calibrated[:, :3] - self.uncalibrated[:, :3], axis=1)))

    def table(self) -> dict[str, np.ndarray]:
        return {"measured": self.measured, "uncalibrated": self.uncalibrated, "calibrated": self.calibrated}

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "orientation_reduction": self.orientation_reduction,
            "mean_rot_err_before": float(np.mean(self.rot_err_before)),
            "mean_rot_err_after": float(np.mean(self.rot_err_after)),
            "mean_pos_err_before": float(np.mean(self.pos_err_before)),
            "mean_pos_err_after": float(np.mean(self.pos_err_after)),
            "position_trace_shift": self.position_trace_shift,
            "pos_noise_floor": self.pos_noise_floor,
        }


def validate_recalibration(
    chain_before: DhChain,
    chain_after: DhChain,
    arm,
    n_test: int = 10,
    rng: np.random.Generator | None = None,
    min_reduction: float = 0.8,
    raise_on_fail: bool = False,
) -> ValidationReport:
    """Compare both models against marker measurements at fresh poses.

    Passes when the mean orientation error drops by ``min_reduction`` (or was
    already inside the rotation noise floor) and the mean position error
    grows by no more than the position noise floor.
    """
    rng = rng or np.random.default_rng(0)
    meas, thetas = [], []
    while len(meas) < n_test:
        q = rng.uniform(-np.pi / 2, np.pi / 2, chain_after.n_joints)
        target = Pose.from_vector(fk_vectors(chain_after, q[None])[0])
        try:
            thetas.append(arm.servo_to(target, q))
        except ServoFailed:
            continue
        meas.append(arm.measure_marker_pose().as_vector())
    meas = np.array(meas)
    thetas = np.array(thetas)
    before = fk_vectors(chain_before, thetas)
    after = fk_vectors(chain_after, thetas)
    meas[:, 3:] = geo.align_sign(after[:, 3:], meas[:, 3:])

    def errs(comp):
        return (
            np.linalg.norm(meas[:, :3] - comp[:, :3], axis=1),
            geo.geodesic_distance(meas[:, 3:], comp[:, 3:]),
        )

    pb, qb = errs(before)
    pa, qa = errs(after)
    noise = arm.noise
    pos_floor = math.sqrt(3.0) * noise.sigma_p
    # mean of |N(0, sigma)|
    rot_floor = noise.sigma_q * math.sqrt(2.0 / math.pi)
    rot_ok = np.mean(qb) <= 3.0 * rot_floor or np.mean(qa) <= (1.0 - min_reduction) * np.mean(qb)
    pos_ok = np.mean(pa) <= np.mean(pb) + pos_floor
    report = ValidationReport(bool(rot_ok and pos_ok), meas, before, after, pb, pa, qb, qa, pos_floor, rot_floor)
    if raise_on_fail and not report.passed:
        raise ValidationFailed(report)
    return report


# policy -------------------------------------------------------------------------


@dataclass(frozen=True)
class SeverityPolicy:
    retry_limit: int = 3
    # largest encoder bias a DH correction is trusted to absorb
    max_fixable: float = 0.8
    table: tuple[tuple[frozenset, Action, str], ...] = (
        (frozenset({"encoder"}), Action.RECALIBRATE, "joint_offsets"),
        (frozenset({"command", "actuator"}), Action.PAUSE, ""),
        (frozenset({"kinematics", "ee_sensor"}), Action.RECALIBRATE, "all"),
        (frozenset({"encoder2"}), Action.PAUSE, ""),
    )

    def lookup(self, kinds: frozenset) -> tuple[Action, str]:
        for k, action, mask in self.table:
            if k == kinds:
                return action, mask
        return Action.SAFE_MODE, ""

    def covers(self, graph: ComponentGraph, groups) -> bool:
        return all(self.lookup(group_kinds(graph, g.members))[0] is not Action.SAFE_MODE for g in groups)

    def classify(self, graph: ComponentGraph, health: HealthStatus, magnitude: float = 0.0) -> tuple[Action, str]:
        if not health.declared:
            return (Action.RETRY, "") if health.overall is Health.SUSPECT else (Action.SAFE_MODE, "")
        if health.group_id is None:
            # ambiguous or unmatched signature: no autonomous recovery
            return Action.SAFE_MODE, ""
        action, mask = self.lookup(group_kinds(graph, health.group))
        if action is Action.RECALIBRATE and magnitude > self.max_fixable:
            return Action.SAFE_MODE, ""
        return action, mask


def group_kinds(graph: ComponentGraph, members) -> frozenset:
    return frozenset(graph.element(m).kind for m in members)


# state machine --------------------------------------------------------------------


@dataclass
class FaultRecord:
    t: float
    group: tuple[str, ...]
    group_id: int | None
    action: Action
    mask: str
    magnitude: float


@dataclass
class Executive:
    steps: list[dict]
    policy: SeverityPolicy = field(default_factory=SeverityPolicy)
    graph: ComponentGraph = field(default_factory=ComponentGraph)
    pause_timeout: int = 50

    def __post_init__(self):
        self.state = ExecState.NOMINAL
        self.retry_count = 0
        self.step_index = 0
        self.fault: FaultRecord | None = None
        self.recal_attempts = 0
        self.pause_ticks = 0
        self.log: list[dict] = []
        self._suspect_open = False

    # bookkeeping
    def _emit(self, t, event, command=None) -> None:
        self.log.append({"t": round(float(t), 9), "state": self.state.value, "event": event, "command": command})

    def _go(self, new: ExecState, t, event, command=None) -> None:
        if new not in EDGES[self.state]:
            raise IllegalTransition(f"{self.state.value} -> {new.value}")
        self.state = new
        self._emit(t, event, command)

    def issue(self, t, command: str) -> None:
        """Record an arm command, refusing motion where it is forbidden."""
        base = command.split(":")[0]
        if base in MOTION_COMMANDS and self.state in NO_MOTION_STATES:
            raise SafetyViolation(f"{command} refused in {self.state.value}")
        self._emit(t, "command", command)

    @property
    def done(self) -> bool:
        return self.step_index >= len(self.steps)

    @property
    def terminal(self) -> bool:
        return self.state is ExecState.SAFE_MODE or (self.done and self.state is ExecState.NOMINAL)

    # per-tick reaction
    def step_mission(self, health: HealthStatus, magnitude: float = 0.0) -> str | None:
        """React to one health slice; returns the command issued, if any."""
        t = health.timestamp
        if self.state in (ExecState.NOMINAL, ExecState.SUSPECT):
            if health.declared:
                action, mask = self.policy.classify(self.graph, health, magnitude)
                self.fault = FaultRecord(t, health.group, health.group_id, action, mask, magnitude)
                self._suspect_open = False
                self._go(ExecState.HALTED, t, f"fault:{','.join(health.group) or 'unidentified'}", "halt")
                return "halt"
            if health.overall is Health.SUSPECT:
                if not self._suspect_open:
                    self._suspect_open = True
                    self._emit(t, "suspect")
                return None
            if self._suspect_open:
                # suspicion cleared below persistence: a transient
                self._suspect_open = False
                self._go(ExecState.SUSPECT, t, "transient")
                if self.retry_count >= self.policy.retry_limit:
                    self._go(ExecState.SAFE_MODE, t, "retry_limit")
                    return None
                self.retry_count += 1
                self._go(ExecState.NOMINAL, t, "retry", None)
                self.issue(t, f"retry:{self.step_index}")
                return "retry"
            return None
        if self.state is ExecState.HALTED:
            return self.on_halted(t)
        return None

    def on_halted(self, t) -> str | None:
        action = self.fault.action if self.fault else Action.SAFE_MODE
        if action is Action.RECALIBRATE:
            self.recal_attempts += 1
            self._go(ExecState.RECALIBRATING, t, "recalibrate", "recalibrate")
            return "recalibrate"
        if action is Action.PAUSE:
            self.pause_ticks += 1
            if self.pause_ticks > self.pause_timeout:
                self._go(ExecState.SAFE_MODE, t, "pause_timeout")
            return None
        self._go(ExecState.SAFE_MODE, t, f"policy:{action.value}")
        return None

    def operator_resume(self, t) -> None:
        if self.state is not ExecState.HALTED:
            raise IllegalTransition("operator resume only from HALTED")
        self.fault = None
        self.pause_ticks = 0
        self._go(ExecState.NOMINAL, t, "operator_resume")

    def on_recalibrated(self, t, ok: bool) -> None:
        if ok:
            self._go(ExecState.VALIDATING, t, "calibrated")
        else:
            self._go(ExecState.SAFE_MODE, t, "calibration_failed")

    def on_validated(self, t, passed: bool) -> None:
        if passed:
            self.fault = None
            self._go(ExecState.NOMINAL, t, "validated")
        elif self.recal_attempts < 2:
            self.recal_attempts += 1
            self._go(ExecState.RECALIBRATING, t, "validation_failed", "recalibrate")
        else:
            self._go(ExecState.SAFE_MODE, t, "validation_failed")


def transitions(log_records) -> list[str]:
    """Collapsed state sequence from an executive log."""
    seq = [ExecState.NOMINAL.value]
    for rec in log_records:
        if rec["state"] != seq[-1]:
            seq.append(rec["state"])
    return seq


def check_motion_safety(log_records) -> bool:
    """True iff no motion command appears while motion is forbidden."""
    for rec in log_records:
        cmd = rec.get("command")
        if cmd and cmd.split(":")[0] in MOTION_COMMANDS and rec["state"] in {s.value for s in NO_MOTION_STATES}:
            return False
    return True


# mission runner ---------------------------------------------------------------------


class _GuardedArm:
    """Forwards arm calls after the executive has vetted the command."""

    def __init__(self, arm: SimArm, ex: Executive):
        self._arm = arm
        self._ex = ex
        self.noise = arm.noise

    def servo_to(self, target, theta0=None):
        self._ex.issue(self._arm.time, "servo")
        return self._arm.servo_to(target, theta0)

    def measure_marker_pose(self):
        return self._arm.measure_marker_pose()


@dataclass
class RecoveryConfig:
    pool_size: int = 500
    iterations: int = 38
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    kernel: KernelParams = field(default_factory=KernelParams)
    delta: float = 0.1
    angle_bound: float = 0.8
    length_bound: float = 0.05
    n_test: int = 10


@dataclass
class MissionOutcome:
    completed: bool
    final_state: ExecState
    log: list[dict]
    chain: DhChain
    health_records: list[dict]
    validations: list[dict] = field(default_factory=list)

    @property
    def transitions(self) -> list[str]:
        return transitions(self.log)


def _fault_magnitude(health: HealthStatus, engine: Engine) -> float:
    recs = [r for r in engine.records if r["event"] in ("faulty", "ambiguous", "no_match")]
    if not recs:
        return 0.0
    mags = [v for k, v in recs[-1]["magnitudes"].items() if k.startswith("J") and "pos-rev" in k]
    return max(mags) if mags else 0.0


def run_mission(
    arm: SimArm,
    chain: DhChain,
    steps: list[dict],
    script=None,
    policy: SeverityPolicy = SeverityPolicy(),
    detection: DetectionParams = DetectionParams(),
    recovery: RecoveryConfig = RecoveryConfig(),
    rng: np.random.Generator | None = None,
    pause_timeout: int = 50,
    max_ticks: int = 100000,
) -> MissionOutcome:
    """Drive the executive through a scripted mission on the simulator."""
    rng = rng or np.random.default_rng(0)
    graph = ComponentGraph(chain.n_joints)
    ex = Executive(steps, policy, graph, pause_timeout)
    engine = Engine(chain, detection, graph)
    if script is not None:
        arm.schedule(script)
    health_log: list[dict] = []
    validations: list[dict] = []
    ticks = 0

    while not ex.terminal and ticks < max_ticks:
        if ex.state is ExecState.NOMINAL:
            step = steps[ex.step_index]
            target = Pose.from_dict(step["target"])
            start = arm.commanded_reading
            try:
                goal = solve_ik(chain, target, start)
            except NoConvergence:
                ex._go(ExecState.SAFE_MODE, arm.time, f"unreachable:{step['name']}")
                break
            duration = float(step.get("duration", 3.0))
            ex.issue(arm.time, f"move:{step['name']}")
            tel = arm.stream_telemetry(min_jerk_trajectory(start, goal, arm.time, duration), duration)
            halted = False
            for sl in coordinate(tel.streams()).slices:
                ticks += 1
                health = engine.step(sl)
                cmd = ex.step_mission(health, _fault_magnitude(health, engine) if health.declared else 0.0)
                if cmd == "halt":
                    arm.rewind_to(tel, sl.timestamp)
                    halted = True
                    break
                if ex.state is ExecState.SAFE_MODE:
                    arm.rewind_to(tel, sl.timestamp)
                    break
            if not halted and ex.state is ExecState.NOMINAL:
                ex._emit(arm.time, f"step_done:{step['name']}")
                ex.step_index += 1
            continue

        if ex.state is ExecState.HALTED:
            ticks += 1
            arm.idle(1.0 / 50.0)
            t = arm.time
            hs = engine.last
            ex.step_mission(HealthStatus(**{**hs.__dict__, "timestamp": t}))
            continue

        if ex.state is ExecState.RECALIBRATING:
            mask = make_mask(chain.n_joints, ex.fault.mask or "joint_offsets")
            pool = CandidatePool.sample(chain, recovery.pool_size, rng)
            guarded = _GuardedArm(arm, ex)
            try:
                trace = run_boed(guarded, chain, pool, recovery.weights, recovery.iterations, recovery.kernel, recovery.delta)
                bounds = QpBounds.default(mask, chain.n_joints, recovery.angle_bound, recovery.length_bound)
                result = calibrate(trace, chain, mask, bounds)
            except (NotConverged, ServoFailed, RuntimeError) as exc:
                log.warning("recalibration failed: %s", exc)
                ex.on_recalibrated(arm.time, False)
                continue
            ex.on_recalibrated(arm.time, True)
            report = validate_recalibration(chain, result.chain, guarded, recovery.n_test, rng)
            validations.append(report.summary())
            ex.on_validated(arm.time, report.passed)
            if report.passed:
                chain = result.chain
                health_log.extend(engine.records)
                engine = Engine(chain, detection, graph)
            continue

        break

    health_log.extend(engine.records)
    completed = ex.done and ex.state is ExecState.NOMINAL
    if completed:
        ex._emit(arm.time, "mission_complete")
    return MissionOutcome(completed, ex.state, ex.log, chain, health_log, validations)


def write_mission_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_mission_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
