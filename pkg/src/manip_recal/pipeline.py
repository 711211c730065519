"""End-to-end runs shared by the command line and the test suites."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import scenario as sc
from .boed import BoedTrace, CandidatePool, iter_boed, run_boed
from .calib import CalibrationResult, NotConverged, UndefinedAccuracy, accuracy_metric, calibrate
from .executive import MissionOutcome, RecoveryConfig, SeverityPolicy, ValidationReport, run_mission, validate_recalibration
from .kinematics import DhChain
from .monsid import ComponentGraph, CoordinationResult, DetectionParams, Engine, HealthStatus, coordinate
from .sim import SimArm, sinusoid_trajectory


@dataclass
class CalibrationRun:
    trace: BoedTrace
    result: CalibrationResult
    validation: ValidationReport
    ground_truth: dict[str, float]
    accuracy: dict[str, float | None] = field(default_factory=dict)


def accuracies(result: CalibrationResult, truth: dict[str, float]) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for name, value in truth.items():
        try:
            out[name] = accuracy_metric(value, result.correction_of(name))
        except UndefinedAccuracy:
            out[name] = None
    return out


def build_pool(cfg: dict, chain: DhChain) -> CandidatePool:
    return CandidatePool.sample(chain, cfg.get("pool_size", 500), sc.rng_for(cfg, 1))


def run_calibration(cfg: dict) -> CalibrationRun:
    """Fault the arm, run the design loop, identify, validate.

    Raises :class:`NotConverged` from the identification step.
    """
    chain = sc.build_chain(cfg)
    arm = sc.build_arm(cfg, chain, apply_faults=True)
    pool = build_pool(cfg, chain)
    b = cfg.get("boed", {})
    trace = run_boed(arm, chain, pool, sc.build_weights(cfg), b.get("iterations", 38), sc.build_kernel(cfg), b.get("delta", 0.1))
    mask = sc.build_mask(cfg, chain)
    result = calibrate(trace, chain, mask, sc.build_bounds(cfg, mask, chain))
    n_test = cfg.get("validation", {}).get("n_test", 10)
    report = validate_recalibration(chain, result.chain, arm, n_test, sc.rng_for(cfg, 2))
    truth = sc.ground_truth(cfg, chain)
    return CalibrationRun(trace, result, report, truth, accuracies(result, truth))


@dataclass
class AdaptiveOutcome:
    result: CalibrationResult | None
    samples: int
    settled: bool
    history: list[np.ndarray] = field(default_factory=list)


def adaptive_calibration(
    arm: SimArm,
    chain: DhChain,
    pool: CandidatePool,
    mask,
    bounds=None,
    min_samples: int = 15,
    max_samples: int = 40,
    tol: float = 2e-3,
    patience: int = 2,
    **boed_kw,
) -> AdaptiveOutcome:
    """Sample until the identified correction stops moving.

    From ``min_samples`` on, identify after every new measurement; stop once
    the largest change in the free correction stays below ``tol`` for
    ``patience`` consecutive samples. ``settled`` is False when
    ``max_samples`` is reached first.
    """
    history: list[np.ndarray] = []
    result = None
    calm = 0
    n = 0
    for trace in iter_boed(arm, chain, pool, **boed_kw):
        n = len(trace)
        if n < min_samples:
            continue
        try:
            result = calibrate(trace, chain, mask, bounds)
        except NotConverged as exc:
            result = exc.result
        history.append(result.free_correction.copy())
        if len(history) > 1 and np.max(np.abs(history[-1] - history[-2])) < tol:
            calm += 1
            if calm >= patience:
                return AdaptiveOutcome(result, n, True, history)
        else:
            calm = 0
        if n >= max_samples:
            break
    return AdaptiveOutcome(result, n, False, history)


@dataclass
class DetectionRun:
    engine: Engine
    coordination: CoordinationResult
    statuses: list[HealthStatus]

    def engine_state(self) -> dict:
        state = self.engine.state_message()
        state["coordination"] = self.coordination.to_dict()
        return state


def detection_params(cfg: dict) -> DetectionParams:
    m = cfg.get("monsid", {})
    keys = ("joint_tol", "pos_tol", "rot_tol", "persistence")
    return DetectionParams(**{k: m[k] for k in keys if k in m})


def run_detection(cfg: dict) -> DetectionRun:
    """Stream scripted telemetry through the coordinator and the engine."""
    chain = sc.build_chain(cfg)
    m = cfg.get("monsid", {})
    if m.get("duplicate_encoders"):
        raise sc.ConfigError("monsid: the simulator does not stream duplicate encoders")
    arm = sc.build_arm(cfg, chain)
    traj = sinusoid_trajectory(np.zeros(chain.n_joints), m.get("amplitude", 0.3))
    tel = arm.stream_telemetry(traj, m.get("duration", 10.0), sc.fault_script(cfg), m.get("rate", 500.0), m.get("jitter", 0.0))
    streams = tel.streams()
    for d in m.get("dropouts", []):
        if d["channel"] not in streams:
            raise sc.ConfigError(f"monsid: unknown channel {d['channel']!r}")
        streams[d["channel"]] = streams[d["channel"]].without(d["start"], d["stop"])
    coord = coordinate(streams, m.get("slice_rate", 50.0))
    engine = Engine(chain, detection_params(cfg), ComponentGraph(chain.n_joints))
    engine.dropped = coord.dropped
    statuses = engine.run(coord.slices)
    return DetectionRun(engine, coord, statuses)


def run_mission_scenario(cfg: dict) -> MissionOutcome:
    chain = sc.build_chain(cfg)
    arm = sc.build_arm(cfg, chain)
    mis = cfg["mission"]
    b = cfg.get("boed", {})
    qb = cfg.get("qp_bounds", {})
    recovery = RecoveryConfig(
        pool_size=cfg.get("pool_size", 500),
        iterations=b.get("iterations", 38),
        weights=sc.build_weights(cfg),
        kernel=sc.build_kernel(cfg),
        delta=b.get("delta", 0.1),
        angle_bound=qb.get("angle", 0.8),
        length_bound=qb.get("length", 0.05),
        n_test=cfg.get("validation", {}).get("n_test", 10),
    )
    policy = SeverityPolicy(retry_limit=mis.get("retry_limit", 3), max_fixable=mis.get("max_fixable", 0.8))
    return run_mission(
        arm,
        chain,
        mis["steps"],
        sc.fault_script(cfg),
        policy,
        detection_params(cfg),
        recovery,
        sc.rng_for(cfg, 1),
        mis.get("pause_timeout", 50),
    )
