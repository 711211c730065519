"""Slice-by-slice consistency checking and fault identification.

Each joint node carries three values: the command pushed through a
first-order-lag actuator model, the encoder reading, and the integral of the
measured joint velocity. The end-effector node compares forward kinematics of
the encoder readings with the camera pose. Residuals above tolerance for
``persistence`` consecutive slices declare a fault, which is matched against
the static ambiguity groups.

Velocity inputs feed only the reverse path. A velocity fault is visible, but
the engine treats it as a modeling input rather than a fault hypothesis, so
it never appears in an ambiguity group.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .. import geometry as geo
from ..kinematics import DhChain, forward_kinematics
from .coordinator import TimeSlice
from .graph import EE_NODE, AmbiguityGroup, ComponentGraph, analyze_ambiguity_groups, joint_node


class NoMatch(LookupError):
    """Observed inconsistency set matches no single-fault signature."""


class Health(str, Enum):
    HEALTHY = "HEALTHY"
    SUSPECT = "SUSPECT"
    FAULTY = "FAULTY"


@dataclass(frozen=True)
class DetectionParams:
    joint_tol: float = 0.01
    pos_tol: float = 5e-3
    rot_tol: float = math.radians(1.0)
    persistence: int = 5
    actuator_tau: float = 0.05

    def __post_init__(self):
        if min(self.joint_tol, self.pos_tol, self.rot_tol) <= 0:
            raise ValueError("tolerances must be > 0")
        if int(self.persistence) != self.persistence or self.persistence < 1:
            raise ValueError("persistence must be an integer >= 1")
        if self.actuator_tau <= 0:
            raise ValueError("actuator_tau must be > 0")


@dataclass(frozen=True)
class NodeTable:
    timestamp: float
    joints: dict[str, dict[str, float]]
    ee: dict[str, geo.Pose]


@dataclass
class _Integrators:
    t: float | None = None
    fwd: np.ndarray | None = None
    rev: np.ndarray | None = None
    cmd: np.ndarray | None = None
    vel: np.ndarray | None = None


def propagate(graph: ComponentGraph, chain: DhChain, sl: TimeSlice, st: _Integrators, tau: float) -> NodeTable:
    """Fill every node's value table for one slice (updates ``st``)."""
    pos = np.asarray(sl.joint_positions, dtype=float)
    cmd = np.asarray(sl.joint_commands, dtype=float)
    vel = np.asarray(sl.joint_velocities, dtype=float)
    if st.t is None:
        fwd = pos.copy()
        rev = pos.copy()
    else:
        dt = sl.timestamp - st.t
        if dt <= 0:
            raise ValueError("slices must have increasing timestamps")
        # first-order-hold discretization of the lag 1/(tau s + 1)
        a = math.exp(-dt / tau)
        s = (cmd - st.cmd) / dt
        fwd = cmd - tau * s + (st.fwd - st.cmd + tau * s) * a
        rev = st.rev + 0.5 * (st.vel + vel) * dt
    st.t, st.fwd, st.rev, st.cmd, st.vel = sl.timestamp, fwd, rev, cmd, vel

    joints = {}
    for j in range(graph.n_joints):
        vals = {"fwd": float(fwd[j]), "pos": float(pos[j]), "rev": float(rev[j])}
        if graph.duplicate_encoders:
            if sl.joint_positions2 is None:
                raise ValueError("graph expects duplicate encoder readings")
            vals["pos2"] = float(sl.joint_positions2[j])
        joints[joint_node(j + 1)] = vals
    ee = {"fk": forward_kinematics(chain, pos), "cam": sl.ee_pose}
    return NodeTable(sl.timestamp, joints, ee)


@dataclass(frozen=True)
class Consistency:
    flagged: frozenset[str]
    declared: frozenset[str]
    magnitudes: dict[str, float]


def check_consistency(
    graph: ComponentGraph, table: NodeTable, params: DetectionParams, counters: dict[str, int]
) -> Consistency:
    """Flag residuals over tolerance; ``declared`` holds those flagged for
    ``persistence`` consecutive slices (``counters`` is updated in place)."""
    flagged = set()
    mags: dict[str, float] = {}
    for r in graph.residuals:
        if r.node == EE_NODE:
            fk, cam = table.ee[r.a], table.ee[r.b]
            dp = float(np.linalg.norm(fk.pos - cam.pos))
            dq = geo.geodesic_distance(fk.quat, cam.quat)
            mags[r.id + ":pos"] = dp
            mags[r.id + ":rot"] = dq
            bad = dp > params.pos_tol * r.scale or dq > params.rot_tol * r.scale
        else:
            v = table.joints[r.node]
            d = abs(v[r.a] - v[r.b])
            mags[r.id] = d
            bad = d > params.joint_tol * r.scale
        if bad:
            flagged.add(r.id)
            counters[r.id] = counters.get(r.id, 0) + 1
        else:
            counters[r.id] = 0
    declared = frozenset(k for k in flagged if counters[k] >= params.persistence)
    return Consistency(frozenset(flagged), declared, mags)


@dataclass(frozen=True)
class Identification:
    groups: tuple[AmbiguityGroup, ...]

    @property
    def unique(self) -> bool:
        return len(self.groups) == 1

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(m for g in self.groups for m in g.members)


def identify(inconsistent, groups: list[AmbiguityGroup]) -> Identification:
    """Groups whose whole signature is observed, keeping the largest.

    Several equally large matches are all returned (reported as suspects).
    """
    S = frozenset(inconsistent)
    cands = [g for g in groups if g.signature and g.signature <= S]
    if not cands:
        raise NoMatch(f"no single-fault signature inside {sorted(S)}")
    best = max(len(g.signature) for g in cands)
    return Identification(tuple(g for g in cands if len(g.signature) == best))


@dataclass(frozen=True)
class HealthStatus:
    timestamp: float
    states: dict[str, Health]
    detection_time: float | None = None
    group_id: int | None = None
    group: tuple[str, ...] = ()
    declared: bool = False
    flagged: frozenset[str] = frozenset()

    @property
    def overall(self) -> Health:
        vals = set(self.states.values())
        if Health.FAULTY in vals:
            return Health.FAULTY
        if Health.SUSPECT in vals:
            return Health.SUSPECT
        return Health.HEALTHY

    def faulty(self) -> list[str]:
        return [k for k, v in self.states.items() if v is Health.FAULTY]

    def suspects(self) -> list[str]:
        return [k for k, v in self.states.items() if v is Health.SUSPECT]


@dataclass
class Engine:
    """Single-consumer detection engine; latches a declared fault until reset."""

    chain: DhChain
    params: DetectionParams = field(default_factory=DetectionParams)
    graph: ComponentGraph = field(default_factory=ComponentGraph)

    def __post_init__(self):
        if self.graph.n_joints != self.chain.n_joints:
            raise ValueError("graph and chain disagree on joint count")
        self.groups = analyze_ambiguity_groups(self.graph)
        self.reset()

    def reset(self) -> None:
        self._integ = _Integrators()
        self._counters: dict[str, int] = {}
        self._latched: HealthStatus | None = None
        self._prev_overall = Health.HEALTHY
        self.slices = 0
        self.dropped = 0
        self.declarations = 0
        self.records: list[dict] = []
        self.last: HealthStatus | None = None

    def _healthy(self) -> dict[str, Health]:
        return {e: Health.HEALTHY for e in self.graph.isolatable}

    def step(self, sl: TimeSlice) -> HealthStatus:
        table = propagate(self.graph, self.chain, sl, self._integ, self.params.actuator_tau)
        cons = check_consistency(self.graph, table, self.params, self._counters)
        self.slices += 1
        if self._latched is not None:
            status = HealthStatus(**{**self._latched.__dict__, "timestamp": sl.timestamp, "flagged": cons.flagged})
        elif cons.declared:
            status = self._declare(sl.timestamp, cons)
        else:
            states = self._healthy()
            for g in self.groups:
                if g.signature & cons.flagged:
                    for m in g.members:
                        states[m] = Health.SUSPECT
            status = HealthStatus(sl.timestamp, states, flagged=cons.flagged)
            overall = status.overall
            if overall is not self._prev_overall:
                event = "suspect" if overall is Health.SUSPECT else "cleared"
                self._record(sl.timestamp, event, status.suspects(), None, cons)
            self._prev_overall = overall
        self.last = status
        return status

    def _declare(self, t: float, cons: Consistency) -> HealthStatus:
        states = self._healthy()
        self.declarations += 1
        try:
            ident = identify(cons.flagged, self.groups)
        except NoMatch:
            states = {e: Health.SUSPECT for e in states}
            status = HealthStatus(t, states, t, None, (), True, cons.flagged)
            self._record(t, "no_match", list(states), None, cons)
        else:
            mark = Health.FAULTY if ident.unique else Health.SUSPECT
            for m in ident.members:
                states[m] = mark
            gid = ident.groups[0].id if ident.unique else None
            status = HealthStatus(t, states, t, gid, ident.members, True, cons.flagged)
            self._record(t, "faulty" if ident.unique else "ambiguous", list(ident.members), gid, cons)
        self._latched = status
        self._prev_overall = status.overall
        return status

    def _record(self, t, event, elements, gid, cons: Consistency) -> None:
        self.records.append(
            {
                "t": round(float(t), 9),
                "event": event,
                "elements": list(elements),
                "group": gid,
                "inconsistent": sorted(cons.flagged),
                "magnitudes": {k: v for k, v in sorted(cons.magnitudes.items()) if _residual_of(k) in cons.flagged},
            }
        )

    def run(self, slices) -> list[HealthStatus]:
        return [self.step(s) for s in slices]

    def state_message(self) -> dict:
        last = self.last
        return {
            "slices_processed": self.slices,
            "slices_dropped": self.dropped,
            "declarations": self.declarations,
            "overall": (last.overall if last else Health.HEALTHY).value,
            "faulty": last.faulty() if last else [],
            "suspects": last.suspects() if last else [],
            "group": last.group_id if last else None,
            "t": last.timestamp if last else None,
        }


def _residual_of(key: str) -> str:
    # pose residuals report ":pos" and ":rot" magnitudes separately
    return key.rsplit(":", 1)[0] if key.endswith((":pos", ":rot")) else key


def write_health_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_health_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
