"""Component graph of the arm and static ambiguity-group analysis.

Every measured or predicted quantity is written as a linear combination of
per-element fault symbols. A single fault in element ``x`` makes a residual
(the comparison of two values at one node) inconsistent exactly when the two
values carry different coefficients for ``x``. Elements whose inconsistency
signatures coincide cannot be told apart and form an ambiguity group.

Model per joint ``j`` (deviations from nominal):

    physical  P_j  = act_j - enc_j          (loop closed on the feedback encoder)
    forward   fwd_j = cmd_j                 (command through the actuator model)
    encoder   pos_j = P_j + enc_j
    duplicate pos2_j = P_j + enc2_j
    reverse   rev_j = P_j + vel_j           (integrated velocity)

End effector: ``fk = FK(pos)``, ``cam = FK_true(P) + kin + ee``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

Expr = dict  # element id -> coefficient

WAM_ACTUATORS = (
    "Shoulder Joint 1",
    "Shoulder Joint 2",
    "Shoulder Joint 3",
    "Elbow Joint 4",
    "Wrist Joint 5",
    "Wrist Joint 6",
    "Wrist Joint 7",
)

KINEMATICS = "Kinematics"
EE_SENSOR = "EE_Pose"
EE_NODE = "EE"


def cmd_id(j: int) -> str:
    return f"J{j}_Angle_Cmd"


def enc_id(j: int) -> str:
    return f"J{j}_Angle_Pos"


def enc2_id(j: int) -> str:
    return f"J{j}_Angle_Pos2"


def vel_id(j: int) -> str:
    return f"J{j}_Angle_Vel"


def joint_node(j: int) -> str:
    return f"J{j}_Angle"


@dataclass(frozen=True)
class Element:
    id: str
    kind: str  # command | actuator | encoder | encoder2 | velocity | kinematics | ee_sensor
    joint: int | None = None
    isolatable: bool = True


@dataclass(frozen=True)
class Residual:
    """Comparison of two values at one node."""

    node: str
    a: str
    b: str
    # multiplies the node's base tolerance
    scale: float = 1.0

    @property
    def id(self) -> str:
        return f"{self.node}:{self.a}-{self.b}"


@dataclass(frozen=True)
class AmbiguityGroup:
    id: int
    members: tuple[str, ...]
    signature: frozenset[str]

    def to_dict(self) -> dict:
        return {"id": self.id, "members": list(self.members), "signature": sorted(self.signature)}


def _add(*exprs: Expr) -> Expr:
    out: Expr = {}
    for e in exprs:
        for k, v in e.items():
            out[k] = out.get(k, 0) + v
    return {k: v for k, v in out.items() if v != 0}


@dataclass
class ComponentGraph:
    n_joints: int = 7
    duplicate_encoders: bool = False
    elements: list[Element] = field(init=False)
    nodes: dict[str, dict[str, Expr]] = field(init=False)
    residuals: list[Residual] = field(init=False)

    def __post_init__(self):
        if self.n_joints < 1:
            raise ValueError("need at least one joint")
        n = self.n_joints
        els: list[Element] = []
        nodes: dict[str, dict[str, Expr]] = {}
        fk: Expr = {}
        cam: Expr = {}
        for j in range(1, n + 1):
            act = WAM_ACTUATORS[j - 1] if n == 7 else f"Joint {j}"
            els += [
                Element(cmd_id(j), "command", j),
                Element(act, "actuator", j),
                Element(enc_id(j), "encoder", j),
            ]
            if self.duplicate_encoders:
                els.append(Element(enc2_id(j), "encoder2", j))
            # velocity faults only ever reach the reverse path; the engine
            # does not isolate them (see module docstring of engine)
            els.append(Element(vel_id(j), "velocity", j, isolatable=False))

            P = {act: 1, enc_id(j): -1}
            values = {
                "fwd": {cmd_id(j): 1},
                "pos": _add(P, {enc_id(j): 1}),
                "rev": _add(P, {vel_id(j): 1}),
            }
            if self.duplicate_encoders:
                values["pos2"] = _add(P, {enc2_id(j): 1})
            nodes[joint_node(j)] = values
            fk = _add(fk, values["pos"])
            cam = _add(cam, P)
        els += [Element(KINEMATICS, "kinematics"), Element(EE_SENSOR, "ee_sensor")]
        nodes[EE_NODE] = {"fk": fk, "cam": _add(cam, {KINEMATICS: 1, EE_SENSOR: 1})}

        residuals = []
        for node, values in nodes.items():
            for a, b in combinations(values, 2):
                scale = 2.0 if "rev" in (a, b) else 1.0
                residuals.append(Residual(node, a, b, scale))
        self.elements = els
        self.nodes = nodes
        self.residuals = residuals

    @property
    def element_ids(self) -> list[str]:
        return [e.id for e in self.elements]

    @property
    def isolatable(self) -> list[str]:
        return [e.id for e in self.elements if e.isolatable]

    def element(self, eid: str) -> Element:
        for e in self.elements:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def residual_ids(self) -> list[str]:
        return [r.id for r in self.residuals]

    def signature(self, element: str) -> frozenset[str]:
        """Residuals a single fault in ``element`` renders inconsistent."""
        sig = set()
        for r in self.residuals:
            va = self.nodes[r.node][r.a].get(element, 0)
            vb = self.nodes[r.node][r.b].get(element, 0)
            if va != vb:
                sig.add(r.id)
        return frozenset(sig)

    def to_dict(self) -> dict:
        return {"n_joints": self.n_joints, "duplicate_encoders": self.duplicate_encoders}

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentGraph":
        return cls(int(d.get("n_joints", 7)), bool(d.get("duplicate_encoders", False)))


def analyze_ambiguity_groups(graph: ComponentGraph) -> list[AmbiguityGroup]:
    """Partition the isolatable elements by identical fault signature."""
    by_sig: dict[frozenset, list[str]] = {}
    for eid in graph.isolatable:
        by_sig.setdefault(graph.signature(eid), []).append(eid)
    return [AmbiguityGroup(i, tuple(m), sig) for i, (sig, m) in enumerate(by_sig.items())]


def format_group_table(groups: list[AmbiguityGroup]) -> str:
    lines = [f"{'id':>3}  {'members':<44}  signature"]
    for g in groups:
        lines.append(f"{g.id:>3}  {', '.join(g.members):<44}  {', '.join(sorted(g.signature))}")
    return "\n".join(lines)
