"""Scenario configuration: JSON schema, loading, and object builders."""

from __future__ import annotations

import copy
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .boed import ObjectiveWeights
from .calib import QpBounds
from .gp import KernelParams
from .kinematics import DhChain, make_mask, wam7
from .sim import FaultScript, NoiseModel, SimArm


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_pose = _obj(
    {
        "quat": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
        "pos": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
    },
    ["quat", "pos"],
)

_fault = _obj(
    {
        "time": _nonneg,
        "joint": {"type": "integer", "minimum": 1},
        "bias": _num,
        "kind": {"enum": ["encoder", "actuator"]},
    },
    ["time", "joint", "bias"],
)

_dh_row = _obj(
    {"phi": _num, "alpha": _num, "a": _num, "d": _num, "kind": {"enum": ["revolute", "prismatic"]}},
    ["phi", "alpha", "a", "d"],
)

SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "chain": {
            "oneOf": [
                {"enum": ["wam7"]},
                _obj(
                    {
                        "rows": {"type": "array", "items": _dh_row, "minItems": 1},
                        "base": _pose,
                        "tool": _pose,
                    },
                    ["rows"],
                ),
            ]
        },
        "true_delta": {"type": "object", "additionalProperties": _num},
        "fault_script": {"type": "array", "items": _fault},
        "noise": _obj(
            {
                "sigma_p": _nonneg,
                "sigma_q": _nonneg,
                "sigma_enc": _nonneg,
                "sigma_vel": _nonneg,
                "stream_sigma_p": _nonneg,
                "stream_sigma_q": _nonneg,
            }
        ),
        "servo": _obj({"pos_tol": _pos, "rot_tol": _pos}),
        "pool_size": {"type": "integer", "minimum": 1},
        "boed": _obj(
            {
                "iterations": {"type": "integer", "minimum": 1},
                "alpha1": _pos,
                "alpha2": _pos,
                "delta": _pos,
                "kernel": _obj(
                    {
                        "se_lengthscale": _pos,
                        "se_signal": _pos,
                        "se_noise": _nonneg,
                        "sphere_lengthscale": _pos,
                        "sphere_signal": _pos,
                        "product_scale": _pos,
                        "series_terms": {"type": "integer", "minimum": 1},
                        "observation_noise": _nonneg,
                    }
                ),
            }
        ),
        "qp_bounds": _obj({"angle": _pos, "length": _pos}),
        "mask": {
            "oneOf": [
                {"enum": ["joint_offsets", "all"]},
                {"type": "array", "items": {"type": "string"}, "minItems": 1},
            ]
        },
        "validation": _obj({"n_test": {"type": "integer", "minimum": 1}}),
        "monsid": _obj(
            {
                "joint_tol": _pos,
                "pos_tol": _pos,
                "rot_tol": _pos,
                "persistence": {"type": "integer", "minimum": 1},
                "duplicate_encoders": {"type": "boolean"},
                "n_joints": {"type": "integer", "minimum": 1},
                "duration": _pos,
                "rate": _pos,
                "slice_rate": _pos,
                "jitter": _nonneg,
                "amplitude": _nonneg,
                "dropouts": {
                    "type": "array",
                    "items": _obj(
                        {"channel": {"type": "string"}, "start": _num, "stop": _num},
                        ["channel", "start", "stop"],
                    ),
                },
            }
        ),
        "mission": _obj(
            {
                "steps": {
                    "type": "array",
                    "minItems": 1,
                    "items": _obj(
                        {"name": {"type": "string"}, "target": _pose, "duration": _pos},
                        ["name", "target"],
                    ),
                },
                "retry_limit": {"type": "integer", "minimum": 0},
                "pause_timeout": {"type": "integer", "minimum": 0},
                "max_fixable": _pos,
            }
        ),
    }
)


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    chain = build_chain(cfg)
    names = chain.param_names()
    for k in cfg.get("true_delta", {}):
        if k not in names:
            raise ConfigError(f"true_delta: unknown parameter {k!r}")
    mask = cfg.get("mask")
    if isinstance(mask, list):
        bad = [k for k in mask if k not in names]
        if bad:
            raise ConfigError(f"mask: unknown parameters {bad}")
    for ev in cfg.get("fault_script", []):
        if ev["joint"] > chain.n_joints:
            raise ConfigError(f"fault_script: joint {ev['joint']} out of range")
    times = [ev["time"] for ev in cfg.get("fault_script", [])]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ConfigError("fault_script: times must be nondecreasing")
    boed = cfg.get("boed", {})
    a1, a2 = boed.get("alpha1", 0.5), boed.get("alpha2", 0.5)
    if not (a1 < 1 and a2 < 1 and abs(a1 + a2 - 1) < 1e-12):
        raise ConfigError("boed: alpha1 and alpha2 must lie in (0, 1) and sum to 1")


def load(path, seed: int | None = None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return prepare(cfg, seed)


def prepare(cfg: dict, seed: int | None = None) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("scenario must be a JSON object")
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def builtin(name: str) -> dict:
    """A scenario shipped with the package (e.g. ``test1``)."""
    fname = name if name.endswith(".json") else name + ".json"
    text = resources.files("manip_recal.scenarios").joinpath(fname).read_text()
    return prepare(json.loads(text))


def builtin_names() -> list[str]:
    return sorted(
        Path(p.name).stem for p in resources.files("manip_recal.scenarios").iterdir() if p.name.endswith(".json")
    )


# builders ---------------------------------------------------------------------


def build_chain(cfg: dict) -> DhChain:
    c = cfg.get("chain", "wam7")
    return wam7() if c == "wam7" else DhChain.from_dict(c)


def build_noise(cfg: dict) -> NoiseModel:
    return NoiseModel(**cfg.get("noise", {}))


def true_delta_vector(cfg: dict, chain: DhChain) -> np.ndarray:
    names = chain.param_names()
    d = np.zeros(chain.n_params)
    for k, v in cfg.get("true_delta", {}).items():
        d[names.index(k)] = v
    return d


def fault_script(cfg: dict) -> FaultScript:
    return FaultScript.from_list(cfg.get("fault_script", []))


def ground_truth(cfg: dict, chain: DhChain) -> dict[str, float]:
    """Model-space parameter errors the scenario induces (nonzero entries only).

    Encoder-kind injections of ``b`` on joint ``j`` appear as ``phi_j = +b``;
    actuator-kind faults are invisible to static calibration.
    """
    d = true_delta_vector(cfg, chain)
    for ev in fault_script(cfg):
        if ev.kind == "encoder":
            d[ev.joint - 1] += ev.bias
    return {n: float(v) for n, v in zip(chain.param_names(), d) if v != 0}


def build_arm(cfg: dict, chain: DhChain | None = None, apply_faults: bool = False) -> SimArm:
    chain = chain or build_chain(cfg)
    servo = cfg.get("servo", {})
    arm = SimArm(
        chain,
        true_delta=true_delta_vector(cfg, chain),
        noise=build_noise(cfg),
        seed=cfg.get("seed", 0),
        servo_pos_tol=servo.get("pos_tol", 5e-4),
        servo_rot_tol=servo.get("rot_tol", math.radians(0.1)),
    )
    if apply_faults:
        for ev in fault_script(cfg):
            arm.inject(ev.joint, ev.bias, ev.kind)
    return arm


def build_weights(cfg: dict) -> ObjectiveWeights:
    b = cfg.get("boed", {})
    return ObjectiveWeights(alpha1=b.get("alpha1", 0.5), alpha2=b.get("alpha2", 0.5))


def build_kernel(cfg: dict) -> KernelParams:
    return KernelParams(**cfg.get("boed", {}).get("kernel", {}))


def build_mask(cfg: dict, chain: DhChain) -> np.ndarray:
    return make_mask(chain.n_joints, cfg.get("mask", "joint_offsets"))


def build_bounds(cfg: dict, mask, chain: DhChain) -> QpBounds:
    b = cfg.get("qp_bounds", {})
    return QpBounds.default(mask, chain.n_joints, b.get("angle", 0.8), b.get("length", 0.05))


def rng_for(cfg: dict, stream: int) -> np.random.Generator:
    """Independent generator per purpose, derived from the scenario seed."""
    return np.random.default_rng([cfg.get("seed", 0), stream])
