"""Simulated 7-DoF arm: hidden true kinematics, injected joint faults,
noisy marker measurements, visual-servo emulation and 500 Hz telemetry.

Fault conventions
-----------------
``encoder_biases[j]`` is *reading minus physical angle*. The joint
controller closes its loop on the encoder, so an encoder fault leaves the
reading on the commanded value and displaces the physical joint by the
negative bias. The testbed-style "encoder" injection of ``b`` (joint moved,
feedback unchanged) is therefore an encoder bias of ``-b`` and looks, to the
model, exactly like a joint-offset error ``dphi_j = +b``.

An "actuator" injection displaces the physical joint and the reading
together (the encoder is honest; the drive is not).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import geometry as geo
from .boed import ServoFailed
from .geometry import Pose
from .kinematics import DhChain, NoConvergence, fk_vectors, forward_kinematics, solve_ik

CHANNELS = ("joint_commands", "joint_positions", "joint_velocities", "ee_pose")


@dataclass(frozen=True)
class NoiseModel:
    sigma_p: float = 1e-3
    sigma_q: float = math.radians(0.5)
    sigma_enc: float = 5e-4
    sigma_vel: float = 0.0
    # end-effector pose channel of the telemetry stream (a tracking sensor,
    # separate from the calibration marker measurement)
    stream_sigma_p: float = 5e-4
    stream_sigma_q: float = math.radians(0.1)


@dataclass(frozen=True)
class FaultEvent:
    time: float
    joint: int  # 1-based
    bias: float
    kind: str = "encoder"

    def __post_init__(self):
        if self.kind not in ("encoder", "actuator"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.joint < 1:
            raise ValueError("joint index is 1-based")


@dataclass(frozen=True)
class FaultScript:
    events: tuple[FaultEvent, ...] = ()

    def __post_init__(self):
        ev = tuple(self.events)
        times = [e.time for e in ev]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("fault times must be nondecreasing")
        object.__setattr__(self, "events", ev)

    @classmethod
    def from_list(cls, items) -> "FaultScript":
        return cls(tuple(FaultEvent(**d) for d in items))

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)


@dataclass
class Stream:
    name: str
    t: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.t)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"v{i + 1}" for i in range(self.values.shape[1])])
            for t, row in zip(self.t, self.values):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path, name: str | None = None) -> "Stream":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        return cls(name or str(path), data[:, 0], data[:, 1:])

    def without(self, start: float, stop: float) -> "Stream":
        """Copy with messages in ``[start, stop)`` removed (dropout)."""
        keep = (self.t < start) | (self.t >= stop)
        return Stream(self.name, self.t[keep], self.values[keep])


@dataclass
class Telemetry:
    t: np.ndarray
    commands: np.ndarray
    encoders: np.ndarray
    velocities: np.ndarray
    ee_pose: np.ndarray
    physical: np.ndarray
    jitter: dict[str, np.ndarray] = field(default_factory=dict)

    def streams(self) -> dict[str, Stream]:
        vals = (self.commands, self.encoders, self.velocities, self.ee_pose)
        out = {}
        for name, v in zip(CHANNELS, vals):
            t = self.t + self.jitter.get(name, 0.0)
            order = np.argsort(t, kind="stable")
            out[name] = Stream(name, t[order], v[order])
        return out


def sinusoid_trajectory(center, amplitude: float = 0.3, base_freq: float = 0.1, t0: float = 0.0) -> Callable:
    """Joint-space sinusoids with a distinct frequency per joint.

    Starts at ``center`` with zero phase so a resting arm can follow it.
    """
    center = np.asarray(center, dtype=float)
    freqs = base_freq * (1.0 + 0.37 * np.arange(center.size))

    def traj(t):
        t = np.asarray(t, dtype=float)[..., None]
        return center + amplitude * np.sin(2.0 * np.pi * freqs * (t - t0))

    return traj


def min_jerk_trajectory(q0, q1, t_start: float, duration: float) -> Callable:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)

    def traj(t):
        s = np.clip((np.asarray(t, dtype=float)[..., None] - t_start) / duration, 0.0, 1.0)
        return q0 + (q1 - q0) * (10 * s**3 - 15 * s**4 + 6 * s**5)

    return traj


def hold_trajectory(q) -> Callable:
    q = np.asarray(q, dtype=float)
    return lambda t: np.broadcast_to(q, np.shape(t) + q.shape).copy()


def marker_noise(rng: np.random.Generator, sigma_p: float, sigma_q: float, size: int):
    """Position offsets and left-multiplied rotation perturbations."""
    dp = rng.normal(0.0, sigma_p, size=(size, 3)) if sigma_p > 0 else np.zeros((size, 3))
    if sigma_q > 0:
        angle = np.abs(rng.normal(0.0, sigma_q, size=size))
        axis = geo.normalize(rng.standard_normal((size, 3)))
        dq = geo.from_axis_angle(axis, angle)
    else:
        dq = np.tile(geo.IDENTITY_QUAT, (size, 1))
    return dp, dq


def _ramp(t, start, length):
    if length <= 0:
        return (np.asarray(t) >= start).astype(float)
    return np.clip((np.asarray(t, dtype=float) - start) / length, 0.0, 1.0)


class SimArm:
    """Ground-truth arm. Algorithms should only use :meth:`servo_to`,
    :meth:`read_encoders`, :meth:`measure_marker_pose` and telemetry."""

    def __init__(
        self,
        nominal: DhChain,
        true_delta=None,
        encoder_biases=None,
        noise: NoiseModel = NoiseModel(),
        seed: int = 0,
        servo_pos_tol: float = 5e-4,
        servo_rot_tol: float = math.radians(0.1),
        actuator_tau: float = 0.05,
        fault_ramp: float = 0.02,
    ):
        n = nominal.n_joints
        self.nominal = nominal
        self.noise = noise
        self.servo_pos_tol = servo_pos_tol
        self.servo_rot_tol = servo_rot_tol
        self.actuator_tau = actuator_tau
        self.fault_ramp = fault_ramp
        self.rng = np.random.default_rng(seed)
        delta = np.zeros(nominal.n_params) if true_delta is None else np.asarray(true_delta, dtype=float)
        self._true_chain = nominal.perturbed(delta)
        self._enc_bias = np.zeros(n) if encoder_biases is None else np.array(encoder_biases, dtype=float)
        self._act_offset = np.zeros(n)
        self._events: list[FaultEvent] = []
        self.time = 0.0
        self.set_joints(np.zeros(n))

    @property
    def n_joints(self) -> int:
        return self.nominal.n_joints

    # fault bookkeeping ----------------------------------------------------

    def _offsets(self, t):
        """(encoder bias, actuator offset) arrays at time(s) ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        e = np.tile(self._enc_bias, (t.size, 1))
        a = np.tile(self._act_offset, (t.size, 1))
        for ev in self._events:
            r = _ramp(t, ev.time, self.fault_ramp) * ev.bias
            if ev.kind == "encoder":
                e[:, ev.joint - 1] -= r
            else:
                a[:, ev.joint - 1] += r
        return e, a

    def _physical_from_lag(self, lag, t):
        e, a = self._offsets(t)
        return lag + a[0] - e[0]

    def schedule(self, script: FaultScript) -> None:
        for ev in script:
            if ev not in self._events:
                if ev.joint > self.n_joints:
                    raise ValueError(f"joint {ev.joint} out of range")
                self._events.append(ev)

    def inject(self, joint: int, bias: float, kind: str = "encoder") -> None:
        """Apply a fault immediately (fully ramped at the current time)."""
        ev = FaultEvent(self.time - self.fault_ramp, joint, bias, kind)
        self.schedule(FaultScript((ev,)))
        self.set_joints(self._physical_from_lag(self._lag, self.time))

    # measurements -----------------------------------------------------------

    def read_encoders(self) -> np.ndarray:
        e, _ = self._offsets(self.time)
        noise = self.rng.normal(0.0, self.noise.sigma_enc, self.n_joints) if self.noise.sigma_enc > 0 else 0.0
        return self._theta + e[0] + noise

    def true_pose(self) -> Pose:
        return forward_kinematics(self._true_chain, self._theta)

    def measure_marker_pose(self) -> Pose:
        pose = self.true_pose()
        dp, dq = marker_noise(self.rng, self.noise.sigma_p, self.noise.sigma_q, 1)
        return Pose(geo.multiply(dq[0], pose.quat), pose.pos + dp[0])

    def servo_to(self, target: Pose, theta0=None) -> np.ndarray:
        """Close the loop on the marker until the physical end effector sits
        at ``target``; returns the encoder reading there.

        ``theta0`` is a seed in encoder coordinates.
        """
        e, _ = self._offsets(self.time)
        seed = self.read_encoders() if theta0 is None else np.asarray(theta0, dtype=float)
        try:
            theta = solve_ik(
                self._true_chain,
                target,
                seed - e[0],
                pos_tol=self.servo_pos_tol,
                rot_tol=self.servo_rot_tol,
            )
        except NoConvergence as exc:
            raise ServoFailed(str(exc)) from exc
        self.set_joints(theta)
        return self.read_encoders()

    def set_joints(self, physical) -> None:
        """Teleport the physical joints (arm at rest there)."""
        self._theta = np.array(physical, dtype=float)
        e, a = self._offsets(self.time)
        self._lag = self._theta - a[0] + e[0]
        self._prev_theta = self._theta.copy()

    def idle(self, dt: float) -> None:
        """Let time pass with the arm at rest."""
        self.time += float(dt)
        self.set_joints(self._theta)

    def move_to_reading(self, reading) -> None:
        """Bring the arm to rest where the (noise-free) encoder reads ``reading``."""
        e, _ = self._offsets(self.time)
        self.set_joints(np.asarray(reading, dtype=float) - e[0])

    @property
    def commanded_reading(self) -> np.ndarray:
        """Noise-free joint reading the controller currently holds."""
        _, a = self._offsets(self.time)
        return self._lag + a[0]

    # telemetry ----------------------------------------------------------------

    def stream_telemetry(
        self,
        trajectory: Callable,
        duration: float,
        script: FaultScript = FaultScript(),
        rate: float = 500.0,
        jitter: float = 0.0,
    ) -> Telemetry:
        """Advance the arm along ``trajectory`` and record 4 channels.

        Samples are at ``time + k / rate`` for ``k = 0..round(duration*rate)-1``;
        the arm ends at ``time + duration``, where the next call's first sample
        lands, so consecutive calls tile time without overlap.
        """
        self.schedule(script)
        dt = 1.0 / rate
        m = int(round(duration * rate))
        if m < 1:
            raise ValueError("duration shorter than one sample")
        t = self.time + dt * np.arange(m + 1)
        cmd = np.asarray(trajectory(t), dtype=float).reshape(m + 1, self.n_joints)

        a_coef = math.exp(-dt / self.actuator_tau)
        tau = self.actuator_tau
        lag = np.empty_like(cmd)
        lag[0] = self._lag
        for k in range(1, m + 1):
            u, u_prev = cmd[k], cmd[k - 1]
            s = (u - u_prev) / dt
            lag[k] = u - tau * s + (lag[k - 1] - u_prev + tau * s) * a_coef

        e, a = self._offsets(t)
        physical = lag + a - e
        vel = np.diff(np.vstack([self._prev_theta, physical]), axis=0) / dt
        if self.noise.sigma_vel > 0:
            vel = vel + self.rng.normal(0.0, self.noise.sigma_vel, vel.shape)
        enc = lag + a
        if self.noise.sigma_enc > 0:
            enc = enc + self.rng.normal(0.0, self.noise.sigma_enc, enc.shape)

        self._lag = lag[m].copy()
        self._theta = physical[m].copy()
        self._prev_theta = physical[m - 1].copy()
        self.time = float(t[m])

        t, cmd, physical, vel, enc = t[:m], cmd[:m], physical[:m], vel[:m], enc[:m]
        ee = fk_vectors(self._true_chain, physical)
        dp, dq = marker_noise(self.rng, self.noise.stream_sigma_p, self.noise.stream_sigma_q, m)
        ee[:, :3] += dp
        ee[:, 3:] = geo.canonical(geo.multiply(dq, ee[:, 3:]))

        jit = {}
        if jitter > 0:
            jit = {name: self.rng.uniform(-jitter, jitter, m) for name in CHANNELS}

        return Telemetry(t, cmd, enc, vel, ee, physical, jit)

    def rewind_to(self, telemetry: Telemetry, t: float) -> None:
        """Stop the arm at the telemetry sample nearest ``t`` (halt)."""
        k = int(np.argmin(np.abs(telemetry.t - t)))
        self.time = float(telemetry.t[k])
        self.set_joints(telemetry.physical[k])


def fault_equivalent_delta(nominal: DhChain, encoder_biases) -> np.ndarray:
    """Flat DH perturbation that mimics the given encoder biases."""
    d = np.zeros(nominal.n_params)
    d[: nominal.n_joints] = -np.asarray(encoder_biases, dtype=float)
    return d
