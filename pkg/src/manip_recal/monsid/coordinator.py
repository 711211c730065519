"""Align independent telemetry streams into 50 Hz time slices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose
from ..sim import CHANNELS, Stream


@dataclass(frozen=True, eq=False)
class TimeSlice:
    timestamp: float
    joint_commands: np.ndarray
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    ee_pose: Pose
    joint_positions2: np.ndarray | None = None


@dataclass
class CoordinationResult:
    slices: list[TimeSlice]
    ticks: int
    dropped: int
    dropped_by_channel: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "slices": len(self.slices),
            "dropped": self.dropped,
            "dropped_by_channel": dict(self.dropped_by_channel),
        }


def _nearest_in_window(t: np.ndarray, ticks: np.ndarray, half: float) -> np.ndarray:
    """Index of the message nearest each tick within ``[T - half, T + half)``; -1 if none."""
    lo = np.searchsorted(t, ticks - half, side="left")
    hi = np.searchsorted(t, ticks + half, side="left")
    out = np.full(len(ticks), -1)
    for k, (a, b) in enumerate(zip(lo, hi)):
        if b > a:
            # argmin picks the earlier message on exact ties
            out[k] = a + int(np.argmin(np.abs(t[a:b] - ticks[k])))
    return out


def coordinate(streams: dict[str, Stream], rate: float = 50.0, extra: tuple[str, ...] = ()) -> CoordinationResult:
    """Down-sample the four channels onto a common tick grid.

    Ticks start at the first timestamp every channel has reached and are
    spaced ``1/rate`` apart up to the last common timestamp. Each tick takes,
    per channel, the nearest message in its half-open window of one period;
    a tick with any channel empty is dropped and counted.
    """
    names = tuple(CHANNELS) + tuple(extra)
    missing = [c for c in names if c not in streams]
    if missing:
        raise KeyError(f"missing channels: {missing}")
    for c in names:
        if np.any(np.diff(streams[c].t) < 0):
            raise ValueError(f"channel {c} is not monotonically timestamped")
    if any(len(streams[c]) == 0 for c in names):
        return CoordinationResult([], 0, 0, {c: 0 for c in names})

    period = 1.0 / rate
    t0 = max(float(streams[c].t[0]) for c in names)
    t1 = min(float(streams[c].t[-1]) for c in names)
    n = int(np.floor((t1 - t0) / period + 1e-9)) + 1 if t1 >= t0 else 0
    ticks = t0 + period * np.arange(n)

    picks = {c: _nearest_in_window(streams[c].t, ticks, period / 2) for c in names}
    dropped_by = {c: int(np.sum(picks[c] < 0)) for c in names}
    ok = np.all([picks[c] >= 0 for c in names], axis=0) if n else np.zeros(0, bool)

    slices = []
    for k in np.flatnonzero(ok):
        v = {c: streams[c].values[picks[c][k]] for c in names}
        slices.append(
            TimeSlice(
                float(ticks[k]),
                np.array(v["joint_commands"]),
                np.array(v["joint_positions"]),
                np.array(v["joint_velocities"]),
                Pose.from_vector(v["ee_pose"]),
                np.array(v["joint_positions2"]) if "joint_positions2" in v else None,
            )
        )
    return CoordinationResult(slices, n, int(n - ok.sum()), dropped_by)
