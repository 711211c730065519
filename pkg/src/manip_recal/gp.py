"""Gaussian-process regression on S^3 x R^3.

The rotation part uses the heat (squared-exponential) kernel of the
3-sphere written as a Gegenbauer series in the geodesic distance; the
position part uses the ordinary SE kernel. The two are multiplied.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import geometry as geo
from .geometry import Pose

log = logging.getLogger(__name__)


class SingularGram(np.linalg.LinAlgError):
    """Gram matrix not factorizable even after the maximum jitter."""


@dataclass(frozen=True)
class KernelParams:
    se_lengthscale: float = 0.25
    se_signal: float = 1.0
    se_noise: float = 0.0
    sphere_lengthscale: float = 0.6
    sphere_signal: float = 1.0
    product_scale: float = 1.0
    series_terms: int = 12
    observation_noise: float = 1e-2

    def __post_init__(self):
        for name in ("se_lengthscale", "se_signal", "sphere_lengthscale", "sphere_signal", "product_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.se_noise < 0 or self.observation_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if int(self.series_terms) != self.series_terms or self.series_terms < 1:
            raise ValueError("series_terms must be an integer >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KernelParams":
        return cls(**d)


def gegenbauer1(n: int, t) -> np.ndarray:
    """``C_n^(1)(cos t)`` for ``t`` in ``[0, pi]``.

    Closed form ``sin((n+1) t) / sin t``; a second-order series is used
    within 1e-6 of either pole where the quotient is ill-conditioned.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    near0 = t < 1e-6
    nearpi = (np.pi - t) < 1e-6
    mid = ~(near0 | nearpi)
    out[mid] = np.sin((n + 1) * t[mid]) / np.sin(t[mid])
    k = n * (n + 2) / 6.0
    out[near0] = (n + 1) * (1.0 - k * t[near0] ** 2)
    e = np.pi - t[nearpi]
    out[nearpi] = (-1) ** n * (n + 1) * (1.0 - k * e**2)
    return out


def _sphere_weights(params: KernelParams) -> np.ndarray:
    # c_n = n + 1 (eigenspace weighting); damping exp(-kappa^2/2 n(n+2))
    n = np.arange(params.series_terms + 1)
    return (n + 1) * np.exp(-0.5 * params.sphere_lengthscale**2 * n * (n + 2))


def sphere_normalizer(params: KernelParams) -> float:
    """``C_inf``: the series value at distance zero."""
    n = np.arange(params.series_terms + 1)
    return float(np.sum(_sphere_weights(params) * (n + 1)))


def sphere_from_distance(d, params: KernelParams) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    w = _sphere_weights(params)
    acc = np.zeros_like(d)
    for n, wn in enumerate(w):
        acc += wn * gegenbauer1(n, d)
    return params.sphere_signal**2 * acc / sphere_normalizer(params)


def kernel_sphere(q1, q2, params: KernelParams):
    """Heat kernel on S^3 between unit quaternions (broadcasts)."""
    k = sphere_from_distance(geo.geodesic_distance(q1, q2), params)
    return float(k) if np.ndim(k) == 0 else k


def kernel_se(p1, p2, params: KernelParams, same_index=False):
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    r2 = np.sum((p1 - p2) ** 2, axis=-1)
    k = params.se_signal**2 * np.exp(-r2 / (2.0 * params.se_lengthscale**2))
    k = k + params.se_noise**2 * np.asarray(same_index, dtype=float)
    return float(k) if np.ndim(k) == 0 else k


def kernel_product(x1: Pose, x2: Pose, params: KernelParams, same_index: bool = False) -> float:
    return (
        params.product_scale**2
        * kernel_sphere(x1.quat, x2.quat, params)
        * kernel_se(x1.pos, x2.pos, params, same_index)
    )


def cross_kernel(Q1, P1, Q2, P2, params: KernelParams) -> np.ndarray:
    """Product-kernel matrix between two pose sets (distinct indices)."""
    ks = kernel_sphere(Q1[:, None, :], Q2[None, :, :], params)
    ke = kernel_se(P1[:, None, :], P2[None, :, :], params)
    return params.product_scale**2 * np.asarray(ks) * np.asarray(ke)


def gram(Q, P, params: KernelParams) -> np.ndarray:
    """Noise-free Gram matrix of one pose set (Kronecker term on the diagonal)."""
    K = cross_kernel(Q, P, Q, P, params)
    diag_extra = params.product_scale**2 * params.sphere_signal**2 * params.se_noise**2
    return K + diag_extra * np.eye(len(Q))


def prior_variance(params: KernelParams) -> float:
    return params.product_scale**2 * params.sphere_signal**2 * (params.se_signal**2 + params.se_noise**2)


def stable_cholesky(A: np.ndarray, start: float = 1e-10, stop: float = 1e-4):
    """Cholesky factor of ``A``, adding escalating diagonal jitter if needed.

    Returns ``(factor, jitter)``; ``jitter`` is the absolute amount added.
    """
    try:
        return cho_factor(A, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    tr = float(np.trace(A)) or 1.0
    rel = start
    while rel <= stop * (1 + 1e-12):
        jitter = rel * tr
        try:
            c = cho_factor(A + jitter * np.eye(len(A)), lower=True)
            log.info("Gram matrix needed jitter %.3g (%.0e x trace)", jitter, rel)
            return c, jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise SingularGram(f"Gram matrix of size {len(A)} not positive definite up to {stop:g} x trace jitter")


@dataclass(frozen=True, eq=False)
class GpModel:
    """Immutable GP snapshot; :meth:`add_observation` returns a new one."""

    params: KernelParams = field(default_factory=KernelParams)
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    outputs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prior_mean: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if not (len(q) == len(p) == len(y)):
            raise ValueError("inputs and outputs differ in length")
        object.__setattr__(self, "quats", q)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "outputs", y)

    @classmethod
    def from_data(cls, poses, ys, params: KernelParams | None = None, prior_mean: float = 0.0) -> "GpModel":
        poses = list(poses)
        return cls(
            params or KernelParams(),
            np.array([x.quat for x in poses]).reshape(-1, 4),
            np.array([x.pos for x in poses]).reshape(-1, 3),
            np.asarray(ys, dtype=float),
            prior_mean,
        )

    def __len__(self) -> int:
        return len(self.outputs)

    def add_observation(self, x: Pose, y: float) -> "GpModel":
        if not np.isfinite(y):
            raise ValueError("observation must be finite")
        return GpModel(
            self.params,
            np.vstack([self.quats, x.quat]),
            np.vstack([self.positions, x.pos]),
            np.append(self.outputs, y),
            self.prior_mean,
        )

    @cached_property
    def _factor(self):
        K = gram(self.quats, self.positions, self.params)
        K[np.diag_indices_from(K)] += self.params.observation_noise**2
        factor, jitter = stable_cholesky(K)
        alpha = cho_solve(factor, self.outputs - self.prior_mean)
        return factor, alpha, jitter

    @property
    def jitter(self) -> float:
        """Diagonal jitter the last factorization needed (0 when none)."""
        return self._factor[2] if len(self) else 0.0

    def predict(self, Q, P) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at a batch of poses."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        P = np.atleast_2d(np.asarray(P, dtype=float))
        var0 = np.full(len(Q), prior_variance(self.params))
        if len(self) == 0:
            return np.full(len(Q), self.prior_mean), var0
        factor, alpha, _ = self._factor
        Ks = cross_kernel(Q, P, self.quats, self.positions, self.params)
        mean = self.prior_mean + Ks @ alpha
        v = cho_solve(factor, Ks.T)
        var = var0 - np.sum(Ks * v.T, axis=1)
        return mean, np.maximum(var, 0.0)

    def posterior(self, x: Pose) -> tuple[float, float]:
        m, v = self.predict(x.quat[None], x.pos[None])
        return float(m[0]), float(v[0])
