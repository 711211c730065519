import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manip_recal import geometry as geo
from manip_recal.geometry import Pose
from manip_recal.gp import (
    GpModel,
    KernelParams,
    SingularGram,
    cross_kernel,
    gegenbauer1,
    gram,
    kernel_product,
    kernel_se,
    kernel_sphere,
    prior_variance,
    sphere_from_distance,
    stable_cholesky,
)
from oracles import gegenbauer_oracle

EXACT = KernelParams(observation_noise=0.0)


def random_poses(rng, n):
    return [Pose(q, rng.uniform(-0.8, 0.8, 3)) for q in geo.random_quat(rng, n)]


@pytest.mark.parametrize("n", range(13))
def test_gegenbauer_matches_scipy(n):
    t = np.concatenate([np.linspace(0, np.pi, 401), [1e-8, np.pi - 1e-8]])
    assert np.allclose(gegenbauer1(n, t), gegenbauer_oracle(n, t), rtol=1e-9, atol=1e-9)


def test_sphere_kernel_examples(rng):
    p = KernelParams(sphere_signal=1.7)
    q = geo.random_quat(rng)
    assert kernel_sphere(q, q, p) == pytest.approx(1.7**2, rel=1e-12)
    assert kernel_sphere(q, -q, p) == pytest.approx(1.7**2, rel=1e-12)
    const = KernelParams(series_terms=1, sphere_lengthscale=50.0)
    # with kappa huge only the n = 0 term survives
    assert kernel_sphere(q, geo.random_quat(rng), const) == pytest.approx(1.0, abs=1e-12)


def test_sphere_kernel_depends_only_on_distance(rng):
    p = KernelParams()
    for _ in range(50):
        q1 = geo.random_quat(rng)
        q2 = geo.random_quat(rng)
        g = geo.random_quat(rng)
        # left multiplication is an isometry of the sphere
        a = kernel_sphere(q1, q2, p)
        b = kernel_sphere(geo.multiply(g, q1), geo.multiply(g, q2), p)
        assert a == pytest.approx(b, abs=1e-12)


def test_series_truncation_tail():
    p = KernelParams()
    n = np.arange(13)
    terms = (n + 1) ** 2 * np.exp(-0.5 * p.sphere_lengthscale**2 * n * (n + 2))
    assert terms[-1] / terms.sum() < 1e-10


def test_se_kernel_examples():
    p = KernelParams(se_signal=1.3, se_noise=0.2, se_lengthscale=0.25)
    x = np.array([0.1, 0.2, 0.3])
    assert kernel_se(x, x, p, True) == pytest.approx(1.3**2 + 0.2**2)
    y = x + np.array([0.25 * math.sqrt(2), 0, 0])
    assert kernel_se(x, y, p, False) == pytest.approx(1.3**2 * math.exp(-1))
    assert kernel_se(x, x + 1e3, p, False) == pytest.approx(0.0, abs=1e-300)


def test_product_kernel_diagonal():
    p = KernelParams(product_scale=1.5, sphere_signal=0.7, se_signal=1.2, se_noise=0.3)
    x = Pose(geo.IDENTITY_QUAT, [0.1, 0, 0])
    assert kernel_product(x, x, p, True) == pytest.approx(1.5**2 * 0.7**2 * (1.2**2 + 0.3**2))
    far = Pose(geo.IDENTITY_QUAT, [100.0, 0, 0])
    assert kernel_product(x, far, p) == pytest.approx(0.0, abs=1e-300)


def test_gram_psd_over_200_random_sets(rng):
    p = KernelParams()
    for _ in range(200):
        n = int(rng.integers(5, 51))
        Q = geo.random_quat(rng, n)
        P = rng.uniform(-1, 1, (n, 3))
        K = gram(Q, P, p)
        assert np.allclose(K, K.T)
        assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K)


def test_gram_psd_50_poses_frozen_seed():
    r = np.random.default_rng(50)
    Q = geo.random_quat(r, 50)
    P = r.uniform(-1, 1, (50, 3))
    K = gram(Q, P, KernelParams())
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K)


def test_posterior_prior_when_empty():
    m = GpModel(prior_mean=-0.2)
    mean, var = m.posterior(Pose.identity())
    assert mean == -0.2 and var == pytest.approx(prior_variance(m.params))


def test_posterior_one_point_closed_form(rng):
    p = KernelParams(observation_noise=0.05)
    x1, xs = random_poses(rng, 2)
    mu, y1 = -0.1, -0.4
    m = GpModel.from_data([x1], [y1], p, mu)
    k1s = kernel_product(xs, x1, p)
    k11 = kernel_product(x1, x1, p, True)
    kss = kernel_product(xs, xs, p, True)
    mean, var = m.posterior(xs)
    assert mean == pytest.approx(mu + k1s * (y1 - mu) / (k11 + 0.05**2), abs=1e-12)
    assert var == pytest.approx(kss - k1s**2 / (k11 + 0.05**2), abs=1e-12)


def test_noise_free_interpolation(rng):
    xs = random_poses(rng, 30)
    ys = rng.uniform(-1, 0, 30)
    m = GpModel.from_data(xs, ys, EXACT)
    mean, var = m.predict(m.quats, m.positions)
    assert np.max(np.abs(mean - ys)) < 1e-6
    assert np.max(var) <= 1e-6


def test_add_then_query_and_duplicates(rng):
    x = random_poses(rng, 1)[0]
    m = GpModel(EXACT).add_observation(x, -0.3)
    assert m.posterior(x)[0] == pytest.approx(-0.3, abs=1e-6)
    noisy = GpModel(KernelParams()).add_observation(x, -0.3).add_observation(x, -0.31)
    mean, var = noisy.posterior(x)
    assert np.isfinite(mean) and noisy.jitter == 0.0


def test_incremental_equals_batch(rng):
    xs = random_poses(rng, 15)
    ys = rng.uniform(-1, 0, 15)
    inc = GpModel()
    for x, y in zip(xs, ys):
        inc = inc.add_observation(x, y)
    batch = GpModel.from_data(xs, ys)
    test = random_poses(rng, 10)
    Q = np.array([t.quat for t in test])
    P = np.array([t.pos for t in test])
    for a, b in zip(inc.predict(Q, P), batch.predict(Q, P)):
        assert np.allclose(a, b, atol=1e-9)


def test_variance_bounded_by_prior(rng):
    m = GpModel.from_data(random_poses(rng, 25), rng.uniform(-1, 0, 25))
    test = random_poses(rng, 200)
    Q = np.array([t.quat for t in test])
    P = np.array([t.pos for t in test])
    _, var = m.predict(Q, P)
    assert np.all(var <= prior_variance(m.params) + 1e-9) and np.all(var >= 0)


def test_cross_kernel_symmetric_in_arguments(rng):
    Q = geo.random_quat(rng, 6)
    P = rng.normal(size=(6, 3))
    K = cross_kernel(Q, P, Q, P, KernelParams())
    assert np.allclose(K, K.T, atol=1e-14)


def test_stable_cholesky_jitter_and_failure(caplog):
    A = np.ones((3, 3))
    with caplog.at_level(logging.INFO, logger="manip_recal.gp"):
        _, jitter = stable_cholesky(A)
    assert jitter > 0 and "jitter" in caplog.text
    with pytest.raises(SingularGram):
        stable_cholesky(-np.eye(3))


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        KernelParams(sphere_lengthscale=0)
    with pytest.raises(ValueError):
        KernelParams(series_terms=0)
    assert KernelParams.from_dict(KernelParams().to_dict()) == KernelParams()


@given(st.floats(0, math.pi))
@settings(max_examples=100, deadline=None)
def test_sphere_kernel_bounded_by_diagonal(d):
    p = KernelParams()
    assert abs(float(sphere_from_distance(d, p))) <= p.sphere_signal**2 + 1e-12
