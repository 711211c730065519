import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manip_recal import geometry as geo
from manip_recal.geometry import Pose
from oracles import geodesic_oracle

quat_st = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


def test_geodesic_examples():
    q = geo.normalize([0.3, -0.2, 0.9, 0.1])
    assert geo.geodesic_distance(q, q) == pytest.approx(0.0, abs=1e-12)
    assert geo.geodesic_distance(q, -q) == pytest.approx(0.0, abs=1e-12)
    qz = geo.from_axis_angle([0, 0, 1], math.pi / 2)
    assert geo.geodesic_distance(geo.IDENTITY_QUAT, qz) == pytest.approx(math.pi / 2, abs=1e-12)


def test_geodesic_matches_rotation_angle(rng):
    q1 = geo.random_quat(rng, 200)
    q2 = geo.random_quat(rng, 200)
    d = geo.geodesic_distance(q1, q2)
    ref = [geodesic_oracle(a, b) for a, b in zip(q1, q2)]
    assert np.allclose(d, ref, atol=1e-9)


def test_geodesic_metric_axioms_on_1000_triples(rng):
    a, b, c = (geo.random_quat(rng, 1000) for _ in range(3))
    dab = geo.geodesic_distance(a, b)
    assert np.all(dab >= 0) and np.all(dab <= math.pi + 1e-12)
    assert np.allclose(dab, geo.geodesic_distance(b, a), atol=1e-12)
    assert np.allclose(dab, geo.geodesic_distance(a, -b), atol=1e-12)
    assert np.all(geo.geodesic_distance(a, a) < 1e-9)
    assert np.all(dab <= geo.geodesic_distance(a, c) + geo.geodesic_distance(c, b) + 1e-9)


@given(quat_st, quat_st)
@settings(max_examples=200, deadline=None)
def test_align_sign_property(v1, v2):
    q1, q2 = geo.normalize(v1), geo.normalize(v2)
    out = geo.align_sign(q1, q2)
    assert np.dot(q1, out) >= 0
    assert geo.same_rotation(out, q2)


def test_align_sign_examples():
    q = geo.normalize([0.2, 0.5, -0.1, 0.8])
    assert np.allclose(geo.align_sign(q, q), q)
    assert np.allclose(geo.align_sign(q, -q), q)
    cand = np.array([-0.9, math.sqrt(1 - 0.81), 0, 0])
    assert geo.align_sign(geo.IDENTITY_QUAT, cand)[0] == pytest.approx(0.9)


def test_pose_normalizes_and_compares_by_rotation():
    p = Pose([2.0, 0, 0, 0], [1, 2, 3])
    assert np.linalg.norm(p.quat) == pytest.approx(1.0, abs=1e-12)
    assert geo.same_rotation(p.quat, -p.quat)
    assert Pose(-p.quat, p.pos).is_close(p)


def test_pose_matrix_round_trip(rng):
    for q in geo.random_quat(rng, 20):
        p = Pose(q, rng.normal(size=3))
        back = Pose.from_matrix(p.matrix())
        assert back.is_close(p, 1e-12, 1e-7)
        assert Pose.from_dict(p.to_dict()).is_close(p, 0, 0)


def test_pose_difference_uses_aligned_quaternions():
    p = Pose(geo.normalize([0.5, 0.5, 0.5, 0.5]), [0.01, 0, 0])
    q = Pose(-p.quat, [0, 0, 0])
    d = geo.pose_difference(p, q)
    assert np.allclose(d, [0.01, 0, 0, 0, 0, 0, 0], atol=1e-15)


def test_wrap_angle_range():
    a = np.linspace(-10, 10, 1001)
    w = geo.wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.sin(w), np.sin(a)) and np.allclose(np.cos(w), np.cos(a))
    assert geo.wrap_angle(-math.pi) == pytest.approx(math.pi)
