import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dustgsg.geom import (
    RigidTransform,
    Rotation6D,
    UnitQuaternion,
    lerp_vec3,
    matrix_to_rot6d,
    quat_from_rotvec,
    rot6d_backward,
    rot6d_to_matrix,
    se3_apply,
    se3_compose,
    se3_inverse,
    slerp,
    so3_exp,
)

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3)


def random_quat(rng) -> UnitQuaternion:
    return UnitQuaternion.normalized(rng.normal(size=4))


def random_transform(rng) -> RigidTransform:
    return RigidTransform(random_quat(rng), rng.normal(scale=5.0, size=3))


def test_quaternion_is_unit_and_canonical(rng):
    for _ in range(50):
        q = UnitQuaternion.normalized(rng.normal(size=4))
        assert abs(np.linalg.norm(q.as_array()) - 1.0) <= 1e-9
        assert q.w >= 0.0


def test_quaternion_rejects_non_unit():
    with pytest.raises(ValueError):
        UnitQuaternion(0.5, 0.0, 0.0, 0.0)


def test_slerp_endpoints_and_equal_inputs(rng):
    q0, q1 = random_quat(rng), random_quat(rng)
    assert slerp(q0, q1, 0.0).angle_to(q0) < 1e-12
    assert slerp(q0, q1, 1.0).angle_to(q1) < 1e-7
    assert slerp(q0, q0, 0.37).angle_to(q0) < 1e-12


def test_slerp_half_of_quarter_turn():
    q = slerp(UnitQuaternion.identity(), UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2), 0.5)
    expect = np.array([[math.cos(math.pi / 4), -math.sin(math.pi / 4), 0], [math.sin(math.pi / 4), math.cos(math.pi / 4), 0], [0, 0, 1]])
    assert np.allclose(q.matrix(), expect, atol=1e-12)


def test_slerp_constant_angular_speed(rng):
    for _ in range(100):
        q0, q1 = random_quat(rng), random_quat(rng)
        total = q0.angle_to(q1)
        for w in np.arange(1, 10) / 10:
            assert abs(slerp(q0, q1, w).angle_to(q0) - w * total) <= 1e-7


def test_slerp_takes_shortest_arc():
    q0 = UnitQuaternion.identity()
    q1 = UnitQuaternion.from_axis_angle([0, 0, 1], math.radians(350))  # same as -10 degrees
    mid = slerp(q0, q1, 0.5)
    assert abs(math.degrees(mid.angle_to(q0)) - 5.0) < 1e-9


def test_slerp_antipodal_is_deterministic():
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    q1 = np.array([0.0, 1.0, 0.0, 0.0])  # 180 degrees about x
    a, b = slerp(q0, q1, 0.3), slerp(q0, q1, 0.3)
    assert a == b
    assert abs(math.degrees(a.angle_to(UnitQuaternion.identity())) - 54.0) < 1e-9


def test_slerp_rejects_bad_input():
    with pytest.raises(ValueError):
        slerp(np.array([0.5, 0, 0, 0]), np.array([1.0, 0, 0, 0]), 0.5)
    with pytest.raises(ValueError):
        slerp(UnitQuaternion.identity(), UnitQuaternion.identity(), 1.5)


def test_lerp_examples():
    assert np.allclose(lerp_vec3([0, 0, 0], [2, 0, 0], 0.5), [1, 0, 0])
    assert np.allclose(lerp_vec3([1, 2, 3], [1, 2, 3], 0.8), [1, 2, 3])
    assert np.allclose(lerp_vec3([1, 2, 3], [3, 2, 1], 0.25), [1.5, 2, 2.5])


def test_se3_examples():
    p = np.array([0.3, -1.0, 2.0])
    assert np.allclose(se3_apply(RigidTransform.identity(), p), p)
    t = RigidTransform(UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2))
    assert np.allclose(se3_apply(t, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_se3_group_axioms(rng):
    for _ in range(50):
        a, b, c = random_transform(rng), random_transform(rng), random_transform(rng)
        left = se3_compose(se3_compose(a, b), c)
        right = se3_compose(a, se3_compose(b, c))
        assert left.rotation.angle_to(right.rotation) <= 1e-9
        assert np.linalg.norm(left.translation - right.translation) <= 1e-9
        ident = se3_compose(a, se3_inverse(a))
        assert ident.rotation.angle_to(UnitQuaternion.identity()) <= 1e-9
        assert np.linalg.norm(ident.translation) <= 1e-9
        R = a.R
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and abs(np.linalg.det(R) - 1) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, vec3)
def test_compose_matches_sequential_apply(rv, t, p):
    a = RigidTransform(UnitQuaternion.from_rotvec(rv), t)
    b = RigidTransform(UnitQuaternion.from_rotvec(np.roll(rv, 1)), np.roll(t, 1))
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-9)


def test_rot6d_examples():
    assert np.allclose(rot6d_to_matrix(Rotation6D([1, 0, 0], [0, 1, 0])), np.eye(3))
    assert np.allclose(rot6d_to_matrix(Rotation6D([2, 0, 0], [0, 5, 0])), np.eye(3))


def test_rot6d_round_trip(rng):
    for _ in range(100):
        R = random_quat(rng).matrix()
        assert np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R).max() <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=6))
def test_rot6d_output_in_so3(r):
    a1, a2 = np.array(r[:3]), np.array(r[3:])
    if np.linalg.norm(a1) < 1e-3 or np.linalg.norm(a2) < 1e-3:
        return
    if abs(a1 @ a2) / (np.linalg.norm(a1) * np.linalg.norm(a2)) > 1 - 1e-6:
        return
    R = rot6d_to_matrix(r)
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9
    assert abs(np.linalg.det(R) - 1.0) <= 1e-9


def test_rot6d_degenerate_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        rot6d_to_matrix([0, 0, 0, 0, 1, 0])
    with pytest.raises(ValueError, match="parallel"):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])


def test_rot6d_backward_matches_finite_differences(rng):
    r = rng.normal(size=6)
    G = rng.normal(size=(3, 3))
    g = rot6d_backward(r, G)
    h = 1e-6
    fd = np.array([(np.sum(G * rot6d_to_matrix(r + h * e)) - np.sum(G * rot6d_to_matrix(r - h * e))) / (2 * h) for e in np.eye(6)])
    assert np.allclose(g, fd, atol=1e-8)


def test_rotvec_small_angle_series():
    q = quat_from_rotvec(np.array([1e-10, 0, 0]))
    assert abs(np.linalg.norm(q) - 1.0) < 1e-15
    assert np.allclose(so3_exp([0, 0, 0]), np.eye(3))
