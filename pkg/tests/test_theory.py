import numpy as np
import pytest

from dustgsg.checks import check_bound_validity, check_cosines, check_identities, scaling_slopes
from dustgsg.theory import (
    MotionSpec,
    NTKBlocks,
    cosine_sign_formula,
    empirical_ntk_pose,
    flow_decoupled,
    gradient_cosine,
    gradient_flow,
    irreducible_bound,
    pair_loss,
    random_motion,
    random_spd,
    single_timeline_optimal_loss,
    single_timeline_optimum,
    stable_step,
)

from conftest import front_camera, one_agent_scene


def test_optimum_equal_fisher_is_midpoint():
    mv, mf = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.0, 5.0])
    assert np.allclose(single_timeline_optimum(np.eye(3), np.eye(3), mv, mf), [0, 1, 4])


def test_optimum_hand_solve():
    x = single_timeline_optimum(2 * np.eye(3), np.eye(3), [3, 0, 0], [0, 0, 0])
    assert np.allclose(x, [2, 0, 0], atol=1e-15)


def test_optimum_rejects_singular_sum():
    Z = np.diag([1.0, 1.0, 0.0])
    with pytest.raises(ValueError, match="singular"):
        single_timeline_optimum(Z, Z, np.zeros(3), np.ones(3))


def test_optimum_matches_gradient_descent(rng):
    Av, Af = random_spd(rng), random_spd(rng)
    mv, mf = rng.normal(size=3), rng.normal(size=3)
    closed = single_timeline_optimum(Av, Af, mv, mf)
    S = Av + Af
    lr = 1.0 / np.linalg.eigvalsh(S)[-1]
    for _ in range(20):
        x = rng.normal(scale=3.0, size=3)
        for _ in range(20000):
            g = Av @ (x - mv) + Af @ (x - mf)
            x = x - lr * g
            if np.abs(g).max() < 1e-13:
                break
        assert np.abs(x - closed).max() <= 1e-6


def test_bound_values():
    m = MotionSpec([10.0, 0.0, 0.0], 0.07, 0.0)
    assert np.isclose(irreducible_bound(m, [1.0]), 0.1225, rtol=0, atol=1e-15)
    assert np.isclose(m.speed * abs(m.delta_tau), 0.7)
    assert irreducible_bound(MotionSpec([10.0, 0, 0], 0.3, 0.3), [5.0]) == 0.0


def test_bound_homogeneity():
    v = np.array([3.0, -4.0, 1.0])
    b = irreducible_bound(MotionSpec(v, 0.1, 0.0), [0.7, 1.3])
    assert np.isclose(irreducible_bound(MotionSpec(v, 0.2, 0.0), [0.7, 1.3]), 4 * b, rtol=1e-14)
    assert np.isclose(irreducible_bound(MotionSpec(2 * v, 0.1, 0.0), [0.7, 1.3]), 4 * b, rtol=1e-14)


def test_bound_rejects_negative_eigenvalue():
    with pytest.raises(ValueError):
        irreducible_bound(MotionSpec([1, 0, 0], 0.1, 0.0), [-0.1])


def test_isotropic_optimal_loss_equals_bound():
    lam = 2.0
    m = MotionSpec([10.0, 1.0, 0.0], 0.1, 0.0)
    opt = single_timeline_optimal_loss(lam * np.eye(3), lam * np.eye(3), m)
    shift = m.velocity * m.delta_tau
    assert np.allclose(opt.delta_v, -shift / 2) and np.allclose(opt.delta_f, shift / 2)
    assert np.isclose(opt.loss, lam * (shift @ shift) / 4, rtol=1e-14)
    assert abs(opt.slack) <= 1e-12


def test_zero_offset_gives_zero_loss(rng):
    opt = single_timeline_optimal_loss(random_spd(rng), random_spd(rng), MotionSpec([5.0, 0, 0], 0.2, 0.2))
    assert opt.loss == 0.0


def test_optimal_loss_never_below_bound(rng):
    for _ in range(100):
        Av, Af = random_spd(rng), random_spd(rng)
        opt = single_timeline_optimal_loss(Av, Af, random_motion(rng))
        assert opt.slack >= -1e-9


def test_numerical_minimum_respects_bound():
    assert check_bound_validity(20, seed=3).passed


def test_optimal_loss_equals_pair_loss_at_optimum(rng):
    Av, Af = random_spd(rng), random_spd(rng)
    m = random_motion(rng)
    mv, mf = m.targets()
    x = single_timeline_optimum(Av, Af, mv, mf)
    assert np.isclose(pair_loss(Av, Af, x, mv, mf), single_timeline_optimal_loss(Av, Af, m).loss, rtol=1e-10)


def test_quadratic_slopes():
    s_dt, s_v = scaling_slopes(seed=1)
    assert abs(s_dt - 2.0) <= 0.05 and abs(s_v - 2.0) <= 0.05


def test_cosine_between_and_outside():
    A = np.eye(3)
    v = np.array([10.0, 0.0, 0.0])
    between = MotionSpec(v, 0.2, 0.1, anchor=0.15)
    outside = MotionSpec(v, 0.2, 0.1, anchor=0.0)
    assert abs(gradient_cosine(A, A, between, between.position(0.15)).value + 1) <= 1e-9
    assert abs(gradient_cosine(A, A, outside, outside.position(0.0)).value - 1) <= 1e-9
    assert cosine_sign_formula(between) == -1.0 and cosine_sign_formula(outside) == 1.0


def test_cosine_undefined_at_a_target():
    A = np.eye(3)
    m = MotionSpec([1.0, 0, 0], 0.2, 0.1)
    res = gradient_cosine(A, A, m, m.position(0.2))
    assert not res.defined and res.value is None


def test_cosine_battery():
    assert all(r.passed for r in check_cosines(seed=2))


def test_identities_battery():
    assert all(r.passed for r in check_identities(seed=4))


def test_ntk_duplicate_sources_have_equal_blocks():
    scene = one_agent_scene(dtau=0.0)
    cam = front_camera()
    b = empirical_ntk_pose(scene, {"vehicle": cam, "infra": cam}, {"vehicle": 0.1, "infra": 0.1}, "dust")
    assert np.array_equal(b.vv, b.ff)
    assert b.cross_norm == 0.0
    assert np.abs(b.vv - b.vv.T).max() <= 1e-9
    assert np.linalg.eigvalsh(b.vv)[0] >= -1e-9 * np.linalg.eigvalsh(b.vv)[-1]


def test_ntk_single_mode_couples_sources():
    scene = one_agent_scene(dtau=0.1)
    cam = front_camera()
    b = empirical_ntk_pose(scene, {"vehicle": cam, "infra": cam}, {"vehicle": 0.2, "infra": 0.2}, "single")
    assert b.cross_norm > 0.0


def test_ntk_rejects_scene_without_agent_pixels():
    scene = one_agent_scene()
    away = front_camera(distance=-6.0)  # looks away from the agent
    with pytest.raises(ValueError):
        empirical_ntk_pose(scene, {"vehicle": away, "infra": away}, {"vehicle": 0.1, "infra": 0.1})


def _scalar_blocks(lam, n=3):
    return NTKBlocks(lam * np.eye(n), lam * np.eye(n), np.zeros((n, n)), np.zeros((n, n)), n, n)


def test_flow_from_zero_stays_zero():
    fl = gradient_flow(_scalar_blocks(2.0), np.zeros(3), np.zeros(3), 1.0, 0.01)
    assert not fl.r_v.any() and not fl.r_f.any()


def test_flow_matches_exponential(rng):
    lam, dt = 2.0, 1e-3
    r0 = rng.normal(size=3)
    fl = gradient_flow(_scalar_blocks(lam), r0, r0, 2.0, dt)
    exact = np.exp(-lam * fl.times)[:, None] * r0
    assert np.abs(fl.r_v - exact).max() <= lam * dt * np.abs(r0).max()


def test_flow_decoupling_and_stable_step(rng):
    M = rng.normal(size=(5, 5))
    b = NTKBlocks(M @ M.T, 2 * M @ M.T, np.zeros((5, 5)), np.zeros((5, 5)), 5, 5)
    step = stable_step(b)
    assert step <= 0.1 / np.linalg.eigvalsh(2 * M @ M.T)[-1] * (1 + 1e-12)
    assert flow_decoupled(b, rng.normal(size=5), rng.normal(size=5), 100 * step, step)
    a = gradient_flow(b, np.ones(5), np.ones(5), 10 * step, step)
    c = gradient_flow(b, np.ones(5), 10 * np.ones(5), 10 * step, step)
    assert not np.array_equal(a.r_f, c.r_f)


def test_flow_rejects_bad_step():
    with pytest.raises(ValueError):
        gradient_flow(_scalar_blocks(1.0), np.ones(3), np.ones(3), 1.0, 0.0)


def test_flow_reports_instability():
    fl = gradient_flow(_scalar_blocks(10.0), np.ones(3), np.ones(3), 1.0, 0.5)
    assert fl.unstable_v and fl.unstable_f
