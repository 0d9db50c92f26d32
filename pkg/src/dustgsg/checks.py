"""The verify-theory battery: each check returns a CheckResult row."""

from __future__ import annotations

import time

import numpy as np

from .geom import so3_exp
from .lbfgs import minimize_lbfgs
from .render import rasterize
from .report import CheckResult
from .scene import collapse_to_single_timeline, world_gaussians
from .synth import GroundTruth, SynthConfig, make_scene, render_dataset
from .theory import (
    MotionSpec,
    NTKBlocks,
    empirical_ntk_pose,
    flow_decoupled,
    gradient_cosine,
    gradient_flow,
    irreducible_bound,
    lambda_min,
    pair_loss,
    random_motion,
    random_spd,
    single_timeline_optimal_loss,
    stable_step,
)
from .train import image_loss


def _result(name, measured, expected, tol, passed, note="") -> CheckResult:
    return CheckResult(name, float(measured), float(expected), float(tol), bool(passed), note)


def check_bound_validity(instances: int = 100, seed: int = 0) -> CheckResult:
    """Minimize the two-source quadratic numerically; the minimum never undercuts the bound."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(instances):
        Av, Af = random_spd(rng), random_spd(rng)
        m = random_motion(rng)
        mu_v, mu_f = m.targets()

        def fg(x):
            return pair_loss(Av, Af, x, mu_v, mu_f), Av @ (x - mu_v) + Af @ (x - mu_f)

        res = minimize_lbfgs(fg, rng.normal(size=3), gtol=1e-12)
        bound = irreducible_bound(m, [lambda_min(Av, Af)])
        worst = min(worst, res.fun - bound)
    return _result("bound_validity_min_slack", worst, 0.0, 1e-9, worst >= -1e-9, f"{instances} random instances")


def check_tightness(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        lam = rng.uniform(0.1, 10.0)
        A = lam * np.eye(3)
        opt = single_timeline_optimal_loss(A, A, random_motion(rng))
        worst = max(worst, abs(opt.loss - opt.bound) / max(opt.bound, 1e-300))
    return _result("bound_tightness_rel_err", worst, 0.0, 1e-6, worst <= 1e-6, "isotropic equal Fisher")


def scaling_slopes(seed: int = 0) -> tuple[float, float]:
    """log-log slopes of the optimal loss against dtau and against speed, one decade each."""
    rng = np.random.default_rng(seed)
    Av, Af = random_spd(rng), random_spd(rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    grid = np.logspace(0.0, 1.0, 9)
    by_dt = [single_timeline_optimal_loss(Av, Af, MotionSpec(10.0 * direction, 0.01 * g, 0.0)).loss for g in grid]
    by_v = [single_timeline_optimal_loss(Av, Af, MotionSpec(g * direction, 0.1, 0.0)).loss for g in grid]
    x = np.log(grid)
    return float(np.polyfit(x, np.log(by_dt), 1)[0]), float(np.polyfit(x, np.log(by_v), 1)[0])


def check_scaling(seed: int = 0) -> list[CheckResult]:
    s_dt, s_v = scaling_slopes(seed)
    return [
        _result("quadratic_slope_dtau", s_dt, 2.0, 0.05, abs(s_dt - 2.0) <= 0.05),
        _result("quadratic_slope_speed", s_v, 2.0, 0.05, abs(s_v - 2.0) <= 0.05),
    ]


def check_cosines(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    A = 2.5 * np.eye(3)
    v = np.array([10.0, 1.0, -0.5])
    R = so3_exp(rng.normal(size=3))
    between = MotionSpec(v, 0.2, 0.1, anchor=0.13)
    outside = MotionSpec(v, 0.2, 0.1, anchor=0.35)
    c_in = gradient_cosine(A, A, between, between.position(between.anchor), R).value
    c_out = gradient_cosine(A, A, outside, outside.position(outside.anchor), R).value
    rows = [
        _result("cosine_anchor_between", c_in, -1.0, 1e-9, c_in is not None and abs(c_in + 1.0) <= 1e-9),
        _result(
            "cosine_anchor_outside",
            c_out,
            1.0,
            1e-9,
            c_out is not None and abs(c_out - 1.0) <= 1e-9,
            "sign formula gives +1 when both offsets share a sign",
        ),
    ]

    # anisotropic: analytic cosine against one built from central differences of each source loss
    worst = 0.0
    h = 1e-6
    for _ in range(20):
        Av, Af = random_spd(rng), random_spd(rng)
        m = random_motion(rng)
        mu = m.position(m.anchor) + rng.normal(scale=0.3, size=3)
        R = so3_exp(rng.normal(size=3))
        c = gradient_cosine(Av, Af, m, mu, R).value
        mu_v, mu_f = m.targets()
        gv, gf = np.zeros(3), np.zeros(3)
        for j in range(3):
            e = R[:, j] * h  # canonical coordinate j moves the world position along R e_j
            for a, tgt, g in ((Av, mu_v, gv), (Af, mu_f, gf)):
                lp = 0.5 * (mu + e - tgt) @ a @ (mu + e - tgt)
                lm = 0.5 * (mu - e - tgt) @ a @ (mu - e - tgt)
                g[j] = (lp - lm) / (2 * h)
        c_fd = gv @ gf / (np.linalg.norm(gv) * np.linalg.norm(gf))
        worst = max(worst, abs(c - c_fd))
    rows.append(_result("cosine_anisotropic_fd_err", worst, 0.0, 1e-6, worst <= 1e-6))
    return rows


def check_identities(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_id = worst_sep = 0.0
    for _ in range(50):
        Av, Af = random_spd(rng), random_spd(rng)
        m = random_motion(rng)
        mu = rng.normal(scale=5.0, size=3)
        mu_v, mu_f = m.targets()
        # residual difference does not depend on the shared position
        diff = (mu - mu_v) - (mu - mu_f)
        worst_id = max(worst_id, np.abs(diff + m.velocity * m.delta_tau).max())
        # per-source canonical optima under one shared pose (R, T)
        R, T = so3_exp(rng.normal(size=3)), rng.normal(size=3)
        cv, cf = R.T @ (mu_v - T), R.T @ (mu_f - T)
        sep = np.linalg.norm(cv - cf)
        worst_sep = max(worst_sep, abs(sep - m.speed * abs(m.delta_tau)))
    return [
        _result("residual_difference_identity_err", worst_id, 0.0, 1e-9, worst_id <= 1e-9),
        _result("optima_separation_err", worst_sep, 0.0, 1e-9, worst_sep <= 1e-9),
    ]


def toy_scene(width: int = 32, height: int = 32, seed: int = 0) -> GroundTruth:
    """The default two-agent synthetic scene at a reduced image size."""
    return make_scene(SynthConfig(seed=seed, width=width, height=height))


def ntk_frame(gt: GroundTruth) -> int:
    return gt.schedule.num_frames // 2


def check_ntk(gt: GroundTruth) -> tuple[list[CheckResult], object]:
    i = ntk_frame(gt)
    cams = {"vehicle": gt.camera("vehicle", i), "infra": gt.camera("infra", i)}
    times = {s: float(gt.schedule.times(s)[i]) for s in cams}
    dust = empirical_ntk_pose(gt.scene, cams, times, "dust")
    single_scene = collapse_to_single_timeline(gt.scene, gt.schedule.anchors)
    anchor = float(gt.schedule.anchors[i])
    single = empirical_ntk_pose(single_scene, cams, {s: anchor for s in cams}, "single")
    sym = max(np.abs(dust.vv - dust.vv.T).max(), np.abs(dust.ff - dust.ff.T).max())
    rows = [
        _result("ntk_dust_cross_norm", dust.cross_norm, 0.0, 1e-8, dust.cross_norm <= 1e-8),
        _result("ntk_single_cross_norm", single.cross_norm, 0.0, 0.0, single.cross_norm > 0.0, "must be strictly positive"),
        _result("ntk_block_symmetry_err", sym, 0.0, 1e-9, sym <= 1e-9),
    ]
    return rows, dust


def check_flow(blocks, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r0v, r0f = rng.normal(size=blocks.m_v), rng.normal(size=blocks.m_f)
    step = stable_step(blocks)
    ok = flow_decoupled(blocks, r0v, r0f, duration=200 * step, step=step)

    # scalar kernel lam*I against the exponential
    lam, dt = 3.0, 1e-3
    n = 4
    scalar = NTKBlocks(lam * np.eye(n), lam * np.eye(n), np.zeros((n, n)), np.zeros((n, n)), n, n)
    r0 = rng.normal(size=n)
    fl = gradient_flow(scalar, r0, r0, duration=1.0, step=dt)
    exact = np.exp(-lam * fl.times)[:, None] * r0
    err = np.abs(fl.r_v - exact).max()
    tol = lam * dt * np.abs(r0).max()
    return [
        _result("flow_vehicle_unchanged_by_infra_x10", float(ok), 1.0, 0.0, ok, "bitwise comparison"),
        _result("flow_exponential_err", err, 0.0, tol, err <= tol, "explicit Euler, error O(step)"),
    ]


def check_zero_loss(gt: GroundTruth) -> list[CheckResult]:
    """Ground-truth canonical Gaussians and per-source poses reproduce every target."""
    data = render_dataset(gt)
    sq = 0.0
    photo = 0.0
    for f in data.frames:
        img = rasterize(f.camera, world_gaussians(gt.scene, f.source, data.query_time(f, "dust"))).image
        sq += 0.5 * float(((img - f.target) ** 2).sum())
        photo += image_loss(img, f.target)
    return [
        _result("zero_loss_witness_sq", sq, 0.0, 1e-10, sq <= 1e-10),
        _result("zero_loss_witness_photometric", photo, 0.0, 1e-10, photo <= 1e-10),
    ]


def run_theory_checks(instances: int = 100, ntk_width: int = 32, ntk_height: int = 32, seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    rows = [check_bound_validity(instances, seed), check_tightness(seed)]
    rows += check_scaling(seed)
    rows += check_cosines(seed)
    rows += check_identities(seed)
    gt = toy_scene(ntk_width, ntk_height, seed)
    ntk_rows, dust = check_ntk(gt)
    rows += ntk_rows
    rows += check_flow(dust, seed)
    rows += check_zero_loss(make_scene(SynthConfig(seed=seed)))
    rows.append(_result("runtime_s", time.perf_counter() - t0, 0.0, 0.0, True, "informational"))
    return rows
