"""Closed-form and numerical checks of the single-timeline error floor.

Per Gaussian, the photometric loss near the optimum is modeled as the
quadratic 1/2 d^T A d in world-position error d, one Fisher matrix A per
source. A shared (single-timeline) position must serve two targets that sit
v*dtau apart, so the loss cannot reach zero. A per-source (decoupled) pose
removes the conflict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import so3_exp
from .render import Camera, FisherMatrix, rasterize
from .scene import SceneGraph, WorldGaussians, world_gaussians


def _mat(a) -> np.ndarray:
    return np.asarray(a.a if isinstance(a, FisherMatrix) else a, dtype=float)


@dataclass(frozen=True)
class MotionSpec:
    velocity: np.ndarray
    tau_vehicle: float
    tau_infra: float
    anchor: float = None  # defaults to the capture midpoint

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        if self.anchor is None:
            object.__setattr__(self, "anchor", 0.5 * (self.tau_vehicle + self.tau_infra))

    @property
    def delta_tau(self) -> float:
        return self.tau_vehicle - self.tau_infra

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))

    def position(self, t: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
        return np.asarray(origin, dtype=float) + self.velocity * t

    def targets(self, origin=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
        """True world positions seen by the vehicle and infra captures."""
        return self.position(self.tau_vehicle, origin), self.position(self.tau_infra, origin)


def _check_invertible(a_sum: np.ndarray) -> None:
    lam = np.linalg.eigvalsh(0.5 * (a_sum + a_sum.T))[0]
    if lam <= 1e-12:
        raise ValueError(f"Fisher sum is singular (smallest eigenvalue {lam:.3e})")


def single_timeline_optimum(a_v, a_f, mu_v, mu_f) -> np.ndarray:
    """Fisher-weighted compromise between the two per-source targets."""
    Av, Af = _mat(a_v), _mat(a_f)
    S = Av + Af
    _check_invertible(S)
    return np.linalg.solve(S, Av @ np.asarray(mu_v, float) + Af @ np.asarray(mu_f, float))


def irreducible_bound(motion: MotionSpec, lambdas) -> float:
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValueError("Fisher eigenvalues must be non-negative")
    return motion.delta_tau**2 * motion.speed**2 / 4.0 * float(lambdas.sum())


def lambda_min(a_v, a_f) -> float:
    """Smallest eigenvalue over both sources' Fisher matrices."""
    return float(min(np.linalg.eigvalsh(_mat(a_v))[0], np.linalg.eigvalsh(_mat(a_f))[0]))


def pair_loss(a_v, a_f, mu, mu_v, mu_f) -> float:
    dv = np.asarray(mu, float) - mu_v
    df = np.asarray(mu, float) - mu_f
    return 0.5 * dv @ _mat(a_v) @ dv + 0.5 * df @ _mat(a_f) @ df


@dataclass
class OptimalLoss:
    loss: float
    delta_v: np.ndarray
    delta_f: np.ndarray
    bound: float

    @property
    def slack(self) -> float:
        return self.loss - self.bound


def single_timeline_optimal_loss(a_v, a_f, motion: MotionSpec) -> OptimalLoss:
    Av, Af = _mat(a_v), _mat(a_f)
    S = Av + Af
    _check_invertible(S)
    shift = motion.velocity * motion.delta_tau
    dv = np.linalg.solve(S, Af @ (-shift))
    df = np.linalg.solve(S, Av @ shift)
    gap = np.abs(dv - df + shift).max()
    if gap > 1e-9 * max(1.0, np.abs(shift).max()):
        raise ArithmeticError(f"residual difference identity violated by {gap:.3e}")
    loss = 0.5 * dv @ Av @ dv + 0.5 * df @ Af @ df
    bound = irreducible_bound(motion, [max(lambda_min(Av, Af), 0.0)])
    if loss < bound - 1e-9:
        raise ArithmeticError(f"optimal loss {loss:.6e} below bound {bound:.6e}")
    return OptimalLoss(float(loss), dv, df, bound)


@dataclass
class CosineResult:
    value: float | None  # None when either gradient vanishes
    grad_v: np.ndarray
    grad_f: np.ndarray

    @property
    def defined(self) -> bool:
        return self.value is not None


def source_gradients(a_v, a_f, motion: MotionSpec, mu, rotation=None, origin=(0.0, 0.0, 0.0)):
    """Canonical-mean gradients of each source's quadratic loss at world position mu."""
    R = np.eye(3) if rotation is None else np.asarray(rotation, float)
    mu_v, mu_f = motion.targets(origin)
    gv = R.T @ (_mat(a_v) @ (np.asarray(mu, float) - mu_v))
    gf = R.T @ (_mat(a_f) @ (np.asarray(mu, float) - mu_f))
    return gv, gf


def gradient_cosine(a_v, a_f, motion: MotionSpec, mu, rotation=None, origin=(0.0, 0.0, 0.0)) -> CosineResult:
    gv, gf = source_gradients(a_v, a_f, motion, mu, rotation, origin)
    nv, nf = np.linalg.norm(gv), np.linalg.norm(gf)
    if nv <= 1e-12 or nf <= 1e-12:
        return CosineResult(None, gv, gf)
    return CosineResult(float(np.clip(gv @ gf / (nv * nf), -1.0, 1.0)), gv, gf)


def cosine_sign_formula(motion: MotionSpec) -> float | None:
    """Isotropic-Fisher cosine at mu = mu*(anchor): sign of the two capture offsets' product."""
    a = motion.tau_vehicle - motion.anchor
    b = motion.tau_infra - motion.anchor
    if a == 0 or b == 0:
        return None
    return a * b / (abs(a) * abs(b))


# -- empirical NTK over pose parameters ---------------------------------------------


@dataclass
class NTKBlocks:
    vv: np.ndarray
    ff: np.ndarray
    vf: np.ndarray
    fv: np.ndarray
    m_v: int
    m_f: int
    jac_v: np.ndarray = field(repr=False, default=None)  # (M_v, P)
    jac_f: np.ndarray = field(repr=False, default=None)
    params: list[str] = field(default_factory=list)

    @property
    def cross_norm(self) -> float:
        return float(np.linalg.norm(self.vf))


def _apply_pose_delta(world: WorldGaussians, scene: SceneGraph, k: int, delta: np.ndarray) -> WorldGaussians:
    """Agent k re-placed with pose (exp(w) R, T + dt) for delta = (dt, w)."""
    R, T = world.poses[k]
    R2 = so3_exp(delta[3:]) @ R
    T2 = T + delta[:3]
    c = scene.agents[k].canonical
    m = world.owner == k
    means = world.means.copy()
    covs = world.covariances.copy()
    means[m] = c.means @ R2.T + T2
    covs[m] = R2 @ c.covariances() @ R2.T
    poses = list(world.poses)
    poses[k] = (R2, T2)
    return WorldGaussians(means, covs, world.opacities, world.colors, world.owner, world.index, poses)


def _render_vec(camera: Camera, world: WorldGaussians, rows: np.ndarray) -> np.ndarray:
    return rasterize(camera, world).image.reshape(-1)[rows]


def empirical_ntk_pose(
    scene: SceneGraph,
    cameras: dict,
    times: dict,
    mode: str = "dust",
    h: float = 1e-5,
    pixels: str = "agents",
) -> NTKBlocks:
    """Pose-parameter NTK from central finite differences.

    `cameras` and `times` map source -> Camera / capture time. In dust mode
    each agent carries 6 pose parameters per source; in single mode one 6-vector
    per agent drives both sources. Only the pose actually queried for a source
    is perturbed, so a parameter of the other source leaves its image exactly
    unchanged. Output rows are RGB values of pixels covered by an agent
    (`pixels="agents"`) or all pixels.
    """
    if mode not in ("dust", "single"):
        raise ValueError(f"unknown mode {mode!r}")
    base = {s: world_gaussians(scene, s, times[s]) for s in ("vehicle", "infra")}
    rows = {}
    for s in ("vehicle", "infra"):
        r = rasterize(cameras[s], base[s])
        if pixels == "agents":
            px = np.flatnonzero(r.front_owner >= 0)
            if len(px) == 0:
                raise ValueError(f"no agent pixels in the {s} view")
        else:
            px = np.arange(cameras[s].width * cameras[s].height)
        rows[s] = (px[:, None] * 3 + np.arange(3)).reshape(-1)

    # parameter list: (agent, owning source or None for shared, component)
    params = []
    for k, a in enumerate(scene.agents):
        owners = ("vehicle", "infra") if mode == "dust" else (None,)
        for o in owners:
            for j in range(6):
                params.append((k, o, j, f"{a.agent_id}:{o or 'shared'}:{'txyz'[j] if j < 3 else 'r' + 'xyz'[j - 3]}"))

    jac = {s: np.zeros((len(rows[s]), len(params))) for s in ("vehicle", "infra")}
    for p, (k, owner, j, _) in enumerate(params):
        for s in ("vehicle", "infra"):
            if owner is not None and owner != s:
                # the other source's pose is not an input of this image; still evaluate to verify
                plus = minus = _render_vec(cameras[s], base[s], rows[s])
                jac[s][:, p] = (plus - minus) / (2 * h)
                continue
            d = np.zeros(6)
            d[j] = h
            plus = _render_vec(cameras[s], _apply_pose_delta(base[s], scene, k, d), rows[s])
            minus = _render_vec(cameras[s], _apply_pose_delta(base[s], scene, k, -d), rows[s])
            jac[s][:, p] = (plus - minus) / (2 * h)
    Jv, Jf = jac["vehicle"], jac["infra"]
    vv = Jv @ Jv.T
    ff = Jf @ Jf.T
    vf = Jv @ Jf.T
    return NTKBlocks(vv, ff, vf, vf.T.copy(), len(rows["vehicle"]), len(rows["infra"]), Jv, Jf, [p[3] for p in params])


# -- decoupled gradient flow ----------------------------------------------------------


@dataclass
class FlowResult:
    times: np.ndarray
    r_v: np.ndarray  # (steps + 1, M_v)
    r_f: np.ndarray
    unstable_v: bool
    unstable_f: bool


def _euler(theta: np.ndarray, r0: np.ndarray, steps: int, step: float) -> tuple[np.ndarray, bool]:
    out = np.empty((steps + 1, len(r0)))
    out[0] = r0
    r = r0.copy()
    for i in range(steps):
        r = r - step * (theta @ r)
        out[i + 1] = r
    n0 = np.linalg.norm(r0)
    unstable = bool(np.linalg.norm(r) > n0 * (1 + 1e-12)) if n0 > 0 else False
    return out, unstable or not np.isfinite(out).all()


def gradient_flow(blocks: NTKBlocks, r0_v, r0_f, duration: float, step: float) -> FlowResult:
    """Explicit Euler on r_c' = -Theta_cc r_c, each source integrated on its own."""
    if step <= 0:
        raise ValueError("step must be positive")
    steps = int(round(duration / step))
    rv, uv = _euler(np.asarray(blocks.vv), np.asarray(r0_v, float), steps, step)
    rf, uf = _euler(np.asarray(blocks.ff), np.asarray(r0_f, float), steps, step)
    return FlowResult(np.arange(steps + 1) * step, rv, rf, uv, uf)


def stable_step(blocks: NTKBlocks, fraction: float = 0.1) -> float:
    lam = max(np.linalg.eigvalsh(blocks.vv)[-1] if blocks.m_v else 0.0, np.linalg.eigvalsh(blocks.ff)[-1] if blocks.m_f else 0.0)
    return fraction / lam if lam > 0 else 1.0


def flow_decoupled(blocks: NTKBlocks, r0_v, r0_f, duration: float, step: float, factor: float = 10.0) -> bool:
    """True when scaling the infra initial residual leaves the vehicle trajectory bitwise identical."""
    a = gradient_flow(blocks, r0_v, r0_f, duration, step)
    b = gradient_flow(blocks, r0_v, factor * np.asarray(r0_f, float), duration, step)
    return bool(np.array_equal(a.r_v, b.r_v))


# -- random instances -----------------------------------------------------------------


def random_spd(rng: np.random.Generator, scale: float = 1.0, cond: float = 20.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    ev = scale * np.exp(rng.uniform(0.0, np.log(cond), 3))
    return (Q * ev) @ Q.T


def random_motion(rng: np.random.Generator) -> MotionSpec:
    v = rng.normal(size=3)
    v *= rng.uniform(1.0, 20.0) / np.linalg.norm(v)
    tv = rng.uniform(0.0, 0.3)
    tf = tv - rng.uniform(-0.3, 0.3)
    return MotionSpec(v, tv, tf)
