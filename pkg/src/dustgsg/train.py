"""Joint optimization of canonical Gaussians and per-source pose timelines."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import quat_from_rotvec, quat_mul
from .metrics import luma, psnr, ssim, ssim_grad, ssim_map
from .render import Camera, GaussianGrads, backward, rasterize, scene_backward
from .scene import GaussianSet, PoseTrajectory, SceneGraph, world_gaussians

log = logging.getLogger(__name__)

LOGIT_CLIP = 15.0
HISTORY_COLUMNS = ["step", "total", "image", "smooth", "drift", "psnr_full", "psnr_dyn", "ssim_full", "ssim_dyn"]


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_smooth: float = 0.01
    lambda_drift: float = 0.01
    drift_decay_end_step: int | None = None
    total_steps: int = 2000
    # losses outside this engine; kept so configs can state them, must stay 0
    lambda_depth: float = 0.0
    lambda_opacity: float = 0.0
    lambda_reg: float = 0.0

    def __post_init__(self):
        if self.drift_decay_end_step is None:
            self.drift_decay_end_step = self.total_steps // 2
        for name in ("lambda_ssim", "lambda_smooth", "lambda_drift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.drift_decay_end_step <= self.total_steps:
            raise ValueError("drift_decay_end_step must lie in [0, total_steps]")
        if self.lambda_depth or self.lambda_opacity or self.lambda_reg:
            raise ValueError("depth, opacity and pose-prior losses are not implemented; their weights must be 0")

    def gamma(self, s: int) -> float:
        return drift_gamma(s, self.drift_decay_end_step)


def drift_gamma(s: int, end_step: int) -> float:
    if end_step <= 0:
        return 0.0
    return max(0.0, 1.0 - s / end_step)


# -- image loss -----------------------------------------------------------------------


def _arr(x):
    return np.asarray(getattr(x, "rgb", x), dtype=float)


def image_loss_and_grad(rendered, target, mask=None, lambda_ssim: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - l) masked-mean L1 + l (1 - masked-mean luma SSIM), with d/d(rendered)."""
    a, b = _arr(rendered), _arr(target)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        log.warning("image loss evaluated on an empty mask")
        return 0.0, np.zeros_like(a)
    diff = a - b
    l1 = float(np.abs(diff)[m].mean())
    g = np.where(m[..., None], np.sign(diff), 0.0) * ((1.0 - lambda_ssim) / (3 * n))
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim:
        xa, xb = luma(a), luma(b)
        s, _ = ssim_map(xa, xb)
        loss += lambda_ssim * (1.0 - float(s[m].mean()))
        gs = ssim_grad(xa, xb, m.astype(float)) * (-lambda_ssim / n)
        g += gs[..., None] / 3.0
    return float(loss), g


def image_loss(rendered, target, mask=None, lambda_ssim: float = 0.2) -> float:
    return image_loss_and_grad(rendered, target, mask, lambda_ssim)[0]


# -- pose regularizers ----------------------------------------------------------------


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else np.zeros_like(x)


def smoothness_term(traj: PoseTrajectory, i: int) -> tuple[float, dict[int, np.ndarray]] | None:
    """Distance of key i from the time-weighted chord of its neighbours; None at the ends."""
    if i <= 0 or i >= len(traj) - 1:
        return None
    t0, t1, t2 = traj.times[i - 1 : i + 2]
    p0, p1, p2 = traj.translations[i - 1 : i + 2]
    w = (t1 - t0) / (t2 - t0)
    e = p1 - (p0 + w * (p2 - p0))
    # a chord miss at the rounding level of the positions is a straight line
    floor = 64 * np.finfo(float).eps * max(1.0, np.abs(traj.translations[i - 1 : i + 2]).max())
    if np.linalg.norm(e) <= floor:
        return 0.0, {}
    u = _unit(e)
    return float(np.linalg.norm(e)), {i - 1: -(1 - w) * u, i: u, i + 1: -w * u}


def smoothness_loss(trajs, i: int | None = None) -> float:
    """Mean chord distance over trajectories with an interior key at i (all interior keys if i is None)."""
    return smoothness_loss_and_grad(trajs, i)[0]


def smoothness_loss_and_grad(trajs, i: int | None = None):
    trajs = [trajs] if isinstance(trajs, PoseTrajectory) else list(trajs)
    terms = []
    for k, tr in enumerate(trajs):
        keys = range(1, len(tr) - 1) if i is None else [i]
        for j in keys:
            r = smoothness_term(tr, j)
            if r is not None:
                terms.append((k, r))
    grads = [np.zeros_like(tr.translations) for tr in trajs]
    if not terms:
        return 0.0, grads
    val = sum(r[0] for _, r in terms) / len(terms)
    for k, (_, gd) in terms:
        for j, g in gd.items():
            grads[k][j] += g / len(terms)
    return float(val), grads


def drift_loss(trajs, inits, s: int, end_step: int, i: int | None = None) -> float:
    return drift_loss_and_grad(trajs, inits, s, end_step, i)[0]


def drift_loss_and_grad(trajs, inits, s: int, end_step: int, i: int | None = None):
    """gamma(s) times the mean translation distance from the initial keys."""
    if isinstance(trajs, PoseTrajectory):
        trajs, inits = [trajs], [inits]
    trajs, inits = list(trajs), list(inits)
    for tr, ini in zip(trajs, inits):
        if len(tr) != len(ini) or not np.array_equal(tr.times, ini.times):
            raise ValueError("optimized and initial trajectories have different keys")
    grads = [np.zeros_like(tr.translations) for tr in trajs]
    gamma = drift_gamma(s, end_step)
    terms = []
    for k, (tr, ini) in enumerate(zip(trajs, inits)):
        keys = range(len(tr)) if i is None else [i]
        for j in keys:
            terms.append((k, j, tr.translations[j] - ini.translations[j]))
    if not terms or gamma == 0.0:
        return 0.0, grads
    val = gamma * sum(np.linalg.norm(d) for _, _, d in terms) / len(terms)
    for k, j, d in terms:
        grads[k][j] += gamma * _unit(d) / len(terms)
    return float(val), grads


# -- data -------------------------------------------------------------------------


@dataclass
class Frame:
    source: str
    index: int
    time: float
    camera: Camera
    target: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) dynamic pixels


@dataclass
class Dataset:
    frames: list[Frame]
    anchors: np.ndarray

    def __post_init__(self):
        self._by = {(f.source, f.index): f for f in self.frames}

    @property
    def num_frames(self) -> int:
        return len(self.anchors)

    def frame(self, source: str, i: int) -> Frame | None:
        return self._by.get((source, i))

    def query_time(self, frame: Frame, mode: str) -> float:
        """Capture time for dust; the shared anchor for the single-timeline baseline."""
        return float(self.anchors[frame.index]) if mode == "single" else frame.time


# -- optimizer state ------------------------------------------------------------------


@dataclass
class LearningRates:
    means: float = 1.6e-4
    colors: float = 2.5e-3
    opacities: float = 5e-2
    log_scales: float = 5e-3
    rotations: float = 5e-3
    pose_translation: tuple[float, float] = (5e-4, 1e-4)
    pose_rotation: tuple[float, float] = (1e-5, 5e-6)
    # Gaussian-attribute rates decay exponentially to this fraction of their start
    attribute_decay: float = 0.01


@dataclass
class OptimState:
    lrs: LearningRates = field(default_factory=LearningRates)
    seed: int = 0
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    moments: dict = field(default_factory=dict)

    def adam(self, key, grad: np.ndarray, lr: float) -> np.ndarray:
        """Adam step direction (already scaled by lr) for one parameter group."""
        m, v, t = self.moments.get(key, (np.zeros_like(grad), np.zeros_like(grad), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.moments[key] = (m, v, t)
        mh = m / (1 - self.beta1**t)
        vh = v / (1 - self.beta2**t)
        return -lr * mh / (np.sqrt(vh) + self.eps)


def _decay(lr: tuple[float, float], s: int, total: int) -> float:
    a, b = lr
    frac = min(max(s / max(total, 1), 0.0), 1.0)
    return a * (b / a) ** frac


# -- gradients ---------------------------------------------------------------------


@dataclass
class StepGrads:
    background: GaussianGrads
    agents: list[GaussianGrads]
    # keyed by id() of the trajectory object, so shared timelines accumulate once
    pose_t: dict = field(default_factory=dict)
    pose_r: dict = field(default_factory=dict)


def _trajectories(scene: SceneGraph) -> list[tuple[int, str, PoseTrajectory]]:
    """Distinct trajectory objects in the scene as (agent index, source, trajectory)."""
    out, seen = [], set()
    for k, a in enumerate(scene.agents):
        for s in ("vehicle", "infra"):
            tr = a.trajectory(s)
            if id(tr) not in seen:
                seen.add(id(tr))
                out.append((k, s, tr))
    return out


def _key_index(traj: PoseTrajectory, t: float) -> int:
    return int(np.argmin(np.abs(traj.times - t)))


@dataclass
class LossParts:
    total: float
    image: float
    smooth: float
    drift: float


def total_loss(
    scene: SceneGraph,
    frames: list[Frame],
    times: list[float],
    init_trajs: dict,
    weights: LossWeights,
    s: int,
    residual_scale: dict | None = None,
) -> tuple[LossParts, StepGrads]:
    """Image loss over `frames` plus pose regularizers at the frames' keys.

    `init_trajs` maps id(trajectory) -> initial copy. `residual_scale` can
    zero a source's image gradient (cross-source isolation checks).
    """
    grads = StepGrads(GaussianGrads.zeros(len(scene.background)), [GaussianGrads.zeros(len(a.canonical)) for a in scene.agents])
    trajs = _trajectories(scene)
    for _, _, tr in trajs:
        grads.pose_t[id(tr)] = np.zeros_like(tr.translations)
        grads.pose_r[id(tr)] = np.zeros_like(tr.translations)
    img_total = 0.0
    for fr, t in zip(frames, times):
        world = world_gaussians(scene, fr.source, t)
        raster = rasterize(fr.camera, world)
        loss, g_img = image_loss_and_grad(raster.image, fr.target, None, weights.lambda_ssim)
        img_total += loss
        if residual_scale is not None:
            g_img = g_img * residual_scale.get(fr.source, 1.0)
        sg = scene_backward(scene, world, backward(raster, g_img))
        grads.background += sg.background
        for k, a in enumerate(scene.agents):
            grads.agents[k] += sg.agents[k]
            tr = a.trajectory(fr.source)
            i0, i1, w = tr.bracket(t)
            for idx, wt in ((i0, 1.0 - w), (i1, w)):
                if wt:
                    grads.pose_t[id(tr)][idx] += wt * sg.poses[k][:3]
                    grads.pose_r[id(tr)][idx] += wt * sg.poses[k][3:]
    # regularizers at each distinct trajectory's key for this step's frames
    smooth = drift = 0.0
    gamma = weights.gamma(s)
    for fr, t in zip(frames, times):
        sel = []
        for k, src, tr in trajs:
            if src == fr.source or (src == "vehicle" and scene.agents[k].is_single_timeline):
                sel.append(tr)
        if not sel:
            continue
        keys = [_key_index(tr, t) for tr in sel]
        # mean over agents with an interior key at this frame
        terms = [(tr, smoothness_term(tr, i)) for tr, i in zip(sel, keys)]
        terms = [(tr, r) for tr, r in terms if r is not None]
        if terms and weights.lambda_smooth:
            smooth += sum(r[0] for _, r in terms) / len(terms)
            for tr, r in terms:
                for j, g in r[1].items():
                    grads.pose_t[id(tr)][j] += weights.lambda_smooth * g / len(terms)
        if gamma and weights.lambda_drift:
            d = 0.0
            for tr, i in zip(sel, keys):
                dev = tr.translations[i] - init_trajs[id(tr)].translations[i]
                d += np.linalg.norm(dev)
                grads.pose_t[id(tr)][i] += weights.lambda_drift * gamma * _unit(dev) / len(sel)
            drift += gamma * d / len(sel)
    total = img_total + weights.lambda_smooth * smooth + weights.lambda_drift * drift
    return LossParts(float(total), float(img_total), float(smooth), float(drift)), grads


# -- updates -------------------------------------------------------------------------


def _rotate_rows(quats: np.ndarray, step: np.ndarray) -> np.ndarray:
    # rows with a zero step are left bitwise alone (renormalizing would nudge them)
    moved = step.any(axis=1)
    if not moved.any():
        return quats
    out = quats.copy()
    q = quat_mul(quat_from_rotvec(step[moved]), quats[moved])
    out[moved] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return out


def _update_set(state: OptimState, prefix: str, gs: GaussianSet, g: GaussianGrads, lr: LearningRates, mean_scale: float, f: float = 1.0) -> None:
    if len(gs) == 0:
        return
    gs.means += state.adam((prefix, "means"), g.means, f * lr.means * mean_scale)
    gs.colors = np.clip(gs.colors + state.adam((prefix, "colors"), g.colors, f * lr.colors), 0.0, 1.0)
    dlogit = g.opacities * gs.opacities * (1.0 - gs.opacities)
    step = state.adam((prefix, "opacity"), dlogit, f * lr.opacities)
    moved = step != 0
    if moved.any():
        o = gs.opacities[moved]
        logit = np.clip(np.log(o) - np.log1p(-o) + step[moved], -LOGIT_CLIP, LOGIT_CLIP)
        gs.opacities = gs.opacities.copy()
        gs.opacities[moved] = 1.0 / (1.0 + np.exp(-logit))
    gs.log_scales += state.adam((prefix, "log_scales"), g.log_scales, f * lr.log_scales)
    gs.quats = _rotate_rows(gs.quats, state.adam((prefix, "rot"), g.rotations, f * lr.rotations))


def apply_step(scene: SceneGraph, grads: StepGrads, state: OptimState, total_steps: int, mean_scale: float = 1.0, train_poses: bool = True) -> None:
    lr = state.lrs
    f = _decay((1.0, lr.attribute_decay), state.step, total_steps)
    _update_set(state, "bg", scene.background, grads.background, lr, mean_scale, f)
    for k, a in enumerate(scene.agents):
        _update_set(state, f"agent{k}", a.canonical, grads.agents[k], lr, mean_scale, f)
    if train_poses:
        lt = _decay(lr.pose_translation, state.step, total_steps)
        lrot = _decay(lr.pose_rotation, state.step, total_steps)
        for k, src, tr in _trajectories(scene):
            key = f"pose{k}:{src}"
            tr.translations += state.adam((key, "t"), grads.pose_t[id(tr)], lt)
            tr.quats = _rotate_rows(tr.quats, state.adam((key, "r"), grads.pose_r[id(tr)], lrot))
    state.step += 1


# -- loop ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainResult:
    scene: SceneGraph
    history: list[dict]


def optimize(
    scene: SceneGraph,
    dataset: Dataset,
    weights: LossWeights,
    state: OptimState | None = None,
    mode: str = "dust",
    mean_lr_scale: float = 1.0,
    eval_every: int = 0,
    checkpoint=None,
    checkpoint_every: int = 0,
    train_poses: bool = True,
) -> TrainResult:
    """Adam over all parameters; step s uses frame pair s mod K. Mutates `scene`."""
    state = state or OptimState()
    init_trajs = {id(tr): tr.copy() for _, _, tr in _trajectories(scene)}
    history = []
    initial = None
    bad = 0
    K = dataset.num_frames
    for s in range(weights.total_steps):
        i = s % K
        frames = [f for f in (dataset.frame("vehicle", i), dataset.frame("infra", i)) if f is not None]
        times = [dataset.query_time(f, mode) for f in frames]
        parts, grads = total_loss(scene, frames, times, init_trajs, weights, s)
        if not math.isfinite(parts.total):
            raise TrainingDiverged(f"non-finite loss at step {s}", history)
        row = {"step": s, "total": parts.total, "image": parts.image, "smooth": parts.smooth, "drift": parts.drift}
        if eval_every and (s % eval_every == 0):
            row.update(evaluate_summary(scene, dataset, mode))
        history.append(row)
        if initial is None:
            initial = parts.total
        bad = bad + 1 if parts.total > 10.0 * initial and initial > 0 else 0
        if bad >= 50:
            raise TrainingDiverged(f"loss above 10x initial ({initial:.4g}) for 50 steps at step {s}: {parts.total:.4g}", history)
        apply_step(scene, grads, state, weights.total_steps, mean_lr_scale, train_poses)
        if checkpoint and checkpoint_every and (s + 1) % checkpoint_every == 0:
            checkpoint(s + 1, scene)
    # closing row: image loss per frame pair over the whole sequence, plus metrics
    img = 0.0
    for f in dataset.frames:
        r = rasterize(f.camera, world_gaussians(scene, f.source, dataset.query_time(f, mode)))
        img += image_loss(r.image, f.target, None, weights.lambda_ssim)
    img /= max(K, 1)
    final = {"step": weights.total_steps, "total": img, "image": img, "smooth": 0.0, "drift": 0.0}
    final.update(evaluate_summary(scene, dataset, mode))
    history.append(final)
    return TrainResult(scene, history)


# -- evaluation ------------------------------------------------------------------------


@dataclass
class FrameMetrics:
    source: str
    frame: int
    psnr_full: float
    ssim_full: float
    psnr_dyn: float | None
    ssim_dyn: float | None


def evaluate(scene: SceneGraph, dataset: Dataset, mode: str) -> list[FrameMetrics]:
    out = []
    for f in dataset.frames:
        r = rasterize(f.camera, world_gaussians(scene, f.source, dataset.query_time(f, mode)))
        img = np.clip(r.image, 0.0, 1.0)
        dyn = f.mask.any()
        out.append(
            FrameMetrics(
                f.source,
                f.index,
                psnr(img, f.target),
                ssim(img, f.target),
                psnr(img, f.target, f.mask) if dyn else None,
                ssim(img, f.target, f.mask) if dyn else None,
            )
        )
    return out


def _finite_mean(vals) -> float:
    v = [x for x in vals if x is not None and math.isfinite(x)]
    return float(np.mean(v)) if v else float("nan")


def evaluate_summary(scene: SceneGraph, dataset: Dataset, mode: str) -> dict:
    m = evaluate(scene, dataset, mode)
    return {
        "psnr_full": _finite_mean(x.psnr_full for x in m),
        "psnr_dyn": _finite_mean(x.psnr_dyn for x in m),
        "ssim_full": _finite_mean(x.ssim_full for x in m),
        "ssim_dyn": _finite_mean(x.ssim_dyn for x in m),
    }


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([_fmt(row.get(c)) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))
