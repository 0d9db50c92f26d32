"""Differentiable EWA splatting on the CPU.

The rasterizer builds a flat list of (gaussian, pixel) fragments inside each
footprint's 3-sigma ellipse, orders them per pixel by camera depth (ties
broken by provenance) and composites front to back. Compositing runs on a
padded (pixel, depth-slot) table so products happen in a fixed order.

Gradients are exact for the rendered image, apart from the depth sort and
the truncation boundary, which are piecewise constant. `linearized=True`
returns the influence-vector form instead: only the direct path through the
projected mean, with blend weights and projected covariance held fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import RigidTransform, hat, vee
from .scene import SceneGraph, WorldGaussians, check_source, world_gaussians

NEAR_PLANE = 0.01
LOWPASS = 0.3
KERNEL_RADIUS = 3.0
MASK_ALPHA = 1.0 / 255.0


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: RigidTransform  # world -> camera
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> Camera:
        """Camera at `eye` looking at `target`; x right, y down, z forward."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])  # rows: camera axes in world coordinates
        ext = RigidTransform.from_matrix(R, -R @ eye)
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(float(fx), float(fy), float(cx), float(cy), ext, int(width), int(height))

    def to_dict(self) -> dict:
        e = self.extrinsics
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation_wxyz": e.rotation.as_array().tolist(),
            "translation": e.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        from .geom import UnitQuaternion

        ext = RigidTransform(UnitQuaternion.normalized(d["rotation_wxyz"]), d["translation"])
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], ext, int(d["width"]), int(d["height"]))


@dataclass
class SplatFootprint:
    mean2d: np.ndarray
    cov2d: np.ndarray
    proj_jacobian: np.ndarray  # d mean2d / d world mean, 2x3
    camera_depth: float


@dataclass
class InfluenceSample:
    gaussian: int
    pixel: np.ndarray
    phi: np.ndarray  # (channel, xyz): one world-space influence vector per color channel
    blend_weight: float
    kernel_value: float


@dataclass
class FisherMatrix:
    a: np.ndarray
    lambda_min: float
    visible: bool = True

    @classmethod
    def from_matrix(cls, a, visible: bool = True) -> FisherMatrix:
        a = np.asarray(a, dtype=float)
        a = 0.5 * (a + a.T)
        lam = float(np.linalg.eigvalsh(a)[0]) if visible else 0.0
        return cls(a, max(lam, 0.0) if lam > -1e-10 else lam, visible)


@dataclass
class ImageBuffer:
    rgb: np.ndarray  # (H, W, 3), unclamped
    mask: np.ndarray | None = None  # (H, W) bool, dynamic pixels

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def clamped(self) -> np.ndarray:
        return np.clip(self.rgb, 0.0, 1.0)


# -- projection ------------------------------------------------------------------


@dataclass
class Projection:
    visible: np.ndarray  # (N,) bool
    p_cam: np.ndarray  # (N, 3)
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), floor included
    conic: np.ndarray  # (N, 2, 2)
    j_cam: np.ndarray  # (N, 2, 3), d mean2d / d camera-frame point
    cov_cam: np.ndarray  # (N, 3, 3)
    bbox: np.ndarray  # (N, 4) x0, x1, y0, y1 inclusive

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]


def _project_all(camera: Camera, means: np.ndarray, covs: np.ndarray) -> Projection:
    Rw = camera.extrinsics.R
    p = means @ Rw.T + camera.extrinsics.translation
    n = len(p)
    z = p[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)
    x, y = p[:, 0], p[:, 1]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * x / zs**2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * y / zs**2
    cov_cam = Rw @ covs @ Rw.T
    cov2d = J @ cov_cam @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    det = np.where(front, det, 1.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det
    mean2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    rx = KERNEL_RADIUS * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
    ry = KERNEL_RADIUS * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
    with np.errstate(invalid="ignore"):
        x0 = np.maximum(np.ceil(mean2d[:, 0] - rx), 0)
        x1 = np.minimum(np.floor(mean2d[:, 0] + rx), camera.width - 1)
        y0 = np.maximum(np.ceil(mean2d[:, 1] - ry), 0)
        y1 = np.minimum(np.floor(mean2d[:, 1] + ry), camera.height - 1)
    visible = front & np.isfinite(mean2d).all(axis=1) & (x0 <= x1) & (y0 <= y1)
    bbox = np.where(visible[:, None], np.stack([x0, x1, y0, y1], axis=1), 0).astype(np.int64)
    return Projection(visible, p, mean2d, cov2d, conic, J, cov_cam, bbox)


def project(camera: Camera, mean, covariance) -> SplatFootprint | None:
    """EWA footprint of one world Gaussian, or None when behind the near plane."""
    pr = _project_all(camera, np.asarray(mean, dtype=float).reshape(1, 3), np.asarray(covariance, dtype=float).reshape(1, 3, 3))
    if pr.p_cam[0, 2] <= NEAR_PLANE:
        return None
    Jw = pr.j_cam[0] @ camera.extrinsics.R
    return SplatFootprint(pr.mean2d[0], pr.cov2d[0], Jw, float(pr.p_cam[0, 2]))


# -- rasterization ---------------------------------------------------------------


@dataclass
class Raster:
    """Rendered image plus everything the backward pass needs."""

    camera: Camera
    gaussians: WorldGaussians
    proj: Projection
    image: np.ndarray  # (H, W, 3)
    # fragments, sorted by (pixel, depth rank)
    gid: np.ndarray
    pix: np.ndarray
    d: np.ndarray  # (F, 2) pixel - mean2d
    kernel: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    after: np.ndarray  # (F, 3) color composited behind each fragment
    row: np.ndarray
    slot: np.ndarray
    front_owner: np.ndarray = field(default=None)  # (H*W,) owner of front-most contributing gaussian, -2 for none

    @property
    def blend_weight(self) -> np.ndarray:
        return self.gaussians.opacities[self.gid] * self.transmittance

    def dynamic_mask(self) -> np.ndarray:
        return (self.front_owner >= 0).reshape(self.camera.height, self.camera.width)


def _fragments(camera: Camera, proj: Projection):
    vis = np.flatnonzero(proj.visible)
    if len(vis) == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, np.zeros((0, 2)), np.zeros(0)
    x0, x1, y0, y1 = proj.bbox[vis].T
    wx = x1 - x0 + 1
    wy = y1 - y0 + 1
    counts = wx * wy
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local_g = np.repeat(np.arange(len(vis)), counts)
    local = np.arange(int(counts.sum())) - starts[local_g]
    px = x0[local_g] + local % wx[local_g]
    py = y0[local_g] + local // wx[local_g]
    g = vis[local_g]
    d = np.stack([px - proj.mean2d[g, 0], py - proj.mean2d[g, 1]], axis=1)
    Q = proj.conic[g]
    m2 = Q[:, 0, 0] * d[:, 0] ** 2 + 2.0 * Q[:, 0, 1] * d[:, 0] * d[:, 1] + Q[:, 1, 1] * d[:, 1] ** 2
    keep = m2 < KERNEL_RADIUS**2
    return g[keep], (py * camera.width + px)[keep], d[keep], np.exp(-0.5 * m2[keep])


def depth_ranks(gaussians: WorldGaussians, depth: np.ndarray) -> np.ndarray:
    order = np.lexsort((gaussians.provenance_key, depth))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return rank


def rasterize(camera: Camera, gaussians: WorldGaussians) -> Raster:
    H, W = camera.height, camera.width
    proj = _project_all(camera, gaussians.means, gaussians.covariances)
    gid, pix, d, G = _fragments(camera, proj)
    rank = depth_ranks(gaussians, proj.depth)
    order = np.argsort(pix * max(len(gaussians), 1) + rank[gid], kind="stable")
    gid, pix, d, G = gid[order], pix[order], d[order], G[order]
    alpha = gaussians.opacities[gid] * G

    image = np.zeros((H * W, 3))
    front_owner = np.full(H * W, -2, dtype=np.int64)
    nf = len(gid)
    if nf == 0:
        e = np.zeros(0, dtype=np.int64)
        return Raster(camera, gaussians, proj, image.reshape(H, W, 3), gid, pix, d, G, alpha,
                      np.zeros(0), np.zeros((0, 3)), e, e, front_owner)

    new_seg = np.empty(nf, dtype=bool)
    new_seg[0] = True
    new_seg[1:] = pix[1:] != pix[:-1]
    seg_start = np.flatnonzero(new_seg)
    row = np.cumsum(new_seg) - 1
    slot = np.arange(nf) - seg_start[row]
    P, L = len(seg_start), int(slot.max()) + 1

    A = np.zeros((P, L))
    A[row, slot] = alpha
    T = np.ones((P, L))
    T[:, 1:] = np.cumprod(1.0 - A[:, :-1], axis=1)
    trans = T[row, slot]

    contrib = (trans * alpha)[:, None] * gaussians.colors[gid]
    total = np.add.reduceat(contrib, seg_start, axis=0)
    # color composited strictly behind each fragment, from a running sum
    run = np.cumsum(contrib, axis=0)
    before_seg = run[seg_start] - contrib[seg_start]
    after = total[row] - (run - before_seg[row])
    pix_ids = pix[seg_start]
    image[pix_ids] = total

    # front-most fragment whose alpha clears the visibility threshold
    cand = np.where(alpha >= MASK_ALPHA, np.arange(nf), nf)
    first = np.minimum.reduceat(cand, seg_start)
    has = first < nf
    front_owner[pix_ids[has]] = gaussians.owner[gid[first[has]]]

    return Raster(camera, gaussians, proj, image.reshape(H, W, 3), gid, pix, d, G, alpha,
                  trans, after, row, slot, front_owner)


def render(camera: Camera, gaussians: WorldGaussians) -> ImageBuffer:
    r = rasterize(camera, gaussians)
    return ImageBuffer(r.image, r.dynamic_mask())


def render_scene(camera: Camera, scene: SceneGraph, source: str, t: float) -> Raster:
    return rasterize(camera, world_gaussians(scene, source, t))


# -- backward --------------------------------------------------------------------


@dataclass
class WorldGrads:
    means: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


def _bincount3(idx, w, n):
    return np.stack([np.bincount(idx, weights=w[:, k], minlength=n) for k in range(w.shape[1])], axis=1)


def backward(raster: Raster, grad_image: np.ndarray, linearized: bool = False) -> WorldGrads:
    """Gradient of a scalar loss w.r.t. world Gaussian parameters.

    `grad_image` is dL/d(image), shape (H, W, 3). With `linearized` the means
    gradient is the influence-vector form sum_u g(u) . phi_n(u).
    """
    cam = raster.camera
    grad_image = np.asarray(grad_image, dtype=float)
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ValueError(f"gradient image shape {grad_image.shape} does not match camera {(cam.height, cam.width, 3)}")
    gs = raster.gaussians
    n = len(gs)
    out = WorldGrads(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros(n), np.zeros((n, 3)))
    if len(raster.gid) == 0:
        return out
    gid, d, G = raster.gid, raster.d, raster.kernel
    op = gs.opacities[gid]
    col = gs.colors[gid]
    gp = grad_image.reshape(-1, 3)[raster.pix]

    direct = raster.transmittance[:, None] * col
    if linearized:
        dC_dalpha = direct
    else:
        dC_dalpha = direct - raster.after / (1.0 - raster.alpha)[:, None]
    dL_dalpha = np.einsum("fc,fc->f", gp, dC_dalpha)

    out.colors = _bincount3(gid, gp * (raster.transmittance * raster.alpha)[:, None], n)
    out.opacities = np.bincount(gid, weights=dL_dalpha * G, minlength=n)

    dL_dG = dL_dalpha * op
    Q = raster.proj.conic[gid]
    Qd = np.einsum("fij,fj->fi", Q, d)
    dL_dmean2d = _bincount3(gid, (dL_dG * G)[:, None] * Qd, n)

    # m2 = d^T Q d  ->  dL/dQ = -1/2 G dL/dG d d^T
    s = -0.5 * dL_dG * G
    dQ = np.zeros((n, 2, 2))
    dQ[:, 0, 0] = np.bincount(gid, weights=s * d[:, 0] ** 2, minlength=n)
    dQ[:, 1, 1] = np.bincount(gid, weights=s * d[:, 1] ** 2, minlength=n)
    dQ[:, 0, 1] = dQ[:, 1, 0] = np.bincount(gid, weights=s * d[:, 0] * d[:, 1], minlength=n)

    pr = raster.proj
    vis = pr.visible
    Rw = cam.extrinsics.R
    J = pr.j_cam
    dL_dp = np.einsum("nji,nj->ni", J, dL_dmean2d)
    if not linearized:
        conic = pr.conic
        dS = -conic @ dQ @ conic  # dL / d cov2d
        dS = np.where(vis[:, None, None], dS, 0.0)
        dcov_cam = J.transpose(0, 2, 1) @ dS @ J
        out.covariances = Rw.T @ dcov_cam @ Rw
        dJ = 2.0 * dS @ J @ pr.cov_cam
        x, y, z = pr.p_cam[:, 0], pr.p_cam[:, 1], np.where(vis, pr.p_cam[:, 2], 1.0)
        fx, fy = cam.fx, cam.fy
        dL_dp[:, 0] += dJ[:, 0, 2] * (-fx / z**2)
        dL_dp[:, 1] += dJ[:, 1, 2] * (-fy / z**2)
        dL_dp[:, 2] += (
            dJ[:, 0, 0] * (-fx / z**2)
            + dJ[:, 0, 2] * (2.0 * fx * x / z**3)
            + dJ[:, 1, 1] * (-fy / z**2)
            + dJ[:, 1, 2] * (2.0 * fy * y / z**3)
        )
    out.means = np.where(vis[:, None], dL_dp @ Rw, 0.0)
    return out


# -- chain rule into scene parameters ------------------------------------------


@dataclass
class GaussianGrads:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray  # left tangent, (N, 3)
    opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> GaussianGrads:
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: GaussianGrads) -> GaussianGrads:
        for name in ("means", "log_scales", "rotations", "opacities", "colors"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self


@dataclass
class SceneGrads:
    background: GaussianGrads
    agents: list[GaussianGrads]
    # pose gradient (translation 3, left rotation tangent 3) per agent at the queried time
    poses: list[np.ndarray]


def _vee_batch(M: np.ndarray) -> np.ndarray:
    return 0.5 * np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)


def _cov_param_grads(gset, dcov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R = gset.rotations()
    cov = gset.covariances()
    s2 = np.exp(2.0 * gset.log_scales)
    diag = np.einsum("nji,njk,nki->ni", R, dcov, R)
    d_log = 2.0 * s2 * diag
    d_rot = -2.0 * _vee_batch(cov @ dcov - dcov @ cov)
    return d_log, d_rot


def scene_backward(scene: SceneGraph, world: WorldGaussians, wg: WorldGrads) -> SceneGrads:
    """Map world-space gradients onto background, canonical and pose parameters."""
    bgmask = world.owner == -1
    bg = scene.background
    bl, br = _cov_param_grads(bg, wg.covariances[bgmask])
    bgg = GaussianGrads(wg.means[bgmask], bl, br, wg.opacities[bgmask], wg.colors[bgmask])
    agents, poses = [], []
    for k, agent in enumerate(scene.agents):
        m = world.owner == k
        R, _ = world.poses[k]
        gmu = wg.means[m]
        gcov = wg.covariances[m]
        c = agent.canonical
        dcov_canon = R.T @ gcov @ R
        al, ar = _cov_param_grads(c, dcov_canon)
        agents.append(GaussianGrads(gmu @ R, al, ar, wg.opacities[m], wg.colors[m]))
        arm = c.means @ R.T
        rot = np.cross(arm, gmu).sum(axis=0)
        cov_w = world.covariances[m]
        rot += (-2.0 * _vee_batch(cov_w @ gcov - gcov @ cov_w)).sum(axis=0)
        poses.append(np.concatenate([gmu.sum(axis=0), rot]))
    return SceneGrads(bgg, agents, poses)


def grad_canonical_means(camera: Camera, scene: SceneGraph, source: str, t: float, residual, linearized: bool = False) -> list[np.ndarray]:
    """d(1/2 sum r^2)/d(canonical means) per agent, r = rendered - target."""
    world = world_gaussians(scene, check_source(source), t)
    raster = rasterize(camera, world)
    g = scene_backward(scene, world, backward(raster, residual, linearized=linearized))
    return [a.means for a in g.agents]


def grad_pose(camera: Camera, scene: SceneGraph, agent_id: str, source: str, t: float, residual) -> np.ndarray:
    """6-vector gradient w.r.t. the source's pose of one agent at time t.

    Rotation part is w.r.t. a left perturbation R <- exp([w]x) R about the
    agent origin. The other source's trajectory is not touched.
    """
    world = world_gaussians(scene, check_source(source), t)
    raster = rasterize(camera, world)
    g = scene_backward(scene, world, backward(raster, residual))
    idx = [a.agent_id for a in scene.agents].index(agent_id)
    return g.poses[idx]


# -- influence vectors and Fisher information ----------------------------------------


def influence_vectors(camera: Camera, gaussians: WorldGaussians, requests) -> list[InfluenceSample]:
    """phi_n(u) for (n, u) requests; u may be fractional.

    Evaluated directly from the projection (no fragment table). Pairs outside
    the truncated support of n are skipped.
    """
    proj = _project_all(camera, gaussians.means, gaussians.covariances)
    rank = depth_ranks(gaussians, proj.depth)
    Rw = camera.extrinsics.R
    out = []
    for n, u in requests:
        u = np.asarray(u, dtype=float)
        if not proj.visible[n] and proj.p_cam[n, 2] <= NEAR_PLANE:
            continue
        d = u - proj.mean2d[n]
        m2 = float(d @ proj.conic[n] @ d)
        if m2 >= KERNEL_RADIUS**2:
            continue
        front = np.flatnonzero(proj.visible & (rank < rank[n]))
        T = 1.0
        for m in front[np.argsort(rank[front])]:
            dm = u - proj.mean2d[m]
            mm = float(dm @ proj.conic[m] @ dm)
            if mm < KERNEL_RADIUS**2:
                T *= 1.0 - gaussians.opacities[m] * np.exp(-0.5 * mm)
        Gk = float(np.exp(-0.5 * m2))
        w = float(gaussians.opacities[n] * T)
        Jw = proj.j_cam[n] @ Rw
        v = Jw.T @ (proj.conic[n] @ d)
        phi = np.outer(gaussians.colors[n], v) * (w * Gk)
        out.append(InfluenceSample(n, u, phi, w, Gk))
    return out


def fisher_matrices(raster: Raster) -> list[FisherMatrix]:
    """A_n = sum over support pixels and channels of phi phi^T, for every Gaussian."""
    gs = raster.gaussians
    n = len(gs)
    A = np.zeros((n, 3, 3))
    if len(raster.gid):
        gid = raster.gid
        Rw = raster.camera.extrinsics.R
        Jw = raster.proj.j_cam @ Rw
        Qd = np.einsum("fij,fj->fi", raster.proj.conic[gid], raster.d)
        v = np.einsum("fji,fj->fi", Jw[gid], Qd)  # (F, 3)
        scale = raster.blend_weight * raster.kernel
        csq = (gs.colors[gid] ** 2).sum(axis=1)  # sum over channels of c_ch^2
        wgt = scale**2 * csq
        outer = wgt[:, None, None] * v[:, :, None] * v[:, None, :]
        for i in range(3):
            for j in range(3):
                A[:, i, j] = np.bincount(gid, weights=outer[:, i, j], minlength=n)
    counts = np.bincount(raster.gid, minlength=n)
    return [FisherMatrix.from_matrix(A[k], visible=bool(counts[k] > 0)) for k in range(n)]


def fisher_matrix(camera: Camera, gaussians: WorldGaussians, n: int) -> FisherMatrix:
    raster = rasterize(camera, gaussians)
    return fisher_matrices(raster)[n]


# -- image files ---------------------------------------------------------------


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=float)
    h, w, _ = rgb.shape
    data = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(float) / maxval


def write_float_dump(path, rgb: np.ndarray) -> None:
    """uint32 width, uint32 height, then row-major RGB float32, little-endian."""
    rgb = np.asarray(rgb)
    h, w, c = rgb.shape
    Path(path).write_bytes(struct.pack("<II", w, h) + rgb.astype("<f4").tobytes())


def read_float_dump(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w, 3).astype(float)


def write_mask(path, mask: np.ndarray) -> None:
    """Dynamic mask as binary PGM (P5), 255 for dynamic pixels."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + (mask.astype(np.uint8) * 255).tobytes())


def read_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w) > 0


__all__ = [
    "Camera",
    "SplatFootprint",
    "InfluenceSample",
    "FisherMatrix",
    "ImageBuffer",
    "Raster",
    "WorldGrads",
    "SceneGrads",
    "GaussianGrads",
    "project",
    "rasterize",
    "render",
    "render_scene",
    "backward",
    "scene_backward",
    "grad_canonical_means",
    "grad_pose",
    "influence_vectors",
    "fisher_matrices",
    "fisher_matrix",
    "write_ppm",
    "read_ppm",
    "write_float_dump",
    "read_float_dump",
    "hat",
    "vee",
]
