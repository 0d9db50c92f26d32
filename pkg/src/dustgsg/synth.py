"""Synthetic two-source driving scenes with exact ground truth.

World axes: x along the road, y across it, z up. Agents drive along +x at
constant velocity. The vehicle camera rides along the road looking sideways
(+y); the infrastructure camera is fixed on a pole looking down at the lanes.
Parked cars appear in the annotations only, as static anchors for the
extrinsic correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import ConvexHull

from .align import CornerBox, box_corners, load_boxes, save_boxes
from .geom import RigidTransform, UnitQuaternion, so3_exp
from .render import (
    Camera,
    rasterize,
    read_float_dump,
    read_mask,
    write_float_dump,
    write_mask,
    write_ppm,
)
from .scene import AgentNode, GaussianSet, PoseTrajectory, SceneGraph, load_scene, save_scene, world_gaussians
from .train import Dataset, Frame

CAR_EXTENT = (4.0, 1.8, 1.5)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VehicleCameraSpec(_Strict):
    start: tuple[float, float, float] = (0.0, -3.5, 3.0)
    velocity: tuple[float, float, float] = (9.0, 0.0, 0.0)
    look: tuple[float, float, float] = (0.0, 1.0, -0.45)
    focal: float = Field(40.0, gt=0)


class InfraCameraSpec(_Strict):
    position: tuple[float, float, float] = (8.0, -6.0, 7.0)
    target: tuple[float, float, float] = (8.0, 3.0, 0.0)
    focal: float = Field(28.0, gt=0)
    # yaw of the infra rig frame about z, degrees (annotations are expressed in it)
    rig_yaw_deg: float = 20.0


class NoiseSpec(_Strict):
    rot_deg: float = Field(2.0, ge=0)
    trans_m: float = Field(0.3, ge=0)
    corner_sigma: float = Field(0.02, ge=0)
    dropout: float = Field(0.0, ge=0, le=1)


class SynthConfig(_Strict):
    seed: int = 0
    num_agents: int = Field(2, ge=1)
    speeds: list[float] = [10.0, 10.0]
    lanes: list[float] = [1.5, 4.5]
    start_x: list[float] = [-1.0, -3.0]
    delta_tau: float = 0.1
    frame_rate: float = Field(10.0, gt=0)
    num_frames: int = Field(20, ge=2)
    width: int = Field(64, ge=8)
    height: int = Field(64, ge=8)
    gaussians_per_agent: int = Field(30, ge=1)
    background_gaussians: int = Field(200, ge=0)
    parked_cars: int = Field(5, ge=0)
    timestamp_jitter: float = Field(0.0, ge=0)
    vehicle_camera: VehicleCameraSpec = VehicleCameraSpec()
    infra_camera: InfraCameraSpec = InfraCameraSpec()
    noise: NoiseSpec = NoiseSpec()

    @model_validator(mode="after")
    def _per_agent_lists(self):
        for name in ("speeds", "lanes", "start_x"):
            if len(getattr(self, name)) != self.num_agents:
                raise ValueError(f"{name} needs one entry per agent ({self.num_agents})")
        return self


@dataclass
class CaptureSchedule:
    vehicle_times: np.ndarray
    infra_times: np.ndarray
    anchors: np.ndarray

    @property
    def num_frames(self) -> int:
        return len(self.vehicle_times)

    @property
    def delta_tau(self) -> np.ndarray:
        return self.vehicle_times - self.infra_times

    def times(self, source: str) -> np.ndarray:
        return self.vehicle_times if source == "vehicle" else self.infra_times

    def to_dict(self) -> dict:
        return {"vehicle_times": self.vehicle_times.tolist(), "infra_times": self.infra_times.tolist(), "anchors": self.anchors.tolist()}

    @classmethod
    def from_dict(cls, d) -> CaptureSchedule:
        return cls(np.array(d["vehicle_times"], float), np.array(d["infra_times"], float), np.array(d["anchors"], float))


def make_schedule(cfg: SynthConfig, rng: np.random.Generator | None = None) -> CaptureSchedule:
    tf = np.arange(cfg.num_frames) / cfg.frame_rate
    tv = tf + cfg.delta_tau
    if cfg.timestamp_jitter and rng is not None:
        tv = tv + rng.normal(0.0, cfg.timestamp_jitter, cfg.num_frames)
        if np.any(np.diff(tv) <= 0):
            raise ValueError("timestamp jitter breaks frame ordering")
    return CaptureSchedule(tv, tf, 0.5 * (tv + tf))


@dataclass
class GroundTruth:
    cfg: SynthConfig
    scene: SceneGraph
    schedule: CaptureSchedule
    velocities: np.ndarray  # (agents, 3)
    origins: np.ndarray  # agent box centers at t = 0
    vehicle_cameras: list[Camera]
    infra_camera: Camera
    ego_poses: list[RigidTransform]  # vehicle body -> world per frame
    infra_rig: RigidTransform  # infra sensor frame -> world
    parked: list[RigidTransform]  # parked car poses in world

    def camera(self, source: str, i: int) -> Camera:
        return self.vehicle_cameras[i] if source == "vehicle" else self.infra_camera

    def true_extrinsic(self, i: int) -> RigidTransform:
        """infra sensor frame -> vehicle body frame at frame i."""
        return self.ego_poses[i].inverse().compose(self.infra_rig)

    def agent_position(self, k: int, t: float) -> np.ndarray:
        return self.origins[k] + self.velocities[k] * t


def _random_quats(rng, n, spread: float) -> np.ndarray:
    from .geom import quat_from_rotvec

    return quat_from_rotvec(rng.normal(0.0, spread, (n, 3)))


def _car_gaussians(rng: np.random.Generator, n: int, base_color: np.ndarray) -> GaussianSet:
    ext = np.array(CAR_EXTENT)
    # points on the box surface: pick a face axis, push that coordinate to the face
    pts = rng.uniform(-0.5, 0.5, (n, 3)) * ext
    axis = rng.integers(0, 3, n)
    side = rng.choice([-0.5, 0.5], n)
    pts[np.arange(n), axis] = side * ext[axis] * 0.85
    scales = rng.uniform(0.25, 0.45, (n, 3))
    cols = np.clip(base_color + rng.normal(0.0, 0.12, (n, 3)), 0.02, 0.98)
    return GaussianSet(pts, np.log(scales), _random_quats(rng, n, 0.5), rng.uniform(0.75, 0.95, n), cols)


def _background(rng: np.random.Generator, n: int) -> GaussianSet:
    if n == 0:
        return GaussianSet.empty()
    n_wall = n // 4
    n_ground = n - n_wall
    g = np.stack([rng.uniform(-8.0, 28.0, n_ground), rng.uniform(-1.5, 9.0, n_ground), np.zeros(n_ground)], axis=1)
    gs = np.stack([rng.uniform(0.6, 1.1, n_ground), rng.uniform(0.6, 1.1, n_ground), np.full(n_ground, 0.05)], axis=1)
    w = np.stack([rng.uniform(-8.0, 28.0, n_wall), np.full(n_wall, 9.0), rng.uniform(0.3, 4.0, n_wall)], axis=1)
    ws = np.stack([rng.uniform(0.7, 1.3, n_wall), np.full(n_wall, 0.05), rng.uniform(0.6, 1.1, n_wall)], axis=1)
    # yaw-only jitter keeps the flat axis aligned with its surface
    yaw = rng.uniform(-np.pi, np.pi, n)
    quats = np.stack([np.cos(yaw / 2), np.zeros(n), np.zeros(n), np.sin(yaw / 2)], axis=1)
    quats[n_ground:] = np.array([1.0, 0.0, 0.0, 0.0])
    road = np.array([0.35, 0.35, 0.38]) + rng.normal(0.0, 0.08, (n_ground, 3))
    on_lane = (g[:, 1] > 0) & (g[:, 1] < 6)
    road[~on_lane] = np.array([0.3, 0.55, 0.25]) + rng.normal(0.0, 0.08, ((~on_lane).sum(), 3))
    wall = np.array([0.75, 0.65, 0.5]) + rng.normal(0.0, 0.1, (n_wall, 3))
    return GaussianSet(
        np.concatenate([g, w]),
        np.log(np.concatenate([gs, ws])),
        quats,
        rng.uniform(0.85, 0.97, n),
        np.clip(np.concatenate([road, wall]), 0.02, 0.98),
    )


AGENT_COLORS = np.array([[0.85, 0.15, 0.1], [0.1, 0.3, 0.85], [0.9, 0.8, 0.1], [0.1, 0.7, 0.3]])


def make_scene(cfg: SynthConfig) -> GroundTruth:
    rng = np.random.default_rng(cfg.seed)
    schedule = make_schedule(cfg, rng)
    background = _background(rng, cfg.background_gaussians)
    vel = np.array([[s, 0.0, 0.0] for s in cfg.speeds])
    origins = np.array([[x, y, 0.5 * CAR_EXTENT[2]] for x, y in zip(cfg.start_x, cfg.lanes)])
    agents = []
    for k in range(cfg.num_agents):
        canon = _car_gaussians(rng, cfg.gaussians_per_agent, AGENT_COLORS[k % len(AGENT_COLORS)])
        trajs = []
        for src in ("vehicle", "infra"):
            ts = schedule.times(src)
            trajs.append(PoseTrajectory(ts, origins[k] + np.outer(ts, vel[k]), np.tile([1.0, 0, 0, 0], (len(ts), 1)), src))
        agents.append(AgentNode(f"agent{k}", canon, trajs[0], trajs[1]))
    scene = SceneGraph(background, agents)

    vc = cfg.vehicle_camera
    start, cvel, look = np.array(vc.start), np.array(vc.velocity), np.array(vc.look)
    ego, vcams = [], []
    for t in schedule.vehicle_times:
        eye = start + cvel * t
        ego.append(RigidTransform(UnitQuaternion.identity(), eye))
        vcams.append(Camera.look_at(eye, eye + look, [0, 0, 1], vc.focal, vc.focal, cfg.width, cfg.height))
    ic = cfg.infra_camera
    icam = Camera.look_at(ic.position, ic.target, [0, 0, 1], ic.focal, ic.focal, cfg.width, cfg.height)
    rig = RigidTransform(UnitQuaternion.from_axis_angle([0, 0, 1], np.radians(ic.rig_yaw_deg)), [ic.position[0], ic.position[1], 0.0])

    # parked cars along the far curb, spread over the stretch both cameras cover
    parked = []
    xs = np.linspace(-2.0, 18.0, cfg.parked_cars) if cfg.parked_cars else []
    for x in xs:
        yaw = rng.uniform(-0.1, 0.1)
        parked.append(RigidTransform(UnitQuaternion.from_axis_angle([0, 0, 1], yaw), [x + rng.uniform(-0.5, 0.5), 7.3, 0.75]))

    gt = GroundTruth(cfg, scene, schedule, vel, origins, vcams, icam, ego, rig, parked)
    _check_visibility(gt)
    return gt


def _in_view(cam: Camera, p: np.ndarray) -> bool:
    q = cam.extrinsics.apply(p)
    if q[2] <= 0.01:
        return False
    u = cam.fx * q[0] / q[2] + cam.cx
    v = cam.fy * q[1] / q[2] + cam.cy
    return 0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1


def _check_visibility(gt: GroundTruth) -> None:
    for k in range(len(gt.scene.agents)):
        for i in range(gt.schedule.num_frames):
            pv = gt.agent_position(k, gt.schedule.vehicle_times[i])
            pf = gt.agent_position(k, gt.schedule.infra_times[i])
            if not (_in_view(gt.vehicle_cameras[i], pv) or _in_view(gt.infra_camera, pf)):
                raise ValueError(f"agent{k} is outside both camera frusta at frame {i}")


# -- rendering ------------------------------------------------------------------------


def box_mask(camera: Camera, poses, extent=CAR_EXTENT) -> np.ndarray:
    """Pixels inside the image-plane convex hull of any projected 3D box."""
    H, W = camera.height, camera.width
    mask = np.zeros((H, W), dtype=bool)
    yy, xx = np.mgrid[0:H, 0:W]
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    for pose in poses:
        X = camera.extrinsics.apply(box_corners(pose.translation, pose.R, extent))
        if np.any(X[:, 2] <= 0.01):
            continue
        uv = np.stack([camera.fx * X[:, 0] / X[:, 2] + camera.cx, camera.fy * X[:, 1] / X[:, 2] + camera.cy], axis=1)
        hull = ConvexHull(uv)
        inside = np.all(pts @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
        mask |= inside.reshape(H, W)
    return mask


def agent_poses(gt: GroundTruth, t: float) -> list[RigidTransform]:
    return [RigidTransform(UnitQuaternion.identity(), gt.agent_position(k, t)) for k in range(len(gt.scene.agents))]


def render_dataset(gt: GroundTruth) -> Dataset:
    """Targets at each source's capture time; dynamic masks from the projected agent boxes."""
    frames = []
    for i in range(gt.schedule.num_frames):
        for src in ("vehicle", "infra"):
            t = float(gt.schedule.times(src)[i])
            cam = gt.camera(src, i)
            r = rasterize(cam, world_gaussians(gt.scene, src, t))
            frames.append(Frame(src, i, t, cam, r.image, box_mask(cam, agent_poses(gt, t))))
    return Dataset(frames, gt.schedule.anchors.copy())


# -- annotations ----------------------------------------------------------------------


@dataclass
class Annotations:
    vehicle: list[CornerBox]  # vehicle body frame of each frame
    infra: list[CornerBox]  # infra sensor frame
    base_extrinsics: dict[int, RigidTransform]
    delta_true: dict[int, RigidTransform]  # correction that turns base into the true extrinsic
    ego_poses: dict[int, RigidTransform]


def truth_annotations(gt: GroundTruth) -> Annotations:
    veh, inf = [], []
    ext = np.array(CAR_EXTENT)
    rig_inv = gt.infra_rig.inverse()
    for i in range(gt.schedule.num_frames):
        ego_inv = gt.ego_poses[i].inverse()
        for src, boxes in (("vehicle", veh), ("infra", inf)):
            t = float(gt.schedule.times(src)[i])
            to_local = ego_inv if src == "vehicle" else rig_inv
            for k in range(len(gt.scene.agents)):
                world = RigidTransform(UnitQuaternion.identity(), gt.agent_position(k, t))
                tid = f"agent{k}" if src == "vehicle" else f"i{k + 100}"
                boxes.append(_box(to_local.compose(world), ext, tid, t, src, i))
            for j, pose in enumerate(gt.parked):
                tid = f"parked{j}" if src == "vehicle" else f"i{j + 200}"
                boxes.append(_box(to_local.compose(pose), ext, tid, t, src, i))
    truth = {i: gt.true_extrinsic(i) for i in range(gt.schedule.num_frames)}
    ident = {i: RigidTransform.identity() for i in truth}
    return Annotations(veh, inf, truth, ident, dict(enumerate(gt.ego_poses)))


def _box(pose: RigidTransform, extent, tid, t, src, frame) -> CornerBox:
    return CornerBox(tid, t, src, pose.translation, pose.rotation, extent, None, frame)


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * np.radians(rng.uniform(0.0, max_deg)))


def _random_translation(rng: np.random.Generator, max_m: float) -> np.ndarray:
    d = rng.normal(size=3)
    return d / np.linalg.norm(d) * rng.uniform(0.0, max_m)


def perturb_annotations(truth: Annotations, noise: NoiseSpec, seed: int) -> Annotations:
    """Perturbed base extrinsics, corner noise and interior-frame dropout.

    base_i = P_i o E_i with a random P_i, so the recorded correction is P_i^-1.
    """
    rng = np.random.default_rng(seed)
    base, delta = {}, {}
    for i, E in sorted(truth.base_extrinsics.items()):
        if noise.rot_deg == 0 and noise.trans_m == 0:
            P = RigidTransform.identity()
        else:
            P = RigidTransform.from_matrix(_random_rotation(rng, noise.rot_deg), _random_translation(rng, noise.trans_m))
        base[i] = P.compose(E)
        delta[i] = P.inverse()

    def noisy(boxes):
        out = []
        for b in boxes:
            if noise.corner_sigma > 0:
                X = b.corners + rng.normal(0.0, noise.corner_sigma, (8, 3))
                nb = CornerBox.from_corners(X, b.track_id, b.timestamp, b.source, static=b.static, frame=b.frame)
            else:
                nb = b
            out.append(nb)
        return _dropout(out, noise.dropout, rng)

    return Annotations(noisy(truth.vehicle), noisy(truth.infra), base, delta, dict(truth.ego_poses))


def _dropout(boxes, p: float, rng: np.random.Generator) -> list[CornerBox]:
    if p <= 0:
        return list(boxes)
    keep = []
    by_track = {}
    for b in boxes:
        by_track.setdefault(b.track_id, []).append(b)
    drop = set()
    for tid in sorted(by_track):
        tr = sorted(by_track[tid], key=lambda b: b.timestamp)
        for b in tr[1:-1]:
            if rng.uniform() < p:
                drop.add((tid, b.frame))
    for b in boxes:
        if (b.track_id, b.frame) not in drop:
            keep.append(b)
    return keep


# -- dataset directory ---------------------------------------------------------------


def _pose_record(T: RigidTransform) -> dict:
    return {"quat_wxyz": T.rotation.as_array().tolist(), "translation": T.translation.tolist()}


def pose_from_record(d: dict) -> RigidTransform:
    return RigidTransform(UnitQuaternion.normalized(d["quat_wxyz"]), d["translation"])


def write_dataset(out_dir, gt: GroundTruth, data: Dataset, ann: Annotations) -> dict:
    """Write scene, images, masks, annotations and a manifest; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    artifacts = []

    def add(path: Path, role: str, timestamp=None, **extra):
        rec = {"path": path.relative_to(out).as_posix(), "role": role}
        if timestamp is not None:
            rec["timestamp"] = float(timestamp)
        rec.update(extra)
        artifacts.append(rec)

    save_scene(gt.scene, out / "scene_gt.json")
    add(out / "scene_gt.json", "ground_truth_scene")
    cams = {"schedule": gt.schedule.to_dict(), "frames": []}
    for f in data.frames:
        stem = f"{f.source}_{f.index:03d}"
        write_ppm(out / "images" / f"{stem}.ppm", f.target)
        write_float_dump(out / "images" / f"{stem}.f32", f.target)
        write_mask(out / "images" / f"{stem}_mask.pgm", f.mask)
        add(out / "images" / f"{stem}.ppm", "image_preview", f.time, source=f.source, frame=f.index)
        add(out / "images" / f"{stem}.f32", "image_target", f.time, source=f.source, frame=f.index)
        add(out / "images" / f"{stem}_mask.pgm", "dynamic_mask", f.time, source=f.source, frame=f.index)
        cams["frames"].append({"source": f.source, "frame": f.index, "time": f.time, "camera": f.camera.to_dict()})
    (out / "cameras.json").write_text(json.dumps(cams, indent=1) + "\n", encoding="utf-8")
    add(out / "cameras.json", "cameras")

    save_boxes(out / "annotations" / "vehicle.jsonl", ann.vehicle)
    save_boxes(out / "annotations" / "infra.jsonl", ann.infra)
    add(out / "annotations" / "vehicle.jsonl", "annotations_vehicle")
    add(out / "annotations" / "infra.jsonl", "annotations_infra")
    lines = []
    for i in sorted(ann.base_extrinsics):
        lines.append(
            json.dumps(
                {
                    "frame": i,
                    "timestamp": float(gt.schedule.vehicle_times[i]),
                    "base_extrinsic": _pose_record(ann.base_extrinsics[i]),
                    "delta_true": _pose_record(ann.delta_true[i]),
                    "ego_pose": _pose_record(ann.ego_poses[i]),
                }
            )
        )
    (out / "annotations" / "extrinsics.jsonl").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    add(out / "annotations" / "extrinsics.jsonl", "extrinsics")

    manifest = {"format": "dustgsg-dataset", "version": 1, "config": gt.cfg.model_dump(mode="json"), "artifacts": artifacts}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass
class LoadedDataset:
    root: Path
    config: SynthConfig
    data: Dataset
    schedule: CaptureSchedule
    scene_gt: SceneGraph
    annotations: Annotations


def load_extrinsics(path) -> tuple[dict, dict, dict]:
    base, delta, ego = {}, {}, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            i = int(r["frame"])
            base[i] = pose_from_record(r["base_extrinsic"])
            delta[i] = pose_from_record(r["delta_true"])
            ego[i] = pose_from_record(r["ego_pose"])
    return base, delta, ego


def load_dataset(root) -> LoadedDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found; run the synth command first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = SynthConfig.model_validate(manifest["config"])
    cams = json.loads((root / "cameras.json").read_text(encoding="utf-8"))
    schedule = CaptureSchedule.from_dict(cams["schedule"])
    frames = []
    for rec in cams["frames"]:
        stem = f"{rec['source']}_{rec['frame']:03d}"
        frames.append(
            Frame(
                rec["source"],
                int(rec["frame"]),
                float(rec["time"]),
                Camera.from_dict(rec["camera"]),
                read_float_dump(root / "images" / f"{stem}.f32"),
                read_mask(root / "images" / f"{stem}_mask.pgm"),
            )
        )
    ann_dir = root / "annotations"
    for name in ("vehicle.jsonl", "infra.jsonl", "extrinsics.jsonl"):
        if not (ann_dir / name).exists():
            raise FileNotFoundError(f"missing annotation file {ann_dir / name}")
    base, delta, ego = load_extrinsics(ann_dir / "extrinsics.jsonl")
    ann = Annotations(load_boxes(ann_dir / "vehicle.jsonl"), load_boxes(ann_dir / "infra.jsonl"), base, delta, ego)
    return LoadedDataset(root, cfg, Dataset(frames, schedule.anchors), schedule, load_scene(root / "scene_gt.json"), ann)


def box_world_corners(pose: RigidTransform) -> np.ndarray:
    return box_corners(pose.translation, pose.R, CAR_EXTENT)
