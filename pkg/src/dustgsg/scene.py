"""DUST scene graph: canonical Gaussians, dual pose timelines, world views."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .geom import (
    RigidTransform,
    UnitQuaternion,
    interpolate_transform,
    quat_to_matrix,
    slerp_array,
)

Source = Literal["vehicle", "infra"]
SOURCES: tuple[Source, Source] = ("vehicle", "infra")

FORMAT_VERSION = 1


def check_source(source: str) -> Source:
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; expected one of {SOURCES}")
    return source  # type: ignore[return-value]


@dataclass
class CanonicalGaussian:
    mean: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity {self.opacity} must lie strictly inside (0, 1)")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.covariance).min() <= 1e-12:
            raise ValueError("covariance is not positive definite")


class GaussianSet:
    """Struct-of-arrays storage for a set of Gaussians.

    Covariance is kept as rotation quaternion + log scales so that it stays
    SPD under unconstrained updates.
    """

    def __init__(self, means, log_scales, quats, opacities, colors):
        self.means = np.array(means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.array(log_scales, dtype=float).reshape(n, 3)
        self.quats = np.array(quats, dtype=float).reshape(n, 4)
        self.opacities = np.array(opacities, dtype=float).reshape(n)
        self.colors = np.array(colors, dtype=float).reshape(n, 3)
        if n and not np.all((self.opacities > 0) & (self.opacities < 1)):
            raise ValueError("opacities must lie strictly inside (0, 1)")

    @classmethod
    def empty(cls) -> GaussianSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[CanonicalGaussian]) -> GaussianSet:
        if not gaussians:
            return cls.empty()
        quats, logs = [], []
        for g in gaussians:
            evals, evecs = np.linalg.eigh(g.covariance)
            if np.linalg.det(evecs) < 0:
                evecs[:, 0] = -evecs[:, 0]
            quats.append(UnitQuaternion.from_matrix(evecs).as_array())
            logs.append(0.5 * np.log(evals))
        return cls(
            [g.mean for g in gaussians],
            logs,
            quats,
            [g.opacity for g in gaussians],
            [g.color for g in gaussians],
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i: int) -> CanonicalGaussian:
        return CanonicalGaussian(self.means[i], self.covariances()[i], float(self.opacities[i]), self.colors[i])

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quats)

    def covariances(self) -> np.ndarray:
        R = self.rotations()
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def copy(self) -> GaussianSet:
        return GaussianSet(self.means, self.log_scales, self.quats, self.opacities, self.colors)

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "log_scales": self.log_scales.tolist(),
            "quats_wxyz": self.quats.tolist(),
            "opacities": self.opacities.tolist(),
            "colors": self.colors.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GaussianSet:
        n = len(d["means"])
        if n == 0:
            return cls.empty()
        return cls(d["means"], d["log_scales"], d["quats_wxyz"], d["opacities"], d["colors"])


class PoseTrajectory:
    """Timestamped SE(3) keys for one source; queried by interpolation."""

    def __init__(self, times, translations, quats, source: str = "vehicle"):
        self.times = np.array(times, dtype=float).reshape(-1)
        k = len(self.times)
        if k == 0:
            raise ValueError("a trajectory needs at least one key")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        self.translations = np.array(translations, dtype=float).reshape(k, 3)
        self.quats = np.array(quats, dtype=float).reshape(k, 4)
        self.source = check_source(source)

    @classmethod
    def from_keys(cls, keys: Sequence[tuple[float, RigidTransform]], source: str = "vehicle") -> PoseTrajectory:
        return cls(
            [t for t, _ in keys],
            [p.translation for _, p in keys],
            [p.rotation.as_array() for _, p in keys],
            source,
        )

    def __len__(self):
        return len(self.times)

    def key(self, i: int) -> RigidTransform:
        return RigidTransform(UnitQuaternion.normalized(self.quats[i]), self.translations[i])

    def keys(self) -> list[tuple[float, RigidTransform]]:
        return [(float(t), self.key(i)) for i, t in enumerate(self.times)]

    def bracket(self, t: float) -> tuple[int, int, float]:
        """(i0, i1, w) such that the pose at t blends key i0 and i1 with weight w."""
        times = self.times
        if t <= times[0]:
            return 0, 0, 0.0
        if t >= times[-1]:
            k = len(times) - 1
            return k, k, 0.0
        i1 = int(np.searchsorted(times, t, side="right"))
        i0 = i1 - 1
        if t == times[i0]:
            return i0, i0, 0.0
        return i0, i1, (t - times[i0]) / (times[i1] - times[i0])

    def rotation_matrix_at(self, t: float) -> np.ndarray:
        return self.query(t).R

    def query(self, t: float) -> RigidTransform:
        return query_pose(self, t)

    def copy(self) -> PoseTrajectory:
        return PoseTrajectory(self.times, self.translations, self.quats, self.source)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "times": self.times.tolist(),
            "translations": self.translations.tolist(),
            "quats_wxyz": self.quats.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PoseTrajectory:
        return cls(d["times"], d["translations"], d["quats_wxyz"], d["source"])


def query_pose(traj: PoseTrajectory, t: float) -> RigidTransform:
    """Lerp/slerp between bracketing keys; constant outside the key range."""
    i0, i1, w = traj.bracket(t)
    if i0 == i1:
        return traj.key(i0)
    return interpolate_transform(traj.key(i0), traj.key(i1), w)


def _pose_arrays(traj: PoseTrajectory, t: float) -> tuple[np.ndarray, np.ndarray]:
    i0, i1, w = traj.bracket(t)
    if i0 == i1:
        q = traj.quats[i0] / np.linalg.norm(traj.quats[i0])
        return quat_to_matrix(q), traj.translations[i0].copy()
    q = slerp_array(
        traj.quats[i0] / np.linalg.norm(traj.quats[i0]), traj.quats[i1] / np.linalg.norm(traj.quats[i1]), w
    )
    return quat_to_matrix(q), traj.translations[i0] + w * (traj.translations[i1] - traj.translations[i0])


@dataclass
class AgentNode:
    """Shared canonical set plus one trajectory per source.

    In the single-timeline baseline both trajectory attributes point at the
    same object.
    """

    agent_id: str
    canonical: GaussianSet
    trajectory_vehicle: PoseTrajectory
    trajectory_infra: PoseTrajectory

    def trajectory(self, source: str) -> PoseTrajectory:
        return self.trajectory_vehicle if check_source(source) == "vehicle" else self.trajectory_infra

    @property
    def is_single_timeline(self) -> bool:
        return self.trajectory_vehicle is self.trajectory_infra


@dataclass
class SceneGraph:
    background: GaussianSet = field(default_factory=GaussianSet.empty)
    agents: list[AgentNode] = field(default_factory=list)

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate agent ids in {ids}")

    def agent(self, agent_id: str) -> AgentNode:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def is_single_timeline(self) -> bool:
        return bool(self.agents) and all(a.is_single_timeline for a in self.agents)

    def copy(self) -> SceneGraph:
        agents = []
        for a in self.agents:
            tv = a.trajectory_vehicle.copy()
            ti = tv if a.is_single_timeline else a.trajectory_infra.copy()
            agents.append(AgentNode(a.agent_id, a.canonical.copy(), tv, ti))
        return SceneGraph(self.background.copy(), agents)


@dataclass
class WorldGaussians:
    """World-frame Gaussians for one (source, time) query.

    `owner` is -1 for background, otherwise the agent's index in the scene;
    `index` is the Gaussian's index within its owner. Together they are the
    provenance used for deterministic depth tie-breaking.
    """

    means: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    owner: np.ndarray
    index: np.ndarray
    # per-agent pose used to build the view: (R, T) for each agent index
    poses: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __len__(self):
        return len(self.means)

    @property
    def provenance_key(self) -> np.ndarray:
        return (self.owner.astype(np.int64) + 1) * (1 << 32) + self.index.astype(np.int64)

    def subset(self, idx) -> WorldGaussians:
        idx = np.asarray(idx)
        return WorldGaussians(
            self.means[idx],
            self.covariances[idx],
            self.opacities[idx],
            self.colors[idx],
            self.owner[idx],
            self.index[idx],
            self.poses,
        )

    @classmethod
    def from_arrays(cls, means, covariances, opacities, colors, owner=None) -> WorldGaussians:
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        n = len(means)
        owner = np.full(n, -1) if owner is None else np.asarray(owner)
        return cls(
            means,
            np.asarray(covariances, dtype=float).reshape(n, 3, 3),
            np.asarray(opacities, dtype=float).reshape(n),
            np.asarray(colors, dtype=float).reshape(n, 3),
            owner,
            np.arange(n),
        )


def world_gaussians(scene: SceneGraph, source: str, t: float) -> WorldGaussians:
    """Background as-is; each agent's canonical set placed by its own source pose at t."""
    check_source(source)
    bg = scene.background
    means = [bg.means]
    covs = [bg.covariances()]
    ops = [bg.opacities]
    cols = [bg.colors]
    owner = [np.full(len(bg), -1)]
    index = [np.arange(len(bg))]
    poses = []
    for k, agent in enumerate(scene.agents):
        R, T = _pose_arrays(agent.trajectory(source), t)
        poses.append((R, T))
        c = agent.canonical
        means.append(c.means @ R.T + T)
        covs.append(R @ c.covariances() @ R.T)
        ops.append(c.opacities)
        cols.append(c.colors)
        owner.append(np.full(len(c), k))
        index.append(np.arange(len(c)))
    return WorldGaussians(
        np.concatenate(means),
        np.concatenate(covs),
        np.concatenate(ops),
        np.concatenate(cols),
        np.concatenate(owner),
        np.concatenate(index),
        poses,
    )


def collapse_to_single_timeline(scene: SceneGraph, anchors: Sequence[float]) -> SceneGraph:
    """Baseline: one trajectory per agent keyed at the anchors, shared by both sources.

    Keys are initialized from the vehicle trajectory queried at each anchor.
    Canonical sets are copied, not shared with the input scene.
    """
    anchors = np.asarray(anchors, dtype=float)
    if np.any(np.diff(anchors) <= 0):
        raise ValueError("anchors must be strictly increasing")
    agents = []
    for a in scene.agents:
        keys = [(float(t), query_pose(a.trajectory_vehicle, float(t))) for t in anchors]
        traj = PoseTrajectory.from_keys(keys, source="vehicle")
        agents.append(AgentNode(a.agent_id, a.canonical.copy(), traj, traj))
    return SceneGraph(scene.background.copy(), agents)


# -- serialization ---------------------------------------------------------------


def scene_to_dict(scene: SceneGraph) -> dict:
    agents = []
    for a in scene.agents:
        entry = {
            "id": a.agent_id,
            "canonical": a.canonical.to_dict(),
            "single_timeline": a.is_single_timeline,
            "trajectory_vehicle": a.trajectory_vehicle.to_dict(),
        }
        if not a.is_single_timeline:
            entry["trajectory_infra"] = a.trajectory_infra.to_dict()
        agents.append(entry)
    return {"format": "dustgsg-scene", "version": FORMAT_VERSION, "background": scene.background.to_dict(), "agents": agents}


def scene_from_dict(d: dict) -> SceneGraph:
    if d.get("format") != "dustgsg-scene":
        raise ValueError("not a dustgsg scene document")
    agents = []
    for a in d["agents"]:
        tv = PoseTrajectory.from_dict(a["trajectory_vehicle"])
        ti = tv if a.get("single_timeline") else PoseTrajectory.from_dict(a["trajectory_infra"])
        agents.append(AgentNode(str(a["id"]), GaussianSet.from_dict(a["canonical"]), tv, ti))
    return SceneGraph(GaussianSet.from_dict(d["background"]), agents)


def save_scene(scene: SceneGraph, path) -> None:
    # json floats use repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n", encoding="utf-8")


def load_scene(path) -> SceneGraph:
    return scene_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
