import math

import numpy as np
import pytest

from dustgsg.geom import RigidTransform, UnitQuaternion
from dustgsg.scene import (
    AgentNode,
    CanonicalGaussian,
    GaussianSet,
    PoseTrajectory,
    SceneGraph,
    collapse_to_single_timeline,
    load_scene,
    query_pose,
    save_scene,
    world_gaussians,
)

from conftest import gset, linear_traj, one_agent_scene


def two_key_traj(R1=None, T1=(2.0, 0.0, 0.0)):
    q1 = UnitQuaternion.identity() if R1 is None else R1
    return PoseTrajectory.from_keys([(0.0, RigidTransform()), (1.0, RigidTransform(q1, T1))])


def test_query_at_key_and_midpoint():
    tr = two_key_traj()
    assert np.allclose(query_pose(tr, 1.0).translation, [2, 0, 0])
    assert np.allclose(query_pose(tr, 0.5).translation, [1, 0, 0])


def test_query_rotation_midpoint_is_slerp():
    tr = two_key_traj(UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2), (0, 0, 0))
    mid = query_pose(tr, 0.5)
    assert abs(math.degrees(mid.rotation.angle_to(UnitQuaternion.identity())) - 45.0) < 1e-9


def test_query_clamps_outside_range():
    tr = two_key_traj()
    assert np.allclose(query_pose(tr, -3.0).translation, [0, 0, 0])
    assert np.allclose(query_pose(tr, 7.0).translation, [2, 0, 0])


def test_trajectory_validation():
    with pytest.raises(ValueError):
        PoseTrajectory([], np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        PoseTrajectory([0.0, 0.0], np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)))
    with pytest.raises(ValueError):
        PoseTrajectory([0.0], np.zeros((1, 3)), [[1.0, 0, 0, 0]], source="drone")


def test_canonical_gaussian_invariants():
    CanonicalGaussian([0, 0, 0], np.eye(3), 0.5, [1, 0, 0])
    with pytest.raises(ValueError):
        CanonicalGaussian([0, 0, 0], np.eye(3), 1.0, [1, 0, 0])
    with pytest.raises(ValueError):
        CanonicalGaussian([0, 0, 0], np.diag([1.0, 1.0, 0.0]), 0.5, [1, 0, 0])


def test_gaussian_set_round_trip_through_records():
    g = gset([[0, 0, 0], [1, 2, 3]], scale=0.3)
    back = GaussianSet.from_gaussians([g[0], g[1]])
    assert np.allclose(back.covariances(), g.covariances())
    assert np.allclose(back.means, g.means)


def test_identity_and_translation_world_transform():
    canon = gset([[0.1, 0.2, 0.3], [-0.5, 0.0, 0.4]])
    ident = PoseTrajectory([0.0], [[0, 0, 0]], [[1.0, 0, 0, 0]])
    moved = PoseTrajectory([0.0], [[5, 0, 0]], [[1.0, 0, 0, 0]], "infra")
    scene = SceneGraph(GaussianSet.empty(), [AgentNode("a", canon, ident, moved)])
    wv = world_gaussians(scene, "vehicle", 0.0)
    wf = world_gaussians(scene, "infra", 0.0)
    assert np.array_equal(wv.means, canon.means)
    assert np.allclose(wf.means, canon.means + [5, 0, 0])
    assert np.allclose(wf.covariances, canon.covariances())


def test_world_transform_with_rotation(rng):
    q = UnitQuaternion.normalized(rng.normal(size=4))
    canon = gset(rng.normal(size=(3, 3)))
    tr = PoseTrajectory([0.0], [[1, 2, 3]], [q.as_array()])
    scene = SceneGraph(GaussianSet.empty(), [AgentNode("a", canon, tr, tr)])
    w = world_gaussians(scene, "vehicle", 0.0)
    R = q.matrix()
    assert np.allclose(w.means, canon.means @ R.T + [1, 2, 3], atol=1e-12)
    assert np.allclose(w.covariances, R @ canon.covariances() @ R.T, atol=1e-12)


def test_canonical_storage_is_shared_between_sources():
    scene = one_agent_scene()
    agent = scene.agents[0]
    agent.canonical.means[0] += 1.0
    wv = world_gaussians(scene, "vehicle", 0.1)
    wf = world_gaussians(scene, "infra", 0.1)
    k = np.flatnonzero(wv.owner == 0)[0]
    Rv, Tv = wv.poses[0]
    Rf, Tf = wf.poses[0]
    assert np.allclose(Rv.T @ (wv.means[k] - Tv), agent.canonical.means[0])
    assert np.allclose(Rf.T @ (wf.means[k] - Tf), agent.canonical.means[0])


def test_frame_capture_times_give_offset_world_means():
    scene = one_agent_scene(v=(2.0, 0.0, 0.0), dtau=0.1)
    # frame 1: vehicle captured at 0.2, infra at 0.1
    a = world_gaussians(scene, "vehicle", 0.2)
    b = world_gaussians(scene, "infra", 0.1)
    d = a.means[a.owner == 0] - b.means[b.owner == 0]
    assert np.allclose(d, [0.2, 0.0, 0.0])


def test_duplicate_agent_ids_rejected():
    tr = PoseTrajectory([0.0], [[0, 0, 0]], [[1.0, 0, 0, 0]])
    a = AgentNode("x", gset([[0, 0, 0]]), tr, tr)
    with pytest.raises(ValueError):
        SceneGraph(GaussianSet.empty(), [a, a])


def test_collapse_offsets_match_constant_velocity():
    v = np.array([10.0, 0.0, 0.0])
    tf = np.arange(5) * 0.1
    tv = tf + 0.1
    canon = gset([[0, 0, 0]])
    scene = SceneGraph(GaussianSet.empty(), [AgentNode("a", canon, linear_traj([0, 0, 0], v, tv, "vehicle"), linear_traj([0, 0, 0], v, tf, "infra"))])
    anchors = 0.5 * (tv + tf)
    single = collapse_to_single_timeline(scene, anchors)
    assert single.is_single_timeline
    # interior anchors lie inside the vehicle key range
    for i in range(1, 5):
        p = query_pose(single.agents[0].trajectory_vehicle, anchors[i]).translation
        assert abs(np.linalg.norm(p - v * tv[i]) - 0.5) < 1e-12
        assert abs(np.linalg.norm(p - v * tf[i]) - 0.5) < 1e-12


def test_collapse_at_vehicle_times_leaves_vehicle_exact():
    v = np.array([10.0, 0.0, 0.0])
    tf = np.arange(4) * 0.1
    tv = tf + 0.1
    scene = SceneGraph(GaussianSet.empty(), [AgentNode("a", gset([[0, 0, 0]]), linear_traj([0, 0, 0], v, tv, "vehicle"), linear_traj([0, 0, 0], v, tf, "infra"))])
    single = collapse_to_single_timeline(scene, tv)
    for i in range(4):
        p = query_pose(single.agents[0].trajectory_infra, tv[i]).translation
        assert np.allclose(p, v * tv[i])
        assert abs(np.linalg.norm(p - v * tf[i]) - 1.0) < 1e-12


def test_collapse_of_identical_trajectories_is_noop():
    scene = one_agent_scene(dtau=0.0)
    anchors = scene.agents[0].trajectory_vehicle.times
    single = collapse_to_single_timeline(scene, anchors)
    for t in anchors:
        a = world_gaussians(scene, "infra", t).means
        b = world_gaussians(single, "infra", t).means
        assert np.allclose(a, b, atol=1e-12)


def test_scene_save_load_round_trip(tmp_path):
    scene = one_agent_scene()
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    for src in ("vehicle", "infra"):
        a, b = world_gaussians(scene, src, 0.13), world_gaussians(back, src, 0.13)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.covariances, b.covariances)
