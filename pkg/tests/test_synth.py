import json

import numpy as np
import pytest

from dustgsg.align import group_tracks
from dustgsg.render import rasterize
from dustgsg.scene import load_scene, world_gaussians
from dustgsg.synth import (
    NoiseSpec,
    SynthConfig,
    make_scene,
    perturb_annotations,
    render_dataset,
    truth_annotations,
    write_dataset,
    load_dataset,
)


def cfg(**kw):
    base = dict(num_frames=4, width=32, height=32, background_gaussians=30, gaussians_per_agent=8, parked_cars=2)
    base.update(kw)
    return SynthConfig(**base)


def test_zero_offset_gives_identical_trajectories():
    gt = make_scene(cfg(delta_tau=0.0))
    for a in gt.scene.agents:
        assert np.array_equal(a.trajectory_vehicle.times, a.trajectory_infra.times)
        assert np.array_equal(a.trajectory_vehicle.translations, a.trajectory_infra.translations)


def test_offset_displacement_between_views():
    gt = make_scene(cfg(delta_tau=0.07, speeds=[10.0, 10.0]))
    for i in range(gt.schedule.num_frames):
        a = world_gaussians(gt.scene, "vehicle", gt.schedule.vehicle_times[i]).poses[0][1]
        b = world_gaussians(gt.scene, "infra", gt.schedule.infra_times[i]).poses[0][1]
        assert abs(np.linalg.norm(a - b) - 0.7) <= 1e-9


def test_schedule_offset_and_anchor_midpoints():
    gt = make_scene(cfg(delta_tau=0.05))
    s = gt.schedule
    assert np.allclose(s.delta_tau, 0.05, rtol=0, atol=1e-15)
    assert np.allclose(s.anchors, 0.5 * (s.vehicle_times + s.infra_times))


def test_position_difference_is_velocity_times_offset():
    gt = make_scene(cfg(delta_tau=0.2, speeds=[7.0, 12.0]))
    for k, a in enumerate(gt.scene.agents):
        d = a.trajectory_vehicle.translations - a.trajectory_infra.translations
        assert np.abs(d - gt.velocities[k] * 0.2).max() <= 1e-9


def test_same_seed_is_bitwise_identical():
    a, b = make_scene(cfg(seed=5)), make_scene(cfg(seed=5))
    assert np.array_equal(a.scene.background.means, b.scene.background.means)
    assert np.array_equal(a.scene.agents[1].canonical.colors, b.scene.agents[1].canonical.colors)
    assert not np.array_equal(a.scene.background.means, make_scene(cfg(seed=6)).scene.background.means)


def test_agents_outside_view_rejected():
    with pytest.raises(ValueError, match="frusta"):
        make_scene(cfg(lanes=[1.5, 400.0]))


def test_ground_truth_renders_reproduce_targets():
    gt = make_scene(cfg())
    data = render_dataset(gt)
    worst = 0.0
    for f in data.frames:
        img = rasterize(f.camera, world_gaussians(gt.scene, f.source, f.time)).image
        worst = max(worst, 0.5 * float(((img - f.target) ** 2).sum()))
    assert worst <= 1e-12


def test_static_scene_infra_images_constant():
    # parked agents only: nothing moves, so the fixed infra camera sees the same image every frame
    gt = make_scene(cfg(speeds=[0.0, 0.0], start_x=[6.0, 8.0]))
    data = render_dataset(gt)
    inf = [f.target for f in data.frames if f.source == "infra"]
    assert all(np.array_equal(inf[0], x) for x in inf[1:])


def test_masks_cover_agents_only():
    gt = make_scene(cfg())
    data = render_dataset(gt)
    assert any(f.mask.any() for f in data.frames)
    assert not any(f.mask.all() for f in data.frames)


def test_zero_noise_is_identity():
    gt = make_scene(cfg())
    truth = truth_annotations(gt)
    out = perturb_annotations(truth, NoiseSpec(rot_deg=0, trans_m=0, corner_sigma=0, dropout=0), 1)
    for i, E in truth.base_extrinsics.items():
        assert np.allclose(out.base_extrinsics[i].homogeneous(), E.homogeneous())
        assert np.allclose(out.delta_true[i].homogeneous(), np.eye(4))
    assert len(out.infra) == len(truth.infra)


def test_recorded_correction_restores_truth():
    gt = make_scene(cfg())
    truth = truth_annotations(gt)
    out = perturb_annotations(truth, NoiseSpec(rot_deg=5, trans_m=0.5, corner_sigma=0, dropout=0), 2)
    for i, E in truth.base_extrinsics.items():
        fixed = out.delta_true[i].compose(out.base_extrinsics[i])
        assert np.allclose(fixed.homogeneous(), E.homogeneous(), atol=1e-12)


def test_full_dropout_removes_interior_frames_only():
    gt = make_scene(cfg())
    truth = truth_annotations(gt)
    spec = NoiseSpec(rot_deg=0, trans_m=0, corner_sigma=0, dropout=1.0)
    a = perturb_annotations(truth, spec, 3)
    b = perturb_annotations(truth, spec, 3)
    assert [x.track_id for x in a.vehicle] == [x.track_id for x in b.vehicle]
    for tr in group_tracks(a.vehicle).values():
        assert [x.frame for x in tr] == [0, 3]  # both interior frames dropped: a 2-frame gap


def test_write_and_load_round_trip(tmp_path):
    gt = make_scene(cfg())
    data = render_dataset(gt)
    ann = truth_annotations(gt)
    m1 = write_dataset(tmp_path / "a", gt, data, ann)
    m2 = write_dataset(tmp_path / "b", gt, data, ann)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    roles = {r["role"] for r in m1["artifacts"]}
    assert {"ground_truth_scene", "image_target", "dynamic_mask", "annotations_infra", "extrinsics"} <= roles
    assert sum(r["role"] == "image_target" for r in m1["artifacts"]) == 2 * 4
    assert all("timestamp" in r for r in m1["artifacts"] if r["role"] == "image_target")
    json.loads((tmp_path / "a" / "manifest.json").read_text())
    ds = load_dataset(tmp_path / "a")
    assert ds.config == gt.cfg and len(ds.data.frames) == 8
    scene = load_scene(tmp_path / "a" / "scene_gt.json")
    f = data.frames[3]
    again = rasterize(f.camera, world_gaussians(scene, f.source, f.time)).image
    assert np.array_equal(again, f.target)
    assert np.allclose(ds.data.frames[3].target, f.target, atol=1e-7)


def test_load_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
