from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrfuse import io as lrio
from lrfuse.datagen import (PlacementError, SceneConfig, SensorModel, Weather, generate_dataset,
                            generate_scene, split_of)
from lrfuse.pointcloud import Modality


def test_empty_world():
    scene = generate_scene(SceneConfig(n_objects=0, seed=1), SensorModel(clutter_mu=0.0))
    assert scene.gt.shape == (0, 6)
    assert all(s.points.shape[0] == 0 for s in scene.lidar_sweeps + scene.radar_sweeps)


def test_scene_is_deterministic():
    cfg = SceneConfig(seed=11)
    a, b = generate_scene(cfg), generate_scene(cfg)
    assert np.array_equal(a.gt, b.gt)
    for sa, sb in zip(a.lidar_sweeps + a.radar_sweeps, b.lidar_sweeps + b.radar_sweeps):
        assert sa.points.tobytes() == sb.points.tobytes()


def test_sweep_stamps_and_ego_pose():
    scene = generate_scene(SceneConfig(seed=2, ego_speed=5.0))
    for k, s in enumerate(scene.lidar_sweeps):
        assert s.time_offset == pytest.approx(0.05 * k)
        assert s.pose.tx == pytest.approx(-5.0 * 0.05 * k) and s.pose.yaw == 0.0
    assert len(scene.lidar_sweeps) == 10 and len(scene.radar_sweeps) == 6


def test_density_law_statistical():
    model = SensorModel(lidar_n0=200.0, lidar_r0=10.0)
    counts = []
    for seed in range(100):
        cfg = SceneConfig(n_objects=1, radius_range=(20.0, 20.0), speed_range=(0.0, 0.0), ego_speed=0.0,
                          lidar_sweeps=1, seed=seed)
        counts.append(generate_scene(cfg, model).lidar_sweeps[0].points.shape[0])
    expected = 200.0 * (10.0 / 20.0) ** 2
    assert abs(np.mean(counts) - expected) < 3 * np.sqrt(expected) / np.sqrt(100)


def test_rain_changes_only_far_lidar():
    clear = generate_scene(SceneConfig(seed=5, weather=Weather.CLEAR))
    rain = generate_scene(SceneConfig(seed=5, weather=Weather.RAIN))
    assert np.array_equal(clear.gt, rain.gt)
    for a, b in zip(clear.radar_sweeps, rain.radar_sweeps):
        assert np.array_equal(a.points, b.points)
    for a, b in zip(clear.lidar_sweeps, rain.lidar_sweeps):
        near = lambda p: p[np.hypot(p[:, 0], p[:, 1]) <= 16.0]  # noqa: E731
        assert np.array_equal(near(a.points), near(b.points))
        assert b.points.shape[0] <= a.points.shape[0]
    far = lambda s: sum(int((np.hypot(p.points[:, 0], p.points[:, 1]) > 16).sum()) for p in s)  # noqa: E731
    assert far(rain.lidar_sweeps) < 0.5 * far(clear.lidar_sweeps)


def test_objects_do_not_overlap():
    for seed in range(10):
        gt = generate_scene(SceneConfig(seed=seed)).gt
        for i in range(len(gt)):
            for j in range(i + 1, len(gt)):
                ox = abs(gt[i, 0] - gt[j, 0]) < (gt[i, 4] + gt[j, 4]) / 2
                oy = abs(gt[i, 1] - gt[j, 1]) < (gt[i, 5] + gt[j, 5]) / 2
                assert not (ox and oy)
            assert 4.0 - 1e-9 <= np.hypot(gt[i, 0], gt[i, 1]) <= 30.0 + 1e-9


def test_radar_velocity_tracks_objects():
    model = SensorModel(clutter_mu=0.0, radar_sigma_v=0.0)
    scene = generate_scene(SceneConfig(n_objects=1, seed=3), model)
    pts = np.concatenate([s.points for s in scene.radar_sweeps])
    np.testing.assert_allclose(pts[:, 4:6], np.broadcast_to(scene.gt[0, 2:4], (len(pts), 2)), atol=1e-5)


def test_placement_failure():
    cfg = SceneConfig(n_objects=50, radius_range=(4.0, 5.0), max_tries=20, seed=0)
    with pytest.raises(PlacementError):
        generate_scene(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(radius_range=(5.0, 40.0))
    with pytest.raises(ValueError):
        SensorModel(rain_keep=1.5)
    with pytest.raises(ValueError):
        SensorModel(radar_sigma_z=-1.0)


def test_split_sizes():
    assert [split_of(i, 200) for i in range(200)].count("train") == 160
    assert split_of(0, 1) == "train"


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_roundtrip_and_determinism(tmp_path):
    cfg = SceneConfig(n_objects=3)
    a = generate_dataset(5, cfg, SensorModel(), 7, tmp_path / "a")
    b = generate_dataset(5, cfg, SensorModel(), 7, tmp_path / "b", jobs=2)
    assert _tree_digest(a) == _tree_digest(b)
    manifest = lrio.load_manifest(a)
    splits = [e["split"] for e in manifest["scenes"]]
    assert splits == ["train"] * 4 + ["val", "val_rain"]
    rain = manifest["scenes"][-1]
    assert rain["seed"] == manifest["scenes"][-2]["seed"] == 11 and rain["weather"] == "RAIN"
    scene = generate_scene(replace(cfg, seed=9), SensorModel(), "00002")
    loaded = lrio.load_scene(a, manifest["scenes"][2])
    np.testing.assert_array_equal(loaded.gt, scene.gt)
    for s1, s2 in zip(loaded.lidar_sweeps + loaded.radar_sweeps, scene.lidar_sweeps + scene.radar_sweeps):
        assert s1.points.tobytes() == s2.points.tobytes()
        assert s1.pose == s2.pose and s1.time_offset == s2.time_offset


def test_single_scene_dataset(tmp_path):
    generate_dataset(1, SceneConfig(n_objects=1), SensorModel(), 0, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 1 and manifest["format"] == "LRPC1"


# -- point files


def test_point_file_layout():
    pts = np.array([[1.0, 2.0, 3.0, 0.5, 0.1]])
    blob = lrio.encode_points(Modality.LIDAR, pts)
    assert blob[:5] == b"LRPC1" and blob[5] == 0
    assert int.from_bytes(blob[6:10], "little") == 1 and int.from_bytes(blob[10:14], "little") == 5
    assert np.frombuffer(blob[14:], "<f4").tolist() == pytest.approx([1, 2, 3, 0.5, 0.1])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 50), radar=st.booleans(), seed=st.integers(0, 1000))
def test_point_roundtrip(n, radar, seed):
    width = 7 if radar else 5
    pts = np.random.default_rng(seed).normal(size=(n, width)).astype(np.float32).astype(np.float64)
    mod, back = lrio.decode_points(lrio.encode_points(Modality.RADAR if radar else Modality.LIDAR, pts))
    assert mod == (Modality.RADAR if radar else Modality.LIDAR)
    assert np.array_equal(back, pts)


def test_point_file_errors():
    with pytest.raises(lrio.FormatError):
        lrio.decode_points(b"NOPE!" + bytes(9))
    blob = lrio.encode_points(Modality.LIDAR, np.zeros((2, 5)))
    with pytest.raises(lrio.FormatError):
        lrio.decode_points(blob[:-4])


# -- checkpoints, weight maps, json


def test_checkpoint_roundtrip():
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(2, 3, 3, 3)), "a.bias": rng.normal(size=2), "s": np.array(1.5)}
    back = lrio.decode_checkpoint(lrio.encode_checkpoint(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and np.array_equal(back[k], tensors[k])
    blob = lrio.encode_checkpoint(tensors)
    assert blob[:5] == b"LRFK1"
    with pytest.raises(lrio.FormatError):
        lrio.decode_checkpoint(blob + b"x")
    with pytest.raises(lrio.FormatError):
        lrio.decode_checkpoint(b"XXXXX" + blob[5:])


def test_pgm_values():
    grid = np.array([[0.0, 0.5, 1.0], [0.25, 0.999, 0.002]])
    blob = lrio.encode_pgm(grid)
    assert blob.startswith(b"P5\n3 2\n255\n")
    assert lrio.decode_pgm(blob).tolist() == [[0, 128, 255], [64, 255, 1]]


def test_csv_roundtrip(tmp_path):
    grid = np.random.default_rng(1).uniform(size=(4, 5))
    lrio.write_csv_grid(tmp_path / "g.csv", grid)
    assert np.array_equal(lrio.read_csv_grid(tmp_path / "g.csv"), grid)


def test_jsonl_is_sorted_and_appends(tmp_path):
    path = tmp_path / "m.jsonl"
    lrio.append_jsonl(path, {"b": 1, "a": 2})
    lrio.append_jsonl(path, {"c": [1.5]})
    assert path.read_text() == '{"a": 2, "b": 1}\n{"c": [1.5]}\n'
