import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certainnet.synthdata import (UNSEEN_SHAPES, CorruptRecordError, DatasetVersionError,
                                  SceneConfig, ShiftConfig, apply_shift, generate_dataset,
                                  generate_scene, load_dataset, save_dataset, shape_mask)

SMALL = SceneConfig(height=48, width=48, size_range=(8, 16), count_range=(0, 3), seed=11)


def test_scene_deterministic():
    assert generate_scene(SMALL, 5) == generate_scene(SMALL, 5)
    assert generate_scene(SMALL, 5) != generate_scene(SMALL, 6)
    other = SceneConfig(**{**SMALL.to_dict(), "seed": 12})
    assert generate_scene(other, 5) != generate_scene(SMALL, 5)


def test_zero_objects_background_only():
    cfg = SceneConfig(height=32, width=32, size_range=(4, 8), count_range=(0, 0))
    scene = generate_scene(cfg, 0)
    assert scene.boxes.shape == (0, 4) and scene.classes.shape == (0,)
    assert scene.image.shape == (32, 32) and scene.image.dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_objects_inside_and_disjoint(index):
    scene = generate_scene(SMALL, index)
    b = scene.boxes
    assert ((b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 0] + b[:, 2] <= 48)
            & (b[:, 1] + b[:, 3] <= 48)).all()
    for i in range(len(b)):
        for j in range(i + 1, len(b)):
            overlap_w = min(b[i, 0] + b[i, 2], b[j, 0] + b[j, 2]) - max(b[i, 0], b[j, 0])
            overlap_h = min(b[i, 1] + b[i, 3], b[j, 1] + b[j, 3]) - max(b[i, 1], b[j, 1])
            assert overlap_w <= 0 or overlap_h <= 0


def test_crowded_scene_places_fewer(caplog):
    cfg = SceneConfig(height=20, width=20, size_range=(12, 14), count_range=(5, 5),
                      max_retries=5)
    with caplog.at_level("INFO", logger="certainnet.synthdata"):
        scene = generate_scene(cfg, 0)
    assert 1 <= len(scene.boxes) < 5
    assert "placed" in caplog.text


def test_class_frequencies_within_two_percent():
    cfg = SceneConfig(height=40, width=40, size_range=(4, 6), count_range=(4, 4),
                      class_weights=(0.6, 0.3, 0.1), seed=2)
    classes = np.concatenate([generate_scene(cfg, i).classes for i in range(2600)])
    assert len(classes) >= 10_000
    freq = np.bincount(classes, minlength=3) / len(classes)
    np.testing.assert_allclose(freq, cfg.class_weights, atol=0.02)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(class_weights=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        SceneConfig(size_range=(0, 4))
    with pytest.raises(ValueError):
        SceneConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError):
        ShiftConfig(unseen_rate=1.5)
    assert SceneConfig.from_dict(SMALL.to_dict()) == SMALL


def test_shapes_cover_their_box():
    for shape in ("rectangle", "ellipse", "triangle", *UNSEEN_SHAPES):
        m = shape_mask(shape, (4, 6, 10, 8), 20, 20)
        rows, cols = np.nonzero(m)
        assert m.any()
        assert rows.min() >= 6 and rows.max() < 14 and cols.min() >= 4 and cols.max() < 14


# -- shift -------------------------------------------------------------------

def test_identity_shift():
    scene = generate_scene(SMALL, 3)
    assert apply_shift(scene, ShiftConfig(), seed=9) == scene


def test_noise_shift_statistics():
    cfg = SceneConfig(height=128, width=128, count_range=(1, 3), seed=4)
    scene = generate_scene(cfg, 0)
    shifted = apply_shift(scene, ShiftConfig(noise_sigma=0.2), seed=1)
    dev = shifted.image.astype(float) - scene.image
    assert abs(dev.std() - 0.2) / 0.2 < 0.05
    assert abs(dev.mean()) < 0.01
    np.testing.assert_array_equal(shifted.boxes, scene.boxes)


def test_intensity_shift_is_uniform_offset():
    scene = generate_scene(SMALL, 2)
    shifted = apply_shift(scene, ShiftConfig(intensity_shift=-0.1))
    np.testing.assert_allclose(shifted.image - scene.image, -0.1, atol=1e-6)


def test_size_shift_scales_boxes_about_center():
    scene = generate_scene(SceneConfig(count_range=(2, 3), seed=1), 0)
    shifted = apply_shift(scene, ShiftConfig(size_factor=1.5))
    np.testing.assert_allclose(shifted.boxes[:, 2:], scene.boxes[:, 2:] * 1.5)
    np.testing.assert_allclose(shifted.boxes[:, :2] + shifted.boxes[:, 2:] / 2,
                               scene.boxes[:, :2] + scene.boxes[:, 2:] / 2)
    np.testing.assert_array_equal(shifted.classes, scene.classes)


def test_unseen_shapes_and_determinism():
    scene = generate_scene(SceneConfig(count_range=(4, 4), seed=3), 0)
    full = apply_shift(scene, ShiftConfig(unseen_rate=1.0), seed=2)
    assert all(s in UNSEEN_SHAPES for s in full.shapes)
    assert apply_shift(scene, ShiftConfig.benchmark(), seed=5) == apply_shift(
        scene, ShiftConfig.benchmark(), seed=5)


# -- I/O ---------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    scenes = generate_dataset(SMALL, 6)
    save_dataset(tmp_path / "ds", scenes, SMALL)
    assert load_dataset(tmp_path / "ds") == scenes
    lines = (tmp_path / "ds" / "annotations.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    assert set(rec) == {"image_id", "class", "box"} and len(rec["box"]) == 4


def test_dataset_bytes_deterministic(tmp_path):
    scenes = generate_dataset(SMALL, 3)
    save_dataset(tmp_path / "a", scenes, SMALL)
    save_dataset(tmp_path / "b", generate_dataset(SMALL, 3), SMALL)
    for name in ("manifest.json", "grids.bin", "annotations.jsonl", "render.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_truncated_grid_names_offset(tmp_path):
    save_dataset(tmp_path, generate_dataset(SMALL, 3), SMALL)
    grids = tmp_path / "grids.bin"
    data = grids.read_bytes()
    grids.write_bytes(data[:-7])
    with pytest.raises(CorruptRecordError, match=r"record 2 .*byte offset \d+.*version 1"):
        load_dataset(tmp_path)


def test_future_version_rejected(tmp_path):
    save_dataset(tmp_path, generate_dataset(SMALL, 1), SMALL)
    mpath = tmp_path / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["version"] = 99
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetVersionError, match="99"):
        load_dataset(tmp_path)


def test_corrupt_annotation_line(tmp_path):
    save_dataset(tmp_path, generate_dataset(SMALL, 2), SMALL)
    with open(tmp_path / "annotations.jsonl", "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(CorruptRecordError, match="annotations.jsonl"):
        load_dataset(tmp_path)
