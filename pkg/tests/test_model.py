import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from certainnet.model import (CertainNetModel, CheckpointError, ModelConfig, conv2d_forward,
                              objectness_uncertainty, project_features, rbf_score)

SMALL = ModelConfig(n_classes=3, widths=(4, 6, 8), strides=(2, 2, 1), dilations=(1, 1, 2),
                    hyperspace_dim=5)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_project_identity():
    f = np.random.default_rng(0).normal(size=(3, 4, 2))
    proj = np.stack([np.eye(2), 2 * np.eye(2)])
    np.testing.assert_allclose(project_features(f, proj, cls=0), f)


def test_project_hand_matrix():
    proj = np.array([[[2.0, 0.0], [0.0, 3.0]]]).transpose(0, 2, 1)  # (1, F, D) = W^T
    out = project_features(np.array([[[1.0, 0.0]]]), proj, cls=0)
    np.testing.assert_allclose(out[0, 0], [2.0, 0.0])


def test_project_matches_per_pixel_loop():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(3, 3, 6))
    proj = rng.normal(size=(2, 6, 4))
    out = project_features(f, proj)
    for i in range(3):
        for j in range(3):
            for c in range(2):
                expected = [sum(proj[c, k, d] * f[i, j, k] for k in range(6)) for d in range(4)]
                np.testing.assert_allclose(out[i, j, c], expected, rtol=1e-12)


def test_project_rejects_bad_class():
    with pytest.raises(IndexError):
        project_features(np.ones((2, 2, 3)), np.ones((2, 3, 4)), cls=2)


def test_rbf_examples():
    e = np.array([0.3, -0.2, 1.0, 0.0])
    assert rbf_score(e, e, 0.25) == 1.0
    assert rbf_score(np.array([0.5, 0, 0, 0]), np.zeros(4), 0.25) == pytest.approx(0.60653, abs=1e-5)
    assert rbf_score(np.array([1e3, 0, 0, 0]), np.zeros(4), 0.25) < 1e-300


@pytest.mark.parametrize("sigma", [0.0, -0.1])
def test_rbf_rejects_nonpositive_sigma(sigma):
    with pytest.raises(ValueError):
        rbf_score(np.zeros(2), np.zeros(2), sigma)


@settings(max_examples=60, deadline=None)
@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite),
       st.floats(0.05, 2.0))
def test_rbf_symmetric_and_bounded(z, e, sigma):
    a = rbf_score(z, e, sigma)
    assert a == rbf_score(e, z, sigma)
    assert 0.0 <= a <= 1.0


@settings(max_examples=60, deadline=None)
@given(arrays(float, 3, elements=st.floats(-2, 2)).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(1.01, 3.0), st.floats(0.3, 2.0))
def test_rbf_strictly_decreasing(direction, factor, sigma):
    e = np.zeros(3)
    assert rbf_score(direction * factor, e, sigma) < rbf_score(direction, e, sigma)


def test_argmax_preserved_under_common_distance_scaling():
    rng = np.random.default_rng(3)
    for _ in range(50):
        dists = rng.uniform(0.1, 2.0, size=4)
        scores = np.exp(-dists**2 / (2 * 16 * 0.1**2))
        scaled = np.exp(-(0.7 * dists) ** 2 / (2 * 16 * 0.1**2))
        assert np.argmax(scores) == np.argmax(scaled)


def test_objectness_uncertainty():
    assert objectness_uncertainty(1.0) == 0.0
    assert objectness_uncertainty(0.6065) == pytest.approx(0.3935)
    assert objectness_uncertainty(1e-12) == pytest.approx(1.0)


@pytest.mark.parametrize("size", [(16, 16), (17, 13), (9, 30)])
def test_grid_shape_is_ceil(size):
    model = CertainNetModel.initialize(SMALL, seed=0, dtype=np.float64)
    out = model.forward(np.zeros(size))
    assert out.class_heatmaps.shape == (3, -(-size[0] // 4), -(-size[1] // 4))
    assert out.dims_map.shape[1:] == out.class_heatmaps.shape[1:]


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 7, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out, _ = conv2d_forward(x, w, b, stride=2, dilation=1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            np.testing.assert_allclose(out[0, i, j], np.einsum("abc,abco->o", patch, w) + b)


def test_forward_deterministic_and_in_range():
    model = CertainNetModel.initialize(SMALL, seed=4, dtype=np.float64)
    img = np.random.default_rng(0).random((2, 20, 24))
    a = model.forward(img)
    b = model.forward(img)
    assert np.array_equal(a.class_heatmaps, b.class_heatmaps)
    assert np.array_equal(a.dims_map, b.dims_map)
    assert (a.class_heatmaps > 0).all() and (a.class_heatmaps <= 1).all()
    assert (a.dims_map >= 0).all()


def test_centroid_at_blank_embedding_gives_unit_heatmap():
    model = CertainNetModel.initialize(SMALL, seed=0, dtype=np.float64)
    out = model.forward(np.zeros((16, 16)))
    # a blank image has identical features everywhere away from the border
    z = out.embedding_maps[:, 1, 1]
    model.centroid_set.centroids = z.copy()
    heat = model.forward(np.zeros((16, 16))).class_heatmaps
    inner = heat[:, 1:-1, 1:-1]
    np.testing.assert_allclose(inner, 1.0)


def test_uninitialised_model_raises():
    with pytest.raises(RuntimeError):
        CertainNetModel(SMALL).forward(np.zeros((8, 8)))


def test_checkpoint_round_trip(tmp_path):
    model = CertainNetModel.initialize(SMALL, seed=2, flags={"use_reg_loss": True})
    path = tmp_path / "m.ckpt"
    model.save(path)
    assert path.read_bytes().startswith(b"CERTAINNET-CKPT-v1\n")
    loaded = CertainNetModel.load(path)
    assert loaded.config == model.config
    assert loaded.flags["use_reg_loss"] and not loaded.flags["freeze_final"]
    for k in model.params:
        assert np.array_equal(model.params[k], loaded.params[k])
    img = np.random.default_rng(0).random((12, 12))
    assert np.array_equal(model.forward(img).class_heatmaps, loaded.forward(img).class_heatmaps)
    # saving again is byte-identical
    path2 = tmp_path / "m2.ckpt"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOT-A-CHECKPOINT\n")
    with pytest.raises(CheckpointError, match="CERTAINNET-CKPT-v1"):
        CertainNetModel.load(bad)
    model = CertainNetModel.initialize(SMALL, seed=2)
    good = tmp_path / "good.ckpt"
    model.save(good)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        CertainNetModel.load(trunc)
