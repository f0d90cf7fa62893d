import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from sfae.exceptions import ContractError, RangeError
from sfae.scoring import (
    AnomalyMap,
    anomaly_maps,
    export_overlay,
    pixel_score_maps,
    reduce_scores,
    threshold_map,
    upsample,
)
from sfae.ssim import SsimConfig


def test_identical_reconstruction_scores_zero(rng):
    x = torch.tensor(rng.random((2, 8, 32, 32)), dtype=torch.float32)
    maps = anomaly_maps(x, x.clone())
    assert all(float(np.abs(m.pixel_scores).max()) <= 1e-6 and m.image_score <= 1e-6 for m in maps)
    assert maps[0].pixel_scores.shape == (128, 128)
    res = pixel_score_maps(x, x.clone(), score="residual")
    assert not res.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 50.0), st.sampled_from(["ssim", "residual"]))
def test_scores_bounded(seed, scale, score):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 16, 16, generator=g) * scale
    y = torch.randn(2, 3, 16, 16, generator=g) * scale
    s = pixel_score_maps(x, y, SsimConfig(dynamic_range=scale), 64, score)
    assert s.min() >= 0 and s.max() <= 1 and s.shape == (2, 64, 64)


def test_upsample_argmax_geometry(rng):
    for _ in range(10):
        m = torch.tensor(rng.random((1, 32, 32)) * 0.5, dtype=torch.float32)
        i, j = rng.integers(0, 32, 2)
        m[0, i, j] = 1.0
        up = upsample(m, 128)[0].numpy()
        r, c = np.unravel_index(up.argmax(), up.shape)
        assert abs(r - 4 * i) <= 4 and abs(c - 4 * j) <= 4


def test_upsample_preserves_range(rng):
    m = torch.tensor(rng.random((3, 16, 16)), dtype=torch.float32)
    up = upsample(m, 128)
    assert float(up.min()) >= float(m.min()) - 1e-7 and float(up.max()) <= float(m.max()) + 1e-7


def test_reducers(rng):
    s = rng.random((4, 10, 10))
    assert np.allclose(reduce_scores(s, "mean"), s.reshape(4, -1).mean(1))
    assert np.allclose(reduce_scores(s, "max"), s.reshape(4, -1).max(1))
    assert np.allclose(reduce_scores(s, "topk"), s.reshape(4, -1).max(1))
    for red in ("mean", "max", "topk"):
        raised = s.copy()
        raised[:, 3, 3] += 0.5
        assert (reduce_scores(raised, red) >= reduce_scores(s, red)).all()
    with pytest.raises(ValueError):
        reduce_scores(s, "median")


def test_threshold_examples():
    amap = AnomalyMap(np.array([[0.5, 0.8], [0.8, 0.5]]), 0.65)
    assert np.array_equal(threshold_map(amap, 0.75), [[False, True], [True, False]])
    assert threshold_map(amap, 0.0).all()
    with pytest.raises(RangeError):
        threshold_map(amap, 1 + 1e-9)
    with pytest.raises(RangeError):
        threshold_map(amap, -0.1)


def test_overlay(tmp_path, rng):
    img = rng.random((32, 32))
    amap = AnomalyMap(rng.random((32, 32)), 0.5)
    p1 = export_overlay(img, np.zeros((32, 32), bool), amap, tmp_path / "a.png")
    p2 = export_overlay(img, np.zeros((32, 32), bool), amap, tmp_path / "b.png")
    assert p1.read_bytes() == p2.read_bytes()
    panel = np.asarray(Image.open(p1))
    assert panel.shape == (32, 96)
    assert not panel[:, 32:64].any()
    assert np.array_equal(panel[:, 64:] > 0, amap.pixel_scores >= 0.75)
    with pytest.raises(OSError):
        export_overlay(img, np.zeros((32, 32)), amap, tmp_path / "missing" / "c.png")
    with pytest.raises(ContractError):
        export_overlay(img, np.zeros((16, 16)), amap, tmp_path / "d.png")


def test_shape_mismatch():
    with pytest.raises(ContractError):
        pixel_score_maps(torch.zeros(1, 2, 8, 8), torch.zeros(1, 3, 8, 8))
