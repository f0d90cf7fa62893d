import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sfae.exceptions import ContractError, RangeError
from sfae.features import FeatureStack
from sfae.ssim import (
    SsimConfig,
    calibrate_dynamic_range,
    make_window,
    mssim,
    ssim_loss,
    ssim_map,
    ssim_map_channels,
)


def patch_ssim(p, q, w, c1, c2):
    """Scalar SSIM over one full patch with weights ``w`` (sum 1)."""
    mx, my = (w * p).sum(), (w * q).sum()
    vx = (w * (p - mx) ** 2).sum()
    vy = (w * (q - my) ** 2).sum()
    cov = (w * (p - mx) * (q - my)).sum()
    return (2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_patch_oracle_uniform(rng):
    cfg = SsimConfig(window="uniform")
    w = np.full((11, 11), 1 / 121)
    for _ in range(20):
        p, q = rng.random((2, 11, 11))
        got = ssim_map(torch.tensor(p)[None, None], torch.tensor(q)[None, None], cfg)[0, 5, 5]
        assert abs(float(got) - patch_ssim(p, q, w, cfg.c1, cfg.c2)) <= 1e-6


def test_patch_oracle_gaussian(rng):
    cfg = SsimConfig()
    w = make_window(cfg, dtype=torch.float64).numpy()
    for _ in range(20):
        p, q = rng.random((2, 11, 11))
        got = ssim_map(torch.tensor(p)[None, None], torch.tensor(q)[None, None], cfg)[0, 5, 5]
        assert abs(float(got) - patch_ssim(p, q, w, cfg.c1, cfg.c2)) <= 1e-6


def test_constant_patches_closed_form():
    x = torch.zeros(1, 1, 11, 11, dtype=torch.float64)
    y = torch.ones_like(x)
    m = ssim_map(x, y)
    assert torch.allclose(m, torch.full_like(m, 1e-4 / (1 + 1e-4)), rtol=0, atol=1e-12)


@pytest.mark.parametrize("window", ["gaussian", "uniform"])
def test_window_sums_to_one(window):
    assert abs(float(make_window(SsimConfig(window=window), torch.float64).sum()) - 1) <= 1e-7


def test_identity_and_symmetry(rng):
    x = torch.tensor(rng.random((2, 3, 16, 20)), dtype=torch.float32)
    y = torch.tensor(rng.random((2, 3, 16, 20)), dtype=torch.float32)
    assert torch.allclose(ssim_map(x, x), torch.ones(2, 16, 20), atol=1e-6)
    assert float(mssim(x, x)) == pytest.approx(1.0, abs=1e-6)
    assert abs(float(mssim(x, y)) - float(mssim(y, x))) <= 1e-7
    assert torch.allclose(ssim_map(x, y), ssim_map(y, x), atol=1e-6)


def test_mssim_is_mean_of_map(rng):
    x, y = (torch.tensor(rng.random((3, 2, 12, 12))) for _ in range(2))
    assert float(mssim(x, y)) == pytest.approx(float(ssim_map(x, y).mean()), abs=1e-12)
    assert float(ssim_loss(x, y)) == pytest.approx(1 - float(mssim(x, y)), abs=1e-12)
    assert torch.allclose(ssim_map(x, y), ssim_map_channels(x, y, SsimConfig()).mean(1))


def test_gradient_matches_finite_differences():
    for seed in range(10):
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(1, 2, 8, 8, generator=g, dtype=torch.float64)
        y = torch.rand(1, 2, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
        (1 - mssim(x, y)).backward()
        fd = torch.zeros_like(x)
        eps = 1e-6
        flat = y.detach().clone().view(-1)
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += eps
            lo[i] -= eps
            fd.view(-1)[i] = (float(1 - mssim(x, hi.view_as(x))) - float(1 - mssim(x, lo.view_as(x)))) / (2 * eps)
        rel = float((y.grad - fd).norm() / fd.norm())
        assert rel <= 1e-3


def test_shape_mismatch():
    with pytest.raises(ContractError):
        ssim_map(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 9))
    with pytest.raises(ContractError):
        ssim_map(torch.zeros(1, 8, 8), torch.zeros(1, 8, 8))


@pytest.mark.parametrize("kwargs", [{"window_size": 4}, {"window_size": 0}, {"sigma": 0},
                                    {"k1": -1}, {"dynamic_range": 0}, {"window": "box"}])
def test_config_validation(kwargs):
    with pytest.raises((ContractError, RangeError)):
        SsimConfig(**kwargs)


def test_config_roundtrip():
    cfg = SsimConfig(window_size=7, sigma=1.0, dynamic_range=3.5)
    assert SsimConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.c1 == pytest.approx((0.01 * 3.5) ** 2)
    assert cfg.c2 == pytest.approx((0.03 * 3.5) ** 2)
    assert cfg.with_range(2.0).dynamic_range == 2.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.sampled_from(["gaussian", "uniform"]))
def test_map_range_property(seed, scale, window):
    g = torch.Generator().manual_seed(seed)
    x = (torch.randn(1, 2, 13, 9, generator=g, dtype=torch.float64) * scale)
    y = (torch.randn(1, 2, 13, 9, generator=g, dtype=torch.float64) * scale)
    m = ssim_map(x, y, SsimConfig(window=window))
    assert float(m.min()) >= -1 - 1e-6 and float(m.max()) <= 1 + 1e-6
    assert torch.allclose(ssim_map(x, x, SsimConfig(window=window)), torch.ones_like(m), atol=1e-6)


def test_dynamic_range_examples():
    assert calibrate_dynamic_range([np.array([-2.0, 0.0, 6.0])]) == 8.0
    assert calibrate_dynamic_range([np.zeros((2, 3))]) == 1e-3
    assert calibrate_dynamic_range([np.array([0.0, 1.0]), np.array([-1.0, 3.0])]) == 4.0
    stack = FeatureStack(torch.tensor([[-1.0, 2.5]]), (0,), None)
    assert calibrate_dynamic_range([stack]) == 3.5
    with pytest.raises(ContractError):
        calibrate_dynamic_range([])
