"""Windowed structural similarity for multi-channel tensors.

Per-pixel SSIM maps are computed channel by channel with a normalized
window and same-size (edge-replicated) padding, then averaged over the
channel axis.  ``mssim`` is the differentiable scalar used as a training
objective; ``1 - mssim`` is the loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Literal

import numpy as np
import torch

from .exceptions import ContractError

__all__ = [
    "SsimConfig",
    "DynamicRangeCalibrator",
    "calibrate_dynamic_range",
    "make_window",
    "ssim_map",
    "mssim",
    "ssim_loss",
]

MIN_DYNAMIC_RANGE = 1e-3


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window: Literal["gaussian", "uniform"] = "gaussian"
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ContractError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.window not in ("gaussian", "uniform"):
            raise ContractError(f"unknown window type {self.window!r}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ContractError("k1 and k2 must be positive")
        if not self.dynamic_range > 0:
            raise ContractError("dynamic_range must be positive")
        if self.window == "gaussian" and not self.sigma > 0:
            raise ContractError("sigma must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def with_range(self, dynamic_range: float) -> "SsimConfig":
        params = asdict(self)
        params["dynamic_range"] = float(dynamic_range)
        return SsimConfig(**params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SsimConfig":
        return cls(**d)


def _window_1d(cfg: SsimConfig) -> torch.Tensor:
    n = cfg.window_size
    if cfg.window == "uniform":
        w = torch.ones(n, dtype=torch.float64)
    else:
        coords = torch.arange(n, dtype=torch.float64) - (n - 1) / 2
        w = torch.exp(-(coords**2) / (2 * cfg.sigma**2))
    return w / w.sum()


def make_window(cfg: SsimConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    """Return the 2-D window (window_size x window_size), summing to one."""
    w1 = _window_1d(cfg)
    w2 = torch.outer(w1, w1)
    return (w2 / w2.sum()).to(dtype=dtype, device=device)


def _band_matrix(w1: torch.Tensor, n: int) -> torch.Tensor:
    """n x n matrix applying the 1-D window with edge replication folded in."""
    half = w1.numel() // 2
    rows = torch.arange(n).unsqueeze(1)
    taps = (rows + torch.arange(-half, half + 1).unsqueeze(0)).clamp_(0, n - 1)
    band = torch.zeros(n, n, dtype=w1.dtype)
    band.scatter_add_(1, taps, w1.expand(n, -1).clone())
    return band


def _filter(x: torch.Tensor, w1: torch.Tensor) -> torch.Tensor:
    # separable same-size filtering as two banded matmuls (fast on CPU)
    rows = _band_matrix(w1, x.shape[-2]).to(dtype=x.dtype, device=x.device)
    cols = _band_matrix(w1, x.shape[-1]).to(dtype=x.dtype, device=x.device)
    return rows @ x @ cols.T


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4:
        raise ContractError(f"expected batch x C x H x W tensors, got ndim={x.ndim}")


def ssim_map_channels(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig) -> torch.Tensor:
    """Per-channel SSIM map, shape batch x C x H x W."""
    _check_pair(x, y)
    c = x.shape[1]
    w1 = _window_1d(cfg)
    moments = _filter(torch.cat([x, y, x * x, y * y, x * y], dim=1), w1)
    mu_x, mu_y, e_xx, e_yy, e_xy = moments.split(c, dim=1)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = e_xx - mu_xx
    var_y = e_yy - mu_yy
    cov = e_xy - mu_xy
    c1, c2 = cfg.c1, cfg.c2
    num = (2 * mu_xy + c1) * (2 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def ssim_map(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig | None = None) -> torch.Tensor:
    """Per-pixel SSIM averaged over channels, shape batch x H x W."""
    cfg = cfg or SsimConfig()
    return ssim_map_channels(x, y, cfg).mean(dim=1)


def mssim(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig | None = None) -> torch.Tensor:
    """Mean SSIM over all pixels, channels and batch entries (a 0-d tensor)."""
    return ssim_map(x, y, cfg).mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig | None = None) -> torch.Tensor:
    return 1.0 - mssim(x, y, cfg)


class DynamicRangeCalibrator:
    """Running max - min over observed feature values.

    Not thread-safe; callers serialize ``update``.
    """

    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf
        self.n_batches = 0

    def update(self, batch) -> "DynamicRangeCalibrator":
        if isinstance(batch, torch.Tensor):
            lo, hi = float(batch.min()), float(batch.max())
        else:
            arr = np.asarray(batch)
            lo, hi = float(arr.min()), float(arr.max())
        self.lo = min(self.lo, lo)
        self.hi = max(self.hi, hi)
        self.n_batches += 1
        return self

    @property
    def value(self) -> float:
        if self.n_batches == 0:
            raise ContractError("no batches observed")
        return max(self.hi - self.lo, MIN_DYNAMIC_RANGE)


def calibrate_dynamic_range(feature_batches: Iterable) -> float:
    cal = DynamicRangeCalibrator()
    for batch in feature_batches:
        cal.update(getattr(batch, "features", batch))
    return cal.value
