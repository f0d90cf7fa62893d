"""Anomaly maps from (input, reconstruction) pairs, thresholding and overlays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import ContractError, RangeError
from .ssim import SsimConfig, ssim_map

__all__ = [
    "AnomalyMap",
    "anomaly_map",
    "anomaly_maps",
    "reduce_scores",
    "threshold_map",
    "export_overlay",
    "upsample",
]

Reducer = Literal["mean", "max", "topk"]


@dataclass
class AnomalyMap:
    pixel_scores: np.ndarray
    image_score: float
    id: tuple[str, int] | None = None


def reduce_scores(pixel_scores: np.ndarray, reducer: Reducer = "mean", topk_fraction: float = 0.01) -> np.ndarray:
    """Image-level scores for an (N, H, W) stack of pixel scores."""
    flat = np.asarray(pixel_scores, dtype=np.float64).reshape(len(pixel_scores), -1)
    if reducer == "mean":
        return flat.mean(axis=1)
    if reducer == "max":
        return flat.max(axis=1)
    if reducer == "topk":
        k = max(1, int(round(topk_fraction * flat.shape[1])))
        return np.sort(flat, axis=1)[:, -k:].mean(axis=1)
    raise ValueError(f"unknown reducer {reducer!r}")


def upsample(maps: torch.Tensor, target_size: int) -> torch.Tensor:
    """Bilinear resize of (N, H, W) maps to target_size^2."""
    if maps.shape[-2:] == (target_size, target_size):
        return maps
    out = F.interpolate(maps[:, None], size=(target_size, target_size), mode="bilinear",
                        align_corners=False)
    return out[:, 0]


def pixel_score_maps(inputs, reconstruction, cfg: SsimConfig | None = None,
                     target_size: int = 128, score: Literal["ssim", "residual"] = "ssim",
                     chunk: int = 32) -> np.ndarray:
    """(N, target_size, target_size) pixel scores in [0, 1].

    ``score="ssim"`` maps SSIM in [-1, 1] to (1 - SSIM) / 2.  ``"residual"``
    maps the channel-mean squared residual r (in units of the dynamic range)
    through r / (1 + r).
    """
    cfg = cfg or SsimConfig()
    x = torch.as_tensor(getattr(inputs, "features", inputs), dtype=torch.float32)
    y = torch.as_tensor(getattr(reconstruction, "features", reconstruction), dtype=torch.float32)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4:
        raise ContractError("expected N x C x H x W inputs")
    out = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            xs, ys = x[i:i + chunk], y[i:i + chunk]
            if score == "ssim":
                s = ((1.0 - ssim_map(xs, ys, cfg)) / 2.0).clamp_(0.0, 1.0)
            elif score == "residual":
                r = ((xs - ys) ** 2).mean(dim=1) / cfg.dynamic_range**2
                s = r / (1.0 + r)
            else:
                raise ValueError(f"unknown score {score!r}")
            out.append(upsample(s, target_size))
    if not out:
        return np.zeros((0, target_size, target_size), dtype=np.float32)
    return torch.cat(out).numpy().astype(np.float32)


def anomaly_maps(inputs, reconstruction, cfg: SsimConfig | None = None, target_size: int = 128,
                 reducer: Reducer = "mean", score: Literal["ssim", "residual"] = "ssim",
                 ids=None) -> list[AnomalyMap]:
    scores = pixel_score_maps(inputs, reconstruction, cfg, target_size, score)
    image_scores = reduce_scores(scores, reducer)
    ids = ids or [None] * len(scores)
    return [AnomalyMap(s, float(v), i) for s, v, i in zip(scores, image_scores, ids)]


anomaly_map = anomaly_maps


def threshold_map(amap, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"threshold must be in [0, 1], got {t}")
    scores = getattr(amap, "pixel_scores", amap)
    return np.asarray(scores) >= t


def _to_u8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_overlay(slice_, mask, amap, path, t: float = 0.75) -> Path:
    """Write a 3-panel PNG: input, ground truth, thresholded anomaly map."""
    img = np.asarray(slice_, dtype=np.float64).squeeze()
    gt = np.asarray(mask, dtype=bool).squeeze()
    pred = threshold_map(amap, t)
    if not (img.shape == gt.shape == pred.shape):
        raise ContractError(f"panel shapes differ: {img.shape}, {gt.shape}, {pred.shape}")
    panel = np.concatenate([_to_u8(img), _to_u8(gt), _to_u8(pred)], axis=1)
    path = Path(path)
    try:
        Image.fromarray(panel).save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write overlay to {path}: {exc}") from exc
    return path
