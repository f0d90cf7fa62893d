"""Training loop for reconstruction models on normal-only slices."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetSplit, SliceBatch
from .exceptions import ContractError, DataContractError
from .features import FeatureStack
from .models import save_checkpoint
from .ssim import DynamicRangeCalibrator, SsimConfig, ssim_loss

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainState", "train", "training_curve", "save_curve", "load_curve"]

LossName = Literal["one_minus_mssim", "mse"]


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 64
    steps: int = 10_000
    loss: LossName = "one_minus_mssim"
    seed: int = 0
    val_interval: int = 500
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    calibration_steps: int = 100
    val_max_slices: int = 64
    cache_features: bool = False
    log_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_interval: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ContractError("lr must be non-negative")
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be >= 1")
        if self.loss not in ("one_minus_mssim", "mse"):
            raise ContractError(f"unknown loss {self.loss!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: nn.Module
    optimizer_state: dict
    step: int
    dynamic_range: float
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    best_step: int | None = None
    best_val_loss: float = math.inf
    best_snapshot: dict | None = None


def training_curve(state: TrainState) -> list[tuple[int, float, float | None]]:
    """(step, train_loss, val_loss or None), steps counted from 1."""
    val = dict(state.val_losses)
    return [(i + 1, loss, val.get(i + 1)) for i, loss in enumerate(state.train_losses)]


def save_curve(curve, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for step, tr, va in curve:
            fh.write(json.dumps({"step": step, "train_loss": tr, "val_loss": va}) + "\n")
    return path


def load_curve(path) -> list[tuple[int, float, float | None]]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [(r["step"], r["train_loss"], r["val_loss"]) for r in rows]


class _BatchStream:
    """Deterministic epoch-wise shuffling over the training slices."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB47C]))
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return np.sort(idx)


def _loss_fn(name: str) -> Callable:
    if name == "mse":
        return lambda target, recon, cfg: F.mse_loss(recon, target)
    return lambda target, recon, cfg: ssim_loss(target, recon, cfg)


def train(model: nn.Module, data: DatasetSplit | SliceBatch, extractor=None,
          cfg: TrainConfig = TrainConfig(), ssim_cfg: SsimConfig = SsimConfig(),
          on_step: Callable[[int, float], None] | None = None) -> TrainState:
    """Run exactly ``cfg.steps`` Adam updates on normal training slices.

    ``extractor`` maps an image tensor to a FeatureStack and must be given
    iff the model reconstructs features.  For feature-space models the SSIM
    dynamic range is the running feature range over the first
    ``cfg.calibration_steps`` batches, then frozen; image-space models use
    the range of ``ssim_cfg``.
    """
    train_set = data.train if isinstance(data, DatasetSplit) else data
    val_set = data.val if isinstance(data, DatasetSplit) else None
    if train_set.labels is not None and train_set.labels.any():
        raise DataContractError("anomalous slice found in the training stream")
    feature_space = extractor is not None

    images = torch.from_numpy(train_set.images)
    cache: dict[int, torch.Tensor] = {}
    calls = {"extract": 0}

    def model_input(idx: np.ndarray) -> torch.Tensor:
        x = images[idx]
        if not feature_space:
            return x
        if cfg.cache_features:
            missing = [i for i in idx if int(i) not in cache]
            if missing:
                stack = extractor(images[missing])
                calls["extract"] += 1
                for j, i in enumerate(missing):
                    cache[int(i)] = stack.features[j].to(torch.float16)
            return torch.stack([cache[int(i)] for i in idx]).float()
        stack = extractor(x)
        calls["extract"] += 1
        if not isinstance(stack, FeatureStack):
            raise ContractError("extractor must return a FeatureStack")
        return stack.features

    val_input = None
    if val_set is not None and len(val_set):
        normal = np.flatnonzero(val_set.labels == 0) if val_set.labels is not None else np.arange(len(val_set))
        normal = normal[: cfg.val_max_slices]
        if len(normal):
            vx = torch.from_numpy(val_set.images[normal])
            val_input = extractor(vx).features if feature_space else vx

    calibrator = DynamicRangeCalibrator()
    dynamic_range = ssim_cfg.dynamic_range
    loss_fn = _loss_fn(cfg.loss)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    stream = _BatchStream(len(train_set), cfg.batch_size, cfg.seed)
    state = TrainState(model, {}, 0, dynamic_range)
    log = open(cfg.log_path, "a") if cfg.log_path else None

    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            for step in range(1, cfg.steps + 1):
                idx = stream.next()
                before = calls["extract"]
                x = model_input(idx)
                if feature_space and not cfg.cache_features and calls["extract"] - before != 1:
                    raise ContractError("feature extraction must run exactly once per batch")
                if feature_space and step <= cfg.calibration_steps:
                    calibrator.update(x)
                    dynamic_range = calibrator.value
                scfg = ssim_cfg.with_range(dynamic_range)

                model.train()
                optimizer.zero_grad(set_to_none=True)
                loss = loss_fn(x, model(x), scfg)
                loss.backward()
                optimizer.step()
                loss_value = float(loss.detach())
                state.train_losses.append(loss_value)
                state.step = step
                record = {"step": step, "train_loss": loss_value}

                if val_input is not None and cfg.val_interval and step % cfg.val_interval == 0:
                    val_loss = _evaluate_loss(model, val_input, loss_fn, scfg)
                    state.val_losses.append((step, val_loss))
                    record["val_loss"] = val_loss
                    if val_loss < state.best_val_loss:
                        state.best_val_loss = val_loss
                        state.best_step = step
                        state.best_snapshot = copy.deepcopy(model.state_dict())
                if log is not None:
                    log.write(json.dumps(record) + "\n")
                if on_step is not None:
                    on_step(step, loss_value)
                if cfg.checkpoint_dir and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                    _checkpoint(cfg, model, x.shape[1:], step, dynamic_range)
    finally:
        if log is not None:
            log.close()

    model.eval()
    state.dynamic_range = dynamic_range
    state.optimizer_state = optimizer.state_dict()
    return state


@torch.no_grad()
def _evaluate_loss(model, inputs, loss_fn, scfg, chunk: int = 32) -> float:
    model.eval()
    total, n = 0.0, 0
    for i in range(0, len(inputs), chunk):
        x = inputs[i:i + chunk]
        total += float(loss_fn(x, model(x), scfg)) * len(x)
        n += len(x)
    model.train()
    return total / max(n, 1)


def _checkpoint(cfg: TrainConfig, model, geometry, step, dynamic_range):
    path = Path(cfg.checkpoint_dir) / f"step{step:06d}.ckpt"
    kind = getattr(model, "kind", "feature_ae")
    save_checkpoint(path, model, kind, tuple(geometry), cfg.seed,
                    {"step": step, "dynamic_range": dynamic_range})
