"""Per-run evaluation, multi-seed aggregation and report serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SliceBatch
from .exceptions import ContractError
from .metrics import dice_at_fpr, image_auroc, pixel_ap, welch_t_test
from .scoring import reduce_scores
from .validation import check_labeled

__all__ = ["METRICS", "EvalReport", "evaluate_run", "aggregate", "compare", "write_table"]

METRICS = ("pixel_ap", "dice_at_5fpr", "image_auroc")


def evaluate_run(scorer, test: SliceBatch, reducer: str | None = None, fpr: float = 0.05,
                 chunk: int = 64) -> dict[str, float]:
    """Pooled pixel metrics and slice-level AUROC over the whole test set.

    ``scorer`` is a fitted detector exposing ``anomaly_maps(images)`` or a
    callable with the same contract, returning (N, H, W) pixel scores.
    """
    test = check_labeled(test)
    maps_fn: Callable = getattr(scorer, "anomaly_maps", scorer)
    reducer = reducer or getattr(scorer, "reducer", "mean")
    pixel_scores = []
    for start in range(0, len(test), chunk):
        pixel_scores.append(np.asarray(maps_fn(test.images[start:start + chunk]), dtype=np.float32))
    scores = np.concatenate(pixel_scores)
    if scores.shape != test.masks.shape:
        raise ContractError(f"score maps {scores.shape} do not match masks {test.masks.shape}")
    flat_scores = scores.reshape(-1)
    flat_labels = test.masks.reshape(-1)
    image_scores = reduce_scores(scores, reducer)
    return {
        "pixel_ap": pixel_ap(flat_scores, flat_labels),
        "dice_at_5fpr": dice_at_fpr(flat_scores, flat_labels, fpr),
        "image_auroc": image_auroc(image_scores, test.labels),
    }


def _summary(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return float(v.mean()), std


@dataclass
class EvalReport:
    method: str
    per_seed: list[dict[str, float]]
    seeds: list[int]
    config_hash: str = ""
    metadata: dict = field(default_factory=dict)
    significance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seeds) != len(self.per_seed):
            raise ContractError("one metric triple per seed is required")
        for row in self.per_seed:
            for name in METRICS:
                if not 0.0 <= row[name] <= 1.0:
                    raise ContractError(f"{name}={row[name]} outside [0, 1]")

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed)

    def values(self, metric: str) -> list[float]:
        return [row[metric] for row in self.per_seed]

    def mean(self, metric: str) -> float:
        return _summary(self.values(metric))[0]

    def std(self, metric: str) -> float:
        return _summary(self.values(metric))[1]

    def summary(self) -> dict[str, dict[str, float]]:
        return {m: dict(zip(("mean", "std"), _summary(self.values(m)))) for m in METRICS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_seeds"] = self.n_seeds
        d["summary"] = self.summary()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["method"], d["per_seed"], d["seeds"], d.get("config_hash", ""),
                   d.get("metadata", {}), d.get("significance", {}))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def aggregate(method: str, per_seed: dict[int, dict[str, float]], config_hash: str = "",
              metadata: dict | None = None) -> EvalReport:
    seeds = sorted(per_seed)
    return EvalReport(method, [per_seed[s] for s in seeds], seeds, config_hash, dict(metadata or {}))


def compare(reference: EvalReport, other: EvalReport) -> dict[str, dict[str, float]]:
    """Welch t-test of ``reference`` against ``other`` for every metric."""
    out = {}
    for m in METRICS:
        t, p = welch_t_test(reference.values(m), other.values(m))
        out[m] = {"t": t, "p": p}
    return out


def write_table(reports: Sequence[EvalReport], path) -> Path:
    """CSV in the layout method, pixel_ap, dice, auroc as ``mean +- std``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "pixel_ap", "dice_at_5fpr", "image_auroc", "n_seeds", "config_hash"])
        for r in reports:
            cells = [f"{r.mean(m):.3f} ± {r.std(m):.3f}" for m in METRICS]
            w.writerow([r.method, *cells, r.n_seeds, r.config_hash])
    return path


def write_figure_data(reports: Sequence[EvalReport], path) -> Path:
    """Long-format CSV (method, metric, mean, std) for bar charts."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "mean", "std", "config_hash"])
        for r in reports:
            for m in METRICS:
                w.writerow([r.method, m, f"{r.mean(m):.6f}", f"{r.std(m):.6f}", r.config_hash])
    return path
