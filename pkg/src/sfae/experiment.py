"""Multi-seed experiment matrix, layer ablation, reports and verification.

A run is a matrix of cells ``(kind, layer selection, seed)``.  Each cell is
built, trained and evaluated independently and writes its artifacts under
``<output>/cells/<method>/seed<k>/``; finished cells are skipped on restart.
Every artifact embeds the SHA-256 hash of the canonical experiment config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    DatasetSplit,
    PhantomConfig,
    SliceBatch,
    center_slice_range,
    inject_sinks,
    load_volume,
    make_phantom_dataset,
    preprocess,
    resize_slices,
)
from .estimator import StructuralFeatureAE
from .evaluation import METRICS, EvalReport, aggregate, compare, evaluate_run, write_figure_data, write_table
from .exceptions import ConfigError, ContractError
from .features import LayerSelection, parse_selection
from .models import ModelKind, load_checkpoint, save_checkpoint
from .scoring import export_overlay
from .training import save_curve

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "load_config",
    "load_data",
    "run_experiment",
    "run_ablation",
    "report",
    "verify",
    "ABLATION_SELECTIONS",
    "CONSTANT_BASELINE",
]

ABLATION_SELECTIONS = ((0,), (0, 1), (0, 1, 2), (0, 1, 2, 3))
CONSTANT_BASELINE = "constant"
_HASH_EXCLUDE = ("output_dir", "workers")


@dataclass
class ExperimentConfig:
    output_dir: str
    dataset: dict = field(default_factory=lambda: {"kind": "phantom", "n_volumes": 50, "seed": 0})
    model_kinds: list[str] = field(default_factory=lambda: ["feature_ae"])
    layer_selections: list[list[int]] = field(default_factory=lambda: [[0, 1, 2]])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    reducer: str = "mean"
    pretrained: bool = True
    weights_path: str | None = None
    backbone_seed: int = 0
    reference: str | None = None
    constant_baseline: bool = True
    overlays: int = 4
    overlay_threshold: float = 0.75
    expected_order: list[str] | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.model_kinds:
            raise ConfigError("at least one model kind is required")
        for k in self.model_kinds:
            try:
                ModelKind(k)
            except ValueError:
                raise ConfigError(f"unknown model kind {k!r}") from None
        try:
            self.layer_selections = [list(parse_selection(s)) for s in self.layer_selections]
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.layer_selections:
            raise ConfigError("at least one layer selection is required")
        kind = self.dataset.get("kind")
        if kind not in ("phantom", "nifti_dir"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "nifti_dir" and not Path(self.dataset.get("path", "")).is_dir():
            raise ConfigError(f"dataset directory {self.dataset.get('path')!r} does not exist")
        if self.weights_path is not None and not Path(self.weights_path).is_file():
            raise ConfigError(f"weights file {self.weights_path!r} does not exist")
        unknown = set(self.train) - set(_TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self)

    @property
    def reference_method(self) -> str:
        return self.reference or _method_name(ModelKind(self.model_kinds[0]),
                                              self.layer_selections[0], self)


_TRAIN_KEYS = ("lr", "batch_size", "steps", "loss", "val_interval", "calibration_steps", "cache_features")


def config_hash(cfg: ExperimentConfig | dict) -> str:
    d = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else dict(cfg)
    d = {k: v for k, v in d.items() if k not in _HASH_EXCLUDE}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ data


def load_nifti_dir(path, seed: int = 0, n_center_slices: int = 80, out_size: int = 128) -> DatasetSplit:
    """``path/{train,val,test}/*.nii[.gz]``; ``*_seg.nii[.gz]`` files are masks.

    Evaluation splits without masks receive sink anomalies on half the slices.
    """
    root = Path(path)
    parts = {}
    for j, name in enumerate(("train", "val", "test")):
        files = sorted(p for p in (root / name).glob("*.nii*") if "_seg" not in p.name)
        batches = []
        for f in files:
            vol = load_volume(f)
            batch = preprocess(vol, n_center_slices, out_size)
            seg = f.with_name(f.name.replace(".nii", "_seg.nii", 1))
            if seg.exists():
                mvol = load_volume(seg)
                idx = center_slice_range(mvol.n_slices, n_center_slices)
                m = resize_slices((mvol.voxels[idx.start:idx.stop] > 0).astype(np.float32),
                                  batch.images.shape[-1]) >= 0.5
                batch = SliceBatch(batch.images, m, m.reshape(len(m), -1).any(1), batch.ids)
            batches.append(batch)
        if not batches:
            raise ConfigError(f"no volumes in {root / name}")
        part = SliceBatch.concat(batches)
        if name == "train":
            if part.labels is not None and part.labels.any():
                raise ConfigError("training volumes must not contain anomalies")
            part = SliceBatch(part.images, ids=part.ids)
        elif part.masks is None:
            part = inject_sinks(part, int(np.random.SeedSequence([seed, j]).generate_state(1)[0]))
        parts[name] = part
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed)


def load_data(cfg: ExperimentConfig) -> DatasetSplit:
    ds = cfg.dataset
    if ds["kind"] == "phantom":
        pcfg = {k: tuple(v) if isinstance(v, list) else v for k, v in ds.get("phantom", {}).items()}
        try:
            phantom = PhantomConfig(**pcfg)
        except TypeError as exc:
            raise ConfigError(f"bad phantom parameters: {exc}") from exc
        return make_phantom_dataset(int(ds.get("n_volumes", 50)), int(ds.get("seed", 0)), phantom,
                                    int(ds.get("n_center_slices", 80)), int(ds.get("out_size", 128)))
    return load_nifti_dir(ds["path"], int(ds.get("seed", 0)), int(ds.get("n_center_slices", 80)),
                          int(ds.get("out_size", 128)))


# ----------------------------------------------------------------- cells


def _method_name(kind: ModelKind, selection, cfg: ExperimentConfig) -> str:
    if not kind.feature_space:
        return kind.value
    if len(cfg.layer_selections) == 1:
        return kind.value
    return f"{kind.value}[{LayerSelection(selection).name}]"


def _cells(cfg: ExperimentConfig) -> list[tuple[str, ModelKind, list[int] | None, int]]:
    cells, seen = [], set()
    for k in cfg.model_kinds:
        kind = ModelKind(k)
        selections = cfg.layer_selections if kind.feature_space else [None]
        for sel in selections:
            method = _method_name(kind, sel, cfg)
            for seed in cfg.seeds:
                if (method, seed) not in seen:
                    seen.add((method, seed))
                    cells.append((method, kind, sel, seed))
    return cells


def _batch_size(cfg: ExperimentConfig, kind: ModelKind):
    bs = cfg.train.get("batch_size")
    if isinstance(bs, dict):
        return bs.get(kind.value)
    return None if kind in (ModelKind.DFR_STYLE, ModelKind.DFR_STYLE_SSIM) and bs is None else bs


def make_estimator(cfg: ExperimentConfig, kind: ModelKind, selection, seed: int) -> StructuralFeatureAE:
    t = cfg.train
    s = cfg.ssim
    return StructuralFeatureAE(
        kind=kind.value,
        layers=tuple(selection) if selection is not None else (0, 1, 2),
        pretrained=cfg.pretrained,
        weights_path=cfg.weights_path,
        backbone_seed=cfg.backbone_seed,
        lr=t.get("lr", 2e-4),
        batch_size=_batch_size(cfg, kind),
        steps=t.get("steps", 10_000),
        loss=t.get("loss"),
        val_interval=t.get("val_interval", 500),
        calibration_steps=t.get("calibration_steps", 100),
        window_size=s.get("window_size", 11),
        window=s.get("window", "gaussian"),
        sigma=s.get("sigma", 1.5),
        k1=s.get("k1", 0.01),
        k2=s.get("k2", 0.03),
        reducer=cfg.reducer,
        cache_features=t.get("cache_features", False),
        random_state=seed,
    )


def _cell_dir(out: Path, method: str, seed: int) -> Path:
    safe = method.replace("[", "_").replace("]", "").replace(",", "-")
    return out / "cells" / safe / f"seed{seed}"


def _run_cell(cfg: ExperimentConfig, data: DatasetSplit, method, kind, selection, seed) -> dict:
    out = _cell_dir(Path(cfg.output_dir), method, seed)
    metrics_path = out / "metrics.json"
    chash = cfg.hash
    if metrics_path.exists():
        done = json.loads(metrics_path.read_text())
        if done.get("config_hash") == chash:
            logger.info("skipping finished cell %s seed %d", method, seed)
            return done
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    est = make_estimator(cfg, kind, selection, seed)
    t0 = time.perf_counter()
    est.fit(data)
    fit_s = time.perf_counter() - t0
    metrics = evaluate_run(est, data.test)
    geometry = list(est.geometry_)
    save_checkpoint(out / "model.ckpt", est.model_, kind, geometry, seed,
                    {"config_hash": chash, "dynamic_range": est.dynamic_range_,
                     "layers": None if selection is None else list(selection)})
    save_curve(est.training_curve(), out / "curve.jsonl")
    record = {
        "method": method,
        "kind": kind.value,
        "selection": None if selection is None else list(selection),
        "seed": seed,
        "geometry": geometry,
        "dynamic_range": est.dynamic_range_,
        "metrics": metrics,
        "config_hash": chash,
    }
    if cfg.overlays and seed == cfg.seeds[0]:
        _write_overlays(est, data.test, out / "overlays", cfg)
    # wall-clock numbers live apart from the bit-reproducible artifacts
    (out / "timing.json").write_text(json.dumps({"fit_s": fit_s, "total_s": time.perf_counter() - t0}))
    metrics_path.write_text(json.dumps(record, sort_keys=True, indent=2))
    return record


def _write_overlays(est, test: SliceBatch, directory: Path, cfg: ExperimentConfig):
    directory.mkdir(parents=True, exist_ok=True)
    idx = np.flatnonzero(test.labels)[: cfg.overlays]
    maps = est.anomaly_maps(test.images[idx])
    for j, i in enumerate(idx):
        export_overlay(test.images[i, 0], test.masks[i], maps[j],
                       directory / f"slice{int(i):05d}.png", cfg.overlay_threshold)


_WORKER_STATE: dict = {}


def _worker_init(cfg_dict, data):
    _WORKER_STATE["cfg"] = ExperimentConfig(**cfg_dict)
    _WORKER_STATE["data"] = data


def _worker_cell(cell):
    return _guarded_cell(_WORKER_STATE["cfg"], _WORKER_STATE["data"], cell)


def _guarded_cell(cfg, data, cell):
    method, kind, selection, seed = cell
    try:
        return _run_cell(cfg, data, method, kind, selection, seed)
    except Exception as exc:  # failure isolation per cell
        logger.exception("cell %s seed %d failed", method, seed)
        out = _cell_dir(Path(cfg.output_dir), method, seed)
        out.mkdir(parents=True, exist_ok=True)
        err = {"method": method, "seed": seed, "error": repr(exc),
               "traceback": traceback.format_exc(), "config_hash": cfg.hash}
        (out / "error.json").write_text(json.dumps(err, indent=2))
        return err


def constant_baseline_metrics(test: SliceBatch) -> dict[str, float]:
    return evaluate_run(lambda images: np.full((len(images), *images.shape[2:]), 0.5, np.float32), test)


def run_experiment(cfg: ExperimentConfig, data: DatasetSplit | None = None) -> dict:
    """Train and evaluate every cell, aggregate, test and write all outputs.

    Returns a summary dict with ``reports`` (method -> EvalReport),
    ``failures`` and ``config_hash``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2))
    data = data if data is not None else load_data(cfg)
    cells = _cells(cfg)
    if cfg.workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(cfg.workers, mp_context=ctx, initializer=_worker_init,
                                 initargs=(cfg.to_dict(), data)) as pool:
            records = list(pool.map(_worker_cell, cells))
    else:
        records = [_guarded_cell(cfg, data, c) for c in cells]
    extra = {}
    if cfg.constant_baseline:
        extra[CONSTANT_BASELINE] = constant_baseline_metrics(data.test)
    return _finalize(cfg, records, extra)


def _finalize(cfg: ExperimentConfig, records: list[dict], extra: dict) -> dict:
    out = Path(cfg.output_dir)
    chash = cfg.hash
    failures = [r for r in records if "error" in r]
    by_method: dict[str, dict[int, dict]] = {}
    info: dict[str, dict] = {}
    for r in records:
        if "error" in r:
            continue
        by_method.setdefault(r["method"], {})[r["seed"]] = r["metrics"]
        info[r["method"]] = {"kind": r["kind"], "selection": r["selection"], "geometry": r["geometry"]}
    reports = {}
    for method, per_seed in by_method.items():
        reports[method] = aggregate(method, per_seed, chash,
                                    {**info[method], "reducer": cfg.reducer})
    for name, metrics in extra.items():
        reports[name] = aggregate(name, {s: metrics for s in cfg.seeds}, chash,
                                  {"kind": name, "reducer": "constant"})

    ref = cfg.reference_method
    if ref in reports:
        for method, rep in reports.items():
            if method == ref:
                continue
            if min(rep.n_seeds, reports[ref].n_seeds) < 2:
                reports[ref].significance[method] = {"skipped": "needs at least two seeds per method"}
            else:
                reports[ref].significance[method] = compare(reports[ref], rep)

    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    for method, rep in reports.items():
        rep.to_json(reports_dir / f"{_safe(method)}.json")
    ordered = list(reports.values())
    write_table(ordered, out / "table.csv")
    write_figure_data(ordered, out / "figure_data.csv")
    _render_figure(ordered, out / "figure.png")

    summary = {
        "config_hash": chash,
        "reference": ref,
        "methods": list(reports),
        "summary": {m: r.summary() for m, r in reports.items()},
        "significance": reports[ref].significance if ref in reports else {},
        "failures": [{"method": f["method"], "seed": f["seed"], "error": f["error"]} for f in failures],
        "n_cells": len(records),
        "ordering_check": _ordering_check(cfg.expected_order, reports),
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return {"reports": reports, "failures": failures, "config_hash": chash, "summary": summary}


def _ordering_check(order, reports, metric: str = "pixel_ap") -> dict | None:
    """Soft check that mean ``metric`` is non-increasing along ``order``."""
    if not order:
        return None
    means = {m: reports[m].mean(metric) for m in order if m in reports}
    present = [m for m in order if m in means]
    holds = len(present) == len(order) and all(
        means[a] >= means[b] for a, b in zip(present, present[1:]))
    if not holds:
        logger.warning("expected ordering %s on %s does not hold: %s", order, metric, means)
    return {"metric": metric, "order": list(order), "means": means, "holds": holds}


def _safe(method: str) -> str:
    return method.replace("[", "_").replace("]", "").replace(",", "-")


def _render_figure(reports, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.5))
        names = [r.method for r in reports]
        for ax, m in zip(axes, METRICS):
            ax.bar(range(len(reports)), [r.mean(m) for r in reports],
                   yerr=[r.std(m) for r in reports], capsize=3)
            ax.set_xticks(range(len(reports)))
            ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
            ax.set_title(m)
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
    except Exception:  # rendering never fails a run
        logger.warning("figure rendering failed", exc_info=True)


def run_ablation(cfg: ExperimentConfig, data: DatasetSplit | None = None) -> dict:
    """Feature-AE runs over layer selections; one row per selection."""
    if [ModelKind(k) for k in cfg.model_kinds] != [ModelKind.FEATURE_AE]:
        raise ConfigError("the layer ablation runs the feature_ae kind only")
    result = run_experiment(cfg, data)
    rows = []
    for sel in sorted(cfg.layer_selections, key=lambda s: (len(s), s)):
        method = _method_name(ModelKind.FEATURE_AE, sel, cfg)
        rep = result["reports"].get(method)
        if rep is None:
            continue
        rows.append({"selection": LayerSelection(sel).name, "method": method,
                     "geometry": rep.metadata["geometry"],
                     **{m: rep.summary()[m] for m in METRICS}})
    ranking = {m: [r["selection"] for r in sorted(rows, key=lambda r: -r[m]["mean"])] for m in METRICS}
    per_seed_ranking = {}
    for m in METRICS:
        per_seed_ranking[m] = {}
        for i, seed in enumerate(cfg.seeds):
            vals = []
            for r in rows:
                rep = result["reports"][r["method"]]
                if seed in rep.seeds:
                    vals.append((rep.per_seed[rep.seeds.index(seed)][m], r["selection"]))
            per_seed_ranking[m][str(seed)] = [s for _, s in sorted(vals, key=lambda v: -v[0])]
    ablation = {"config_hash": cfg.hash, "rows": rows, "ranking": ranking,
                "per_seed_ranking": per_seed_ranking}
    Path(cfg.output_dir, "ablation.json").write_text(json.dumps(ablation, sort_keys=True, indent=2))
    result["ablation"] = ablation
    return result


def report(directory) -> dict:
    """Rebuild reports, tables and figures from finished cells in ``directory``."""
    directory = Path(directory)
    cfg = load_config(directory / "config.json", output_dir=str(directory))
    records = []
    for p in sorted((directory / "cells").glob("*/seed*/metrics.json")):
        r = json.loads(p.read_text())
        records.append(r)
    for p in sorted((directory / "cells").glob("*/seed*/error.json")):
        if not (p.parent / "metrics.json").exists():
            records.append(json.loads(p.read_text()))
    extra = {}
    if cfg.constant_baseline:
        rep = directory / "reports" / f"{CONSTANT_BASELINE}.json"
        if rep.exists():
            extra[CONSTANT_BASELINE] = EvalReport.from_dict(json.loads(rep.read_text())).per_seed[0]
    return _finalize(cfg, records, extra)


def verify(directory, rerun: int = 0) -> tuple[bool, list[str]]:
    """Check that every artifact carries the hash of ``config.json``.

    With ``rerun > 0`` the first ``rerun`` finished cells are retrained from
    scratch and their metrics and parameters compared bit for bit.
    """
    directory = Path(directory)
    problems: list[str] = []
    cfg = load_config(directory / "config.json", output_dir=str(directory))
    chash = cfg.hash

    def check(path: Path, found):
        if found != chash:
            problems.append(f"{path}: config hash {found!r} != {chash}")

    for name in ("summary.json", "ablation.json"):
        p = directory / name
        if p.exists():
            check(p, json.loads(p.read_text()).get("config_hash"))
    for p in sorted((directory / "reports").glob("*.json")):
        check(p, json.loads(p.read_text()).get("config_hash"))
    cells = sorted((directory / "cells").glob("*/seed*/metrics.json"))
    for p in cells:
        rec = json.loads(p.read_text())
        check(p, rec.get("config_hash"))
        if f"seed{rec.get('seed')}" != p.parent.name:
            problems.append(f"{p}: seed {rec.get('seed')} does not match its directory")
        ckpt = p.parent / "model.ckpt"
        if ckpt.exists():
            _, meta = load_checkpoint(ckpt)
            check(ckpt, meta.get("config_hash"))
            if meta.get("seed") != rec.get("seed"):
                problems.append(f"{ckpt}: seed mismatch")
        else:
            problems.append(f"{p.parent}: missing checkpoint")
    for name in ("table.csv", "figure_data.csv"):
        p = directory / name
        if p.exists():
            rows = p.read_text().splitlines()[1:]
            for row in rows:
                if not row.endswith(chash):
                    problems.append(f"{p}: row without config hash: {row[:40]}")

    if rerun > 0 and cells:
        data = load_data(cfg)
        for p in cells[:rerun]:
            rec = json.loads(p.read_text())
            kind = ModelKind(rec["kind"])
            est = make_estimator(cfg, kind, rec["selection"], rec["seed"])
            est.fit(data)
            metrics = evaluate_run(est, data.test)
            if metrics != rec["metrics"]:
                problems.append(f"{p}: rerun metrics differ: {metrics} vs {rec['metrics']}")
            stored, _ = load_checkpoint(p.parent / "model.ckpt")
            for (k, a), b in zip(stored.state_dict().items(), est.model_.state_dict().values()):
                if not torch.equal(a, b):
                    problems.append(f"{p}: rerun parameter {k} differs")
                    break
    return not problems, problems
