"""Volume loading, slice preprocessing and the synthetic phantom benchmark."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from skimage import exposure

from . import io as rawio
from .anomalies import SinkSpec, apply_sink, sample_sink_spec
from .exceptions import ContractError, FormatError, PlacementError, RangeError

__all__ = [
    "Volume",
    "SliceBatch",
    "DatasetSplit",
    "PhantomConfig",
    "load_volume",
    "equalize_volume",
    "preprocess",
    "make_phantom_volume",
    "make_phantom_dataset",
    "inject_sinks",
    "save_dataset",
    "load_dataset",
]

N_CENTER_SLICES = 80
OUT_SIZE = 128


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise FormatError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise FormatError(f"volume {self.id!r} contains non-finite voxels")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]


@dataclass
class SliceBatch:
    images: np.ndarray
    masks: np.ndarray | None = None
    labels: np.ndarray | None = None
    ids: list[tuple[str, int]] = field(default_factory=list)
    sinks: list[SinkSpec | None] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ContractError(f"images must be N x 1 x H x W, got {self.images.shape}")
        n = len(self.images)
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("images must lie in [0, 1]")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
            if self.masks.shape != (n, *self.images.shape[2:]):
                raise ContractError("masks shape does not match images")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.shape != (n,):
                raise ContractError("labels length does not match images")
            if self.masks is not None:
                has_anomaly = self.masks.reshape(n, -1).any(axis=1)
                if not np.array_equal(has_anomaly, self.labels.astype(bool)):
                    raise ContractError("label must be 1 exactly when the mask is nonempty")
        if self.ids and len(self.ids) != n:
            raise ContractError("ids length does not match images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def is_labeled(self) -> bool:
        return self.masks is not None and self.labels is not None

    def subset(self, index) -> "SliceBatch":
        index = np.asarray(index)
        return SliceBatch(
            self.images[index],
            None if self.masks is None else self.masks[index],
            None if self.labels is None else self.labels[index],
            [self.ids[i] for i in index] if self.ids else [],
            None if self.sinks is None else [self.sinks[i] for i in index],
        )

    def batches(self, batch_size: int) -> Iterator["SliceBatch"]:
        for start in range(0, len(self), batch_size):
            yield self.subset(np.arange(start, min(start + batch_size, len(self))))

    @classmethod
    def concat(cls, parts: Sequence["SliceBatch"]) -> "SliceBatch":
        parts = list(parts)
        labeled = all(p.masks is not None for p in parts)
        with_sinks = all(p.sinks is not None for p in parts)
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.masks for p in parts]) if labeled else None,
            np.concatenate([p.labels for p in parts]) if labeled else None,
            [i for p in parts for i in p.ids],
            [s for p in parts for s in p.sinks] if with_sinks else None,
        )


@dataclass
class DatasetSplit:
    train: SliceBatch
    val: SliceBatch
    test: SliceBatch
    seed: int = 0

    def __post_init__(self):
        if self.train.labels is not None and self.train.labels.any():
            raise ContractError("training split must contain normal slices only")


def load_volume(path, format: str | None = None, id: str | None = None) -> Volume:
    """Load a 3-D volume, slices first.

    NIfTI data are stored x, y, z; the last (axial) axis becomes the slice
    axis.  Raw archives are already slices-first.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        format = "nifti" if path.name.endswith((".nii", ".nii.gz")) else "raw_tensor"
    vid = id or path.name.split(".")[0]
    if format == "nifti":
        data, spacing = rawio.read_nifti(path)
        if data.ndim == 4 and data.shape[-1] == 1:
            data = data[..., 0]
        if data.ndim != 3:
            raise FormatError(f"{path}: expected 3-D data, got shape {data.shape}")
        voxels = np.moveaxis(data, -1, 0)
        spacing = (spacing[2], spacing[0], spacing[1])
    elif format == "raw_tensor":
        voxels = rawio.read_raw(path)
        if voxels.ndim != 3:
            raise FormatError(f"{path}: expected 3-D data, got shape {voxels.shape}")
        spacing = tuple(rawio.read_metadata(path).get("spacing", (1.0, 1.0, 1.0)))
    else:
        raise ValueError(f"unknown volume format {format!r}")
    return Volume(voxels, spacing, vid)


def equalize_volume(voxels: np.ndarray, nbins: int = 256) -> np.ndarray:
    """Histogram-equalize nonzero voxels into (0, 1]; zeros stay zero."""
    v = np.asarray(voxels, dtype=np.float64)
    fg = v != 0
    if not fg.any():
        return np.zeros_like(v)
    out = exposure.equalize_hist(v, nbins=nbins, mask=fg)
    out[~fg] = 0.0
    return out


def center_slice_range(n_slices: int, n_center: int = N_CENTER_SLICES) -> range:
    if n_slices < n_center:
        raise RangeError(f"volume has {n_slices} slices, need at least {n_center}")
    start = (n_slices - n_center) // 2
    return range(start, start + n_center)


def resize_slices(slices: np.ndarray, out_size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(slices, dtype=np.float32))[:, None]
    if t.shape[-2:] != (out_size, out_size):
        t = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return t[:, 0].numpy()


def preprocess(volume: Volume, n_center_slices: int = N_CENTER_SLICES, out_size: int = OUT_SIZE) -> SliceBatch:
    """Equalize the whole volume, keep the central slices, resize to out_size^2."""
    idx = center_slice_range(volume.n_slices, n_center_slices)
    eq = equalize_volume(volume.voxels)
    slices = resize_slices(eq[idx.start:idx.stop], out_size)
    images = np.clip(slices, 0.0, 1.0)
    return SliceBatch(images, ids=[(volume.id, i) for i in idx])


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomConfig:
    """Versioned parameters of the synthetic brain-like phantom."""

    version: int = 1
    shape: tuple[int, int, int] = (96, 144, 144)
    semi_axes: tuple[float, float, float] = (58.0, 60.0, 50.0)
    semi_axes_jitter: float = 0.06
    center_jitter: float = 3.0
    warp_amplitude: float = 4.0
    warp_smoothness: float = 12.0
    tissue_level: float = 0.55
    rim_level: float = 0.8
    rim_width: float = 5.0
    ventricle_level: float = 0.2
    texture_sigma: float = 1.5
    texture_amplitude: float = 0.12
    fold_period: float = 9.0
    fold_amplitude: float = 0.08
    split_fractions: tuple[float, float, float] = (0.80, 0.02, 0.18)

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _smooth_field(rng, shape, sigma: float, amplitude: float, factor: int = 4) -> np.ndarray:
    """Gaussian random field with standard deviation ``amplitude``, drawn on a
    grid ``factor`` times coarser and upsampled linearly."""
    coarse = tuple(-(-n // factor) + 1 for n in shape)
    f = ndimage.gaussian_filter(rng.standard_normal(coarse).astype(np.float32), sigma / factor)
    f = ndimage.zoom(f, [n / c for n, c in zip(shape, coarse)], order=1, mode="nearest")
    f = f[: shape[0], : shape[1], : shape[2]]
    return f * (amplitude / (f.std() + 1e-8))


def make_phantom_volume(seed: int, index: int, cfg: PhantomConfig = PhantomConfig()) -> Volume:
    """One brain-like phantom: warped ellipsoid with rim, ventricles and texture."""
    rng = _rng(seed, index, 0x5EED)
    d, h, w = cfg.shape
    axes = np.array(cfg.semi_axes) * (1 + rng.uniform(-1, 1, 3) * cfg.semi_axes_jitter)
    center = np.array([d, h, w]) / 2 + rng.uniform(-1, 1, 3) * cfg.center_jitter
    zz, yy, xx = np.indices(cfg.shape, dtype=np.float32)

    # smooth random warp of the sampling grid
    warps = [_smooth_field(rng, cfg.shape, cfg.warp_smoothness, cfg.warp_amplitude) for _ in range(3)]
    z = (zz + warps[0] - center[0]) / axes[0]
    y = (yy + warps[1] - center[1]) / axes[1]
    x = (xx + warps[2] - center[2]) / axes[2]
    r = np.sqrt(z * z + y * y + x * x)
    brain = r < 1.0

    depth = (1.0 - r) * axes.mean()  # approx. distance from the surface in voxels
    vol = np.full(cfg.shape, cfg.tissue_level, dtype=np.float32)
    rim = np.clip(1.0 - depth / cfg.rim_width, 0.0, 1.0)
    vol += (cfg.rim_level - cfg.tissue_level) * rim

    # folds: radial sinusoid modulated by a random phase field
    phase = _smooth_field(rng, cfg.shape, 6.0, 2.0)
    vol += cfg.fold_amplitude * np.sin(2 * np.pi * depth / cfg.fold_period + phase)

    # paired ventricles
    offset = rng.uniform(0.12, 0.2)
    for side in (-1, 1):
        vr = np.sqrt((z / 0.45) ** 2 + (y / 0.35) ** 2 + ((x - side * offset) / 0.12) ** 2)
        vent = np.clip((1.0 - vr) * 4.0, 0.0, 1.0)
        vol += (cfg.ventricle_level - vol) * vent

    texture = ndimage.gaussian_filter(rng.standard_normal(cfg.shape).astype(np.float32),
                                      cfg.texture_sigma)
    texture *= cfg.texture_amplitude / (texture.std() + 1e-8)
    vol += texture

    vol = np.clip(vol, 0.02, 1.0)
    vol[~brain] = 0.0
    return Volume(vol, (1.0, 1.0, 1.0), f"phantom-{seed}-{index:04d}")


def split_counts(n_volumes: int, fractions=(0.80, 0.02, 0.18)) -> tuple[int, int, int]:
    if n_volumes < 3:
        raise RangeError(f"need at least 3 volumes, got {n_volumes}")
    n_val = max(1, int(round(fractions[1] * n_volumes)))
    n_test = max(1, int(round(fractions[2] * n_volumes)))
    n_train = n_volumes - n_val - n_test
    if n_train < 1:
        n_train, n_test = 1, n_volumes - 1 - n_val
    return n_train, n_val, n_test


def inject_sinks(batch: SliceBatch, seed: int, fraction: float = 0.5) -> SliceBatch:
    """Deform ``round(fraction * N)`` slices with one sink each; returns a labeled copy."""
    n = len(batch)
    images = batch.images.copy()
    masks = np.zeros((n, *images.shape[2:]), dtype=bool)
    labels = np.zeros(n, dtype=np.int8)
    sinks: list[SinkSpec | None] = [None] * n
    rng = _rng(seed, 0xA707)
    n_anomalous = int(round(fraction * n))
    order = rng.permutation(n)
    placed = 0
    for i in order:
        if placed == n_anomalous:
            break
        img = images[i, 0]
        try:
            spec = sample_sink_spec(img, img > 0, int(rng.integers(2**31)))
        except PlacementError:
            continue
        images[i, 0], masks[i] = apply_sink(img, spec)
        labels[i] = 1
        sinks[i] = spec
        placed += 1
    return SliceBatch(images, masks, labels, list(batch.ids), sinks)


def make_phantom_dataset(n_volumes: int, seed: int, cfg: PhantomConfig = PhantomConfig(),
                         n_center_slices: int = N_CENTER_SLICES, out_size: int = OUT_SIZE) -> DatasetSplit:
    """Generate, preprocess and split phantoms; half of val/test slices get a sink."""
    n_train, n_val, n_test = split_counts(n_volumes, cfg.split_fractions)
    slices = [preprocess(make_phantom_volume(seed, i, cfg), n_center_slices, out_size)
              for i in range(n_volumes)]
    train = SliceBatch.concat(slices[:n_train])
    train = SliceBatch(train.images, np.zeros((len(train), out_size, out_size), bool),
                       np.zeros(len(train), np.int8), train.ids)
    val = inject_sinks(SliceBatch.concat(slices[n_train:n_train + n_val]), _mix(seed, 1))
    test = inject_sinks(SliceBatch.concat(slices[n_train + n_val:]), _mix(seed, 2))
    return DatasetSplit(train, val, test, seed)


def _mix(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# ------------------------------------------------------------- persistence


def save_dataset(split: DatasetSplit, directory) -> Path:
    """Persist a split as raw tensor archives plus a JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"seed": split.seed, "splits": {}}
    for name in ("train", "val", "test"):
        part: SliceBatch = getattr(split, name)
        rawio.write_raw(directory / f"{name}_images.sfr", part.images)
        entry = {"ids": [list(i) for i in part.ids]}
        if part.masks is not None:
            rawio.write_raw(directory / f"{name}_masks.sfr", part.masks)
            rawio.write_raw(directory / f"{name}_labels.sfr", part.labels)
        if part.sinks is not None:
            entry["sinks"] = [None if s is None else json.loads(s.to_json()) for s in part.sinks]
        index["splits"][name] = entry
    (directory / "dataset.json").write_text(json.dumps(index, sort_keys=True))
    return directory


def load_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    index = json.loads((directory / "dataset.json").read_text())
    parts = {}
    for name, entry in index["splits"].items():
        images = rawio.read_raw(directory / f"{name}_images.sfr")
        masks = labels = None
        if (directory / f"{name}_masks.sfr").exists():
            masks = rawio.read_raw(directory / f"{name}_masks.sfr")
            labels = rawio.read_raw(directory / f"{name}_labels.sfr")
        sinks = None
        if "sinks" in entry:
            sinks = [None if s is None else SinkSpec.from_json(json.dumps(s)) for s in entry["sinks"]]
        parts[name] = SliceBatch(images, masks, labels, [tuple(i) for i in entry["ids"]], sinks)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], index["seed"])
