"""Reconstruction models: the spatial feature autoencoder and baselines."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import torch
import torch.nn as nn

from .exceptions import ContractError, FormatError, SpecError

__all__ = [
    "ModelKind",
    "FeatureAeSpec",
    "FeatureAutoencoder",
    "DfrAutoencoder",
    "build_feature_ae",
    "build_baseline",
    "reconstruct",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class ModelKind(str, Enum):
    FEATURE_AE = "feature_ae"
    IMAGE_AE_MSE = "image_ae_mse"
    IMAGE_AE_SSIM = "image_ae_ssim"
    DFR_STYLE = "dfr_style"
    DFR_STYLE_SSIM = "dfr_style_ssim"

    @property
    def feature_space(self) -> bool:
        return self in (ModelKind.FEATURE_AE, ModelKind.DFR_STYLE, ModelKind.DFR_STYLE_SSIM)

    @property
    def default_loss(self) -> str:
        if self in (ModelKind.IMAGE_AE_MSE, ModelKind.DFR_STYLE):
            return "mse"
        return "one_minus_mssim"

    @property
    def default_batch_size(self) -> int:
        return 4 if self in (ModelKind.DFR_STYLE, ModelKind.DFR_STYLE_SSIM) else 64


@dataclass(frozen=True)
class FeatureAeSpec:
    in_channels: int
    encoder_channels: tuple[int, ...] = (100, 150, 200, 300)
    kernel: int = 5
    stride: int = 2
    negative_slope: float = 0.01
    dropout_p: float = 0.1
    bottleneck_kernel: int = 5
    bottleneck_channels: int = 300
    decoder_channels: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.decoder_channels is None:
            # mirror of the encoder's inputs in reverse; last stage keeps the
            # first encoder width before the 1x1 output projection
            enc = self.encoder_channels
            dec = tuple(reversed(enc[:-1])) + (enc[0],)
            object.__setattr__(self, "decoder_channels", dec)
        else:
            object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        ints = (self.in_channels, self.kernel, self.stride, self.bottleneck_kernel,
                self.bottleneck_channels, *self.encoder_channels, *self.decoder_channels)
        if any(int(v) <= 0 for v in ints):
            raise SpecError("all channel counts and kernel sizes must be positive")
        if len(self.decoder_channels) != len(self.encoder_channels):
            raise SpecError("decoder must have as many stages as the encoder")
        if self.kernel % 2 == 0 or self.bottleneck_kernel % 2 == 0:
            raise SpecError("kernels must be odd for same padding")
        if not 0 <= self.dropout_p < 1 or self.negative_slope < 0:
            raise SpecError("invalid dropout probability or negative slope")

    @property
    def downsampling(self) -> int:
        return self.stride ** len(self.encoder_channels)

    def check_input_size(self, size: int) -> None:
        if size % self.downsampling:
            raise SpecError(f"spatial size {size} not divisible by {self.downsampling}")

    def to_dict(self) -> dict:
        return asdict(self)


def _block(conv: nn.Module, channels: int, spec: FeatureAeSpec) -> nn.Sequential:
    return nn.Sequential(
        conv,
        nn.BatchNorm2d(channels),
        nn.LeakyReLU(spec.negative_slope),
        nn.Dropout(spec.dropout_p),
    )


class FeatureAutoencoder(nn.Module):
    """Fully convolutional AE: 4 strided 5x5 encoder stages, 5x5 bottleneck
    convolution, 4 transpose-convolution decoder stages, 1x1 output conv."""

    def __init__(self, spec: FeatureAeSpec):
        super().__init__()
        self.spec = spec
        k, s, pad = spec.kernel, spec.stride, spec.kernel // 2
        stages = []
        c_in = spec.in_channels
        for c_out in spec.encoder_channels:
            conv = nn.Conv2d(c_in, c_out, k, stride=s, padding=pad, bias=False)
            stages.append(_block(conv, c_out, spec))
            c_in = c_out
        bk = spec.bottleneck_kernel
        stages.append(nn.Conv2d(c_in, spec.bottleneck_channels, bk, stride=1, padding=bk // 2, bias=False))
        self.encoder = nn.Sequential(*stages)

        stages = []
        c_in = spec.bottleneck_channels
        for c_out in spec.decoder_channels:
            # output_padding = stride - 1 makes each stage exactly undo the halving
            conv = nn.ConvTranspose2d(c_in, c_out, k, stride=s, padding=pad,
                                      output_padding=s - 1, bias=False)
            stages.append(_block(conv, c_out, spec))
            c_in = c_out
        self.decoder = nn.Sequential(*stages)
        self.head = nn.Conv2d(c_in, spec.in_channels, 1)

    def encoder_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for layer in self.encoder:
            x = layer(x)
            outs.append(x)
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ContractError(f"model expects {self.spec.in_channels} channels, got {x.shape[1]}")
        self.spec.check_input_size(x.shape[-1])
        self.spec.check_input_size(x.shape[-2])
        return self.head(self.decoder(self.encoder(x)))


class DfrAutoencoder(nn.Module):
    """1x1-convolution autoencoder with no spatial down- or upsampling."""

    def __init__(self, in_channels: int, hidden=(128, 64), latent: int | None = None,
                 negative_slope: float = 0.01):
        super().__init__()
        latent = latent or max(1, in_channels // 2)
        widths = [*hidden, latent, *reversed(hidden)]
        self.in_channels = in_channels
        self.widths = tuple(widths)
        layers = []
        c_in = in_channels
        for c_out in widths:
            layers += [nn.Conv2d(c_in, c_out, 1), nn.BatchNorm2d(c_out), nn.LeakyReLU(negative_slope)]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, in_channels, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ContractError(f"model expects {self.in_channels} channels, got {x.shape[1]}")
        return self.net(x)


def _seeded(seed: int, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_feature_ae(spec: FeatureAeSpec, seed: int = 0, input_size: int | None = None) -> FeatureAutoencoder:
    if input_size is not None:
        spec.check_input_size(input_size)
    return _seeded(seed, lambda: FeatureAutoencoder(spec))


def build_baseline(kind, geometry: tuple[int, int, int], seed: int = 0) -> nn.Module:
    """Build any model kind for an input geometry (C, H, W).

    Image-space kinds expect a single-channel geometry; they reuse the
    feature AE topology with ``in_channels=1``.
    """
    try:
        kind = ModelKind(kind)
    except ValueError as exc:
        raise SpecError(f"unknown model kind {kind!r}") from exc
    c, h, w = geometry
    if kind == ModelKind.FEATURE_AE or kind in (ModelKind.IMAGE_AE_MSE, ModelKind.IMAGE_AE_SSIM):
        if not kind.feature_space and c != 1:
            raise SpecError(f"{kind.value} operates on single-channel images, got C={c}")
        spec = FeatureAeSpec(in_channels=c)
        spec.check_input_size(h)
        spec.check_input_size(w)
        model = build_feature_ae(spec, seed)
    else:
        model = _seeded(seed, lambda: DfrAutoencoder(c))
    model.kind = kind.value
    return model


def model_geometry(model: nn.Module) -> int:
    if isinstance(model, FeatureAutoencoder):
        return model.spec.in_channels
    return model.in_channels


@torch.no_grad()
def reconstruct(model: nn.Module, inputs, batch_size: int = 64) -> torch.Tensor:
    """Inference-mode reconstruction; ``inputs`` is a tensor or FeatureStack."""
    x = getattr(inputs, "features", inputs)
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.ndim != 4 or x.shape[1] != model_geometry(model):
        raise ContractError(f"input of shape {tuple(x.shape)} does not match the model")
    was_training = model.training
    model.eval()
    try:
        outs = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(outs) if outs else x.clone()


def save_checkpoint(path, model: nn.Module, kind, geometry, seed: int, extra: dict | None = None) -> Path:
    """Write a versioned zip archive: ``meta.json`` plus ``state.pt``."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": ModelKind(kind).value,
        "geometry": list(geometry),
        "seed": int(seed),
    }
    if isinstance(model, FeatureAutoencoder):
        meta["spec"] = model.spec.to_dict()
    meta.update(extra or {})
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_zipinfo("meta.json"), json.dumps(meta, sort_keys=True, indent=2))
        zf.writestr(_zipinfo("state.pt"), buf.getvalue())
    return path


def _zipinfo(name: str) -> zipfile.ZipInfo:
    # fixed timestamp keeps archives byte-reproducible
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            state = torch.load(io.BytesIO(zf.read("state.pt")), map_location="cpu", weights_only=True)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path} is not a model checkpoint") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
    kind = ModelKind(meta["kind"])
    geometry = tuple(meta["geometry"])
    if "spec" in meta:
        model = FeatureAutoencoder(FeatureAeSpec(**meta["spec"]))
    else:
        model = build_baseline(kind, geometry, meta["seed"])
    model.load_state_dict(state)
    model.eval()
    return model, meta
