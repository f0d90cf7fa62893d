"""Anomaly localization with structural similarity in pretrained feature space."""

from .data import DatasetSplit, SliceBatch, Volume, load_volume, make_phantom_dataset, preprocess
from .estimator import FeatureExtractor, SlicePreprocessor, StructuralFeatureAE
from .evaluation import EvalReport, evaluate_run
from .exceptions import (
    BackboneInitError,
    ConfigError,
    ContractError,
    DataContractError,
    FormatError,
    PlacementError,
    RangeError,
    SfaeError,
    SpecError,
)
from .features import LayerSelection, output_geometry
from .metrics import dice_at_fpr, image_auroc, pixel_ap, welch_t_test
from .models import FeatureAeSpec, ModelKind
from .ssim import SsimConfig, mssim, ssim_map

__version__ = "0.1.0"

__all__ = [
    "BackboneInitError",
    "ConfigError",
    "ContractError",
    "DataContractError",
    "DatasetSplit",
    "EvalReport",
    "FeatureAeSpec",
    "FeatureExtractor",
    "FormatError",
    "LayerSelection",
    "ModelKind",
    "PlacementError",
    "RangeError",
    "SfaeError",
    "SlicePreprocessor",
    "SliceBatch",
    "SpecError",
    "SsimConfig",
    "StructuralFeatureAE",
    "Volume",
    "dice_at_fpr",
    "evaluate_run",
    "image_auroc",
    "load_volume",
    "make_phantom_dataset",
    "mssim",
    "output_geometry",
    "pixel_ap",
    "preprocess",
    "ssim_map",
    "welch_t_test",
]
