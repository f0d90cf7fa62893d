"""scikit-learn style estimators wrapping the pipeline.

``SlicePreprocessor`` turns volumes into 128x128 slices, ``FeatureExtractor``
lifts slices into the fused backbone feature space, and
``StructuralFeatureAE`` is the anomaly detector: ``fit`` on normal slices,
then ``anomaly_maps`` / ``score_samples`` / ``predict`` on new ones.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import DatasetSplit, SliceBatch, Volume, load_volume, preprocess
from .features import Extractor, output_geometry
from .models import ModelKind, build_baseline, reconstruct
from .scoring import pixel_score_maps, reduce_scores, threshold_map
from .ssim import SsimConfig
from .training import TrainConfig, train, training_curve
from .validation import check_images, check_normal_labels

__all__ = ["SlicePreprocessor", "FeatureExtractor", "StructuralFeatureAE"]


class SlicePreprocessor(TransformerMixin, BaseEstimator):
    """Volumes (or paths) -> stacked, equalized, resized central slices."""

    def __init__(self, n_center_slices: int = 80, out_size: int = 128):
        self.n_center_slices = n_center_slices
        self.out_size = out_size

    def fit(self, X=None, y=None):
        self.n_slices_out_ = self.n_center_slices
        return self

    def transform(self, X) -> np.ndarray:
        volumes = [v if isinstance(v, Volume) else load_volume(v) for v in X]
        return np.concatenate([preprocess(v, self.n_center_slices, self.out_size).images for v in volumes])


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Frozen ResNet18 feature map: (N, 1, H, W) images -> (N, C, h, w) features."""

    def __init__(self, layers=(0, 1, 2), pretrained: bool = True, weights_path=None,
                 random_state: int = 0, batch_size: int = 64):
        self.layers = layers
        self.pretrained = pretrained
        self.weights_path = weights_path
        self.random_state = random_state
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        self.extractor_ = Extractor(self.layers, self.pretrained, self.weights_path,
                                    self.random_state, batch_size=self.batch_size)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "extractor_")
        images = check_images(X)
        return self.extractor_(torch.from_numpy(images)).features.numpy()

    def output_geometry(self, input_size: int = 128) -> tuple[int, int, int]:
        return output_geometry(self.layers, input_size)


class StructuralFeatureAE(BaseEstimator):
    """Reconstruction-based anomaly localizer.

    With the default ``kind="feature_ae"`` slices are mapped through the
    frozen backbone, an autoencoder is trained with ``1 - MSSIM`` on the
    features, and pixel scores are ``(1 - SSIM) / 2`` between extracted and
    reconstructed features, upsampled to the image size.  The other kinds
    give the image-space and 1x1-convolution baselines.

    ``batch_size=None`` and ``loss=None`` select the per-kind defaults
    (64 / 4 for the DFR-style kinds; MSE for ``image_ae_mse`` and
    ``dfr_style``).  ``score=None`` selects residual scoring for
    MSE-trained kinds and SSIM scoring otherwise.
    """

    def __init__(self, kind: str = "feature_ae", layers=(0, 1, 2), pretrained: bool = True,
                 weights_path=None, backbone_seed: int = 0, lr: float = 2e-4,
                 batch_size: int | None = None, steps: int = 10_000, loss: str | None = None,
                 val_interval: int = 500, calibration_steps: int = 100,
                 window_size: int = 11, window: str = "gaussian", sigma: float = 1.5,
                 k1: float = 0.01, k2: float = 0.03, reducer: str = "mean",
                 score: str | None = None, target_size: int | None = None, cache_features: bool = False,
                 random_state: int = 0, log_path=None):
        self.kind = kind
        self.layers = layers
        self.pretrained = pretrained
        self.weights_path = weights_path
        self.backbone_seed = backbone_seed
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.loss = loss
        self.val_interval = val_interval
        self.calibration_steps = calibration_steps
        self.window_size = window_size
        self.window = window
        self.sigma = sigma
        self.k1 = k1
        self.k2 = k2
        self.reducer = reducer
        self.score = score
        self.target_size = target_size
        self.cache_features = cache_features
        self.random_state = random_state
        self.log_path = log_path

    # -- configuration helpers

    @property
    def kind_(self) -> ModelKind:
        return ModelKind(self.kind)

    def ssim_config(self, dynamic_range: float = 1.0) -> SsimConfig:
        return SsimConfig(self.window_size, self.window, self.sigma, self.k1, self.k2, dynamic_range)

    def train_config(self) -> TrainConfig:
        kind = self.kind_
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size or kind.default_batch_size,
            steps=self.steps,
            loss=self.loss or kind.default_loss,
            seed=self.random_state,
            val_interval=self.val_interval,
            calibration_steps=self.calibration_steps,
            cache_features=self.cache_features,
            log_path=None if self.log_path is None else str(self.log_path),
        )

    @property
    def score_type(self) -> str:
        if self.score is not None:
            return self.score
        return "residual" if (self.loss or self.kind_.default_loss) == "mse" else "ssim"

    # -- fitting

    def _make_extractor(self):
        if not self.kind_.feature_space:
            return None
        return Extractor(self.layers, self.pretrained, self.weights_path, self.backbone_seed)

    def fit(self, X, y=None, X_val=None):
        """Train on normal slices.

        ``X`` is a SliceBatch, a DatasetSplit (its train/val parts are used)
        or an image array; ``y`` optional slice labels, all must be 0.
        """
        if isinstance(X, DatasetSplit):
            X_val = X.val if X_val is None else X_val
            X = X.train
        check_normal_labels(X, y)
        images = check_images(X)
        train_batch = SliceBatch(images)
        val_batch = None
        if X_val is not None:
            val_batch = X_val if isinstance(X_val, SliceBatch) else SliceBatch(check_images(X_val))

        self.extractor_ = self._make_extractor()
        size = images.shape[-1]
        if self.extractor_ is not None:
            self.geometry_ = self.extractor_.geometry(size)
        else:
            self.geometry_ = (1, size, size)
        self.model_ = build_baseline(self.kind_, self.geometry_, seed=self.random_state)
        data = DatasetSplit(train_batch, val_batch or SliceBatch(images[:0]), SliceBatch(images[:0]))
        self.train_state_ = train(self.model_, data, self.extractor_, self.train_config(),
                                  self.ssim_config())
        self.dynamic_range_ = self.train_state_.dynamic_range
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    # -- inference

    def _inputs(self, images: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(images)
        return self.extractor_(x).features if self.extractor_ is not None else x

    def reconstruct(self, X) -> tuple[torch.Tensor, torch.Tensor]:
        """(model input, reconstruction) for images ``X``."""
        check_is_fitted(self, "model_")
        inp = self._inputs(check_images(X))
        return inp, reconstruct(self.model_, inp)

    def anomaly_maps(self, X, chunk: int = 64) -> np.ndarray:
        """Pixel scores in [0, 1], shape (N, S, S).

        ``S`` is ``target_size``, or the input image size when unset.
        """
        check_is_fitted(self, "model_")
        images = check_images(X)
        cfg = self.ssim_config(self.dynamic_range_)
        size = self.target_size or images.shape[-1]
        out = []
        for i in range(0, len(images), chunk):
            inp = self._inputs(images[i:i + chunk])
            rec = reconstruct(self.model_, inp)
            out.append(pixel_score_maps(inp, rec, cfg, size, self.score_type))
        return np.concatenate(out)

    transform = anomaly_maps

    def score_samples(self, X) -> np.ndarray:
        """Image-level anomaly scores (higher is more anomalous)."""
        return reduce_scores(self.anomaly_maps(X), self.reducer)

    decision_function = score_samples

    def predict(self, X, threshold: float = 0.75) -> np.ndarray:
        """Binary localization masks, ``pixel score >= threshold``."""
        return threshold_map(self.anomaly_maps(X), threshold)

    def training_curve(self):
        check_is_fitted(self, "train_state_")
        return training_curve(self.train_state_)
