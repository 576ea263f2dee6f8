"""scikit-learn style wrappers around the detector and the post-hoc decoder."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .decode import DecodeConfig, decode
from .metrics import EvalConfig, evaluate
from .model import CertainNetModel, HeadOutputs, ModelConfig
from .synthdata import Scene
from .training import TrainConfig, train


def check_images(X):
    """Validate a grayscale image batch and return it as float32 ``(N, H, W)``."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (N, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_annotations(y, n_images, n_classes=None, image_shape=None):
    """Validate per-image ``(boxes, classes)`` annotations.

    Boxes are ``(x, y, w, h)`` with positive size; if ``image_shape`` is
    given they must lie inside the image.
    """
    if len(y) != n_images:
        raise ValueError(f"{len(y)} annotations for {n_images} images")
    out = []
    for i, (boxes, classes) in enumerate(y):
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        if len(boxes) != len(classes):
            raise ValueError(f"image {i}: {len(boxes)} boxes but {len(classes)} classes")
        if len(boxes) and (boxes[:, 2:] <= 0).any():
            raise ValueError(f"image {i}: boxes must have positive width and height")
        if n_classes is not None and len(classes) and (
                classes.min() < 0 or classes.max() >= n_classes):
            raise ValueError(f"image {i}: class ids must lie in [0, {n_classes})")
        if image_shape is not None and len(boxes):
            h, w = image_shape
            if ((boxes[:, 0] < 0) | (boxes[:, 1] < 0) | (boxes[:, 0] + boxes[:, 2] > w)
                    | (boxes[:, 1] + boxes[:, 3] > h)).any():
                raise ValueError(f"image {i}: box outside the {w}x{h} image")
        out.append((boxes, classes))
    return out


class CertainNetDetector(BaseEstimator):
    """Uncertainty-aware anchor-free detector.

    ``fit`` trains on grayscale images with ``(boxes, classes)`` targets;
    ``predict`` returns, per image, a list of :class:`~certainnet.decode.Detection`
    carrying objectness, location, size and class uncertainties.

    Parameters
    ----------
    n_classes : int
    hyperspace_dim : int
        Dimensionality of each class's embedding space.
    ablation : str
        Feature-flag preset, ``"A0"`` (plain adapted DUQ) to ``"A6"`` (all
        stabilisation measures).
    epochs, batch_size, learning_rate :
        Training schedule; the remaining hyperparameters come from
        :meth:`TrainConfig.desk` unless overridden through ``train_options``.
    threshold, eta, boundary_scale :
        Decoding settings, see :class:`~certainnet.decode.DecodeConfig`.
    """

    def __init__(self, n_classes=3, hyperspace_dim=16, widths=(8, 16, 32, 32, 32),
                 ablation="A6", epochs=20, batch_size=16, learning_rate=2e-3,
                 train_options=None, threshold=0.1, eta=4.0, boundary_scale=1.0,
                 random_state=0):
        self.n_classes = n_classes
        self.hyperspace_dim = hyperspace_dim
        self.widths = widths
        self.ablation = ablation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.train_options = train_options
        self.threshold = threshold
        self.eta = eta
        self.boundary_scale = boundary_scale
        self.random_state = random_state

    def _train_config(self):
        opts = dict(self.train_options or {})
        opts.setdefault("epochs", self.epochs)
        opts.setdefault("batch_size", self.batch_size)
        opts.setdefault("learning_rate", self.learning_rate)
        opts.setdefault("hyperspace_dim", self.hyperspace_dim)
        opts.setdefault("widths", tuple(self.widths))
        opts.setdefault("freeze_epochs", min(3, max(0, opts["epochs"] - 1)))
        return TrainConfig.desk(**opts).with_ablation(self.ablation)

    def _decode_config(self):
        return DecodeConfig(threshold=self.threshold, eta=self.eta,
                            boundary_scale=self.boundary_scale)

    def fit(self, X, y):
        X = check_images(X)
        y = check_annotations(y, len(X), self.n_classes, X.shape[1:])
        scenes = [Scene(f"{i:06d}", i, img, boxes, classes)
                  for i, (img, (boxes, classes)) in enumerate(zip(X, y))]
        config = self._train_config()
        model_config = ModelConfig(n_classes=self.n_classes,
                                   hyperspace_dim=self.hyperspace_dim,
                                   widths=tuple(self.widths))
        self.model_, self.trace_ = train(scenes, config, seed=self.random_state,
                                         model_config=model_config)
        self.train_config_ = config
        return self

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained :class:`CertainNetModel` (e.g. a checkpoint)."""
        est = cls(n_classes=model.config.n_classes,
                  hyperspace_dim=model.config.hyperspace_dim,
                  widths=tuple(model.config.widths), **params)
        est.model_ = model
        return est

    def predict_heatmaps(self, X, batch_size=32):
        """Dense head outputs for a batch, as a list of single-image HeadOutputs."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = []
        for start in range(0, len(X), batch_size):
            batch = self.model_.forward(X[start : start + batch_size], keep_embeddings=False)
            out.extend(batch[i] for i in range(len(batch)))
        return out

    def predict(self, X, image_ids=None):
        heads = self.predict_heatmaps(X)
        config = self._decode_config()
        ids = image_ids if image_ids is not None else [f"{i:06d}" for i in range(len(heads))]
        return [decode(h, config, image_id) for h, image_id in zip(heads, ids)]

    def score(self, X, y, iou_threshold=0.5):
        """Mean per-class AP (percent) on ``(X, y)``."""
        X = check_images(X)
        y = check_annotations(y, len(X))
        ids = [f"{i:06d}" for i in range(len(X))]
        dets = dict(zip(ids, self.predict(X, ids)))
        report = evaluate(dets, dict(zip(ids, y)), EvalConfig(iou_threshold=iou_threshold))
        return report.ap


class UncertaintyDecoder(TransformerMixin, BaseEstimator):
    """Stateless post-hoc decoder: HeadOutputs in, uncertainty-annotated detections out.

    Applies to any detector that yields class heatmaps and a dims map.
    """

    def __init__(self, threshold=0.1, eta=4.0, boundary_scale=1.0, min_radius=1):
        self.threshold = threshold
        self.eta = eta
        self.boundary_scale = boundary_scale
        self.min_radius = min_radius

    def fit(self, X=None, y=None):
        self.config_ = DecodeConfig(threshold=self.threshold, eta=self.eta,
                                    boundary_scale=self.boundary_scale,
                                    min_radius=self.min_radius)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        if isinstance(X, HeadOutputs):
            X = [X[i] for i in range(len(X))] if X.batched else [X]
        return [decode(h, self.config_) for h in X]
