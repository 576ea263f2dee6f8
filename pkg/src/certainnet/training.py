"""Stabilised training of the RBF objectness head.

Losses return ``(value, gradient)`` pairs with analytic gradients; the
training loop chains them through the kernel, the projection and the
backbone by hand.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import FEATURE_FLAGS, CertainNetModel, ModelConfig, sigmoid

log = logging.getLogger(__name__)

ABLATIONS = {
    "A0": (),
    "A1": ("use_reg_loss",),
    "A2": ("use_reg_loss", "balanced_update"),
    "A3": ("use_reg_loss", "balanced_update", "outlier_protection"),
    "A4": ("use_reg_loss", "balanced_update", "outlier_protection", "momentum_schedule"),
    "A5": ("use_reg_loss", "balanced_update", "outlier_protection", "momentum_schedule",
           "sigma_annealing"),
    "A6": FEATURE_FLAGS,
}

PAPER_GAMMA_SCHEDULE = ((0, 0.9), (5, 0.99), (20, 0.999), (60, 0.9999))

_BCE_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite during training."""


def ablation_flags(name):
    """Feature-flag dict for an ablation id ``A0`` .. ``A6``."""
    try:
        active = ABLATIONS[name]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}") from None
    return {flag: flag in active for flag in FEATURE_FLAGS}


# ---------------------------------------------------------------------------
# ground truth


def gaussian_radius(height, width, min_overlap=0.7):
    """CornerNet/CenterNet object radius (in grid cells) for a box size."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def box_center_cell(box, stride, grid_shape):
    x, y, w, h = box
    col = int(np.clip(math.floor((x + w / 2) / stride), 0, grid_shape[1] - 1))
    row = int(np.clip(math.floor((y + h / 2) / stride), 0, grid_shape[0] - 1))
    return row, col


def draw_gaussian(heatmap, row, col, radius):
    """Max-merge a 2-D Gaussian of the given integer radius into ``heatmap``."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    off = np.arange(-radius, radius + 1)
    g = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2 * sigma**2))
    g[radius, radius] = 1.0
    h, w = heatmap.shape
    top, bottom = min(row, radius), min(h - row, radius + 1)
    left, right = min(col, radius), min(w - col, radius + 1)
    patch = heatmap[row - top : row + bottom, col - left : col + right]
    np.maximum(patch, g[radius - top : radius + bottom, radius - left : radius + right], out=patch)
    return heatmap


@dataclass
class GroundTruthHeatmaps:
    """Per-class Gaussian targets, dims targets and the exact-centre mask.

    ``heatmaps`` is ``(n_classes, h, w)``; ``dims`` is ``(2, h, w)`` holding
    (w, h) in input pixels at centre cells and zero elsewhere.
    """

    heatmaps: np.ndarray
    dims: np.ndarray
    center_mask: np.ndarray


def splat_ground_truth(boxes, classes, grid_shape, stride, n_classes, min_overlap=0.7):
    """Render ground-truth boxes into class heatmaps on the output grid."""
    hm = np.zeros((n_classes,) + tuple(grid_shape))
    dims = np.zeros((2,) + tuple(grid_shape))
    mask = np.zeros(tuple(grid_shape), dtype=bool)
    for box, cls in zip(np.asarray(boxes, dtype=float).reshape(-1, 4), classes):
        w, h = box[2], box[3]
        if not (w > 0 and h > 0):
            raise ValueError(f"box {list(box)} has non-positive size")
        if not 0 <= cls < n_classes:
            raise ValueError(f"class {cls} out of range")
        row, col = box_center_cell(box, stride, grid_shape)
        radius = max(0, int(gaussian_radius(math.ceil(h / stride), math.ceil(w / stride),
                                            min_overlap)))
        draw_gaussian(hm[cls], row, col, radius)
        dims[:, row, col] = (w, h)
        mask[row, col] = True
    return GroundTruthHeatmaps(hm, dims, mask)


# ---------------------------------------------------------------------------
# losses


def _bce_from_scaled_distance(q, y, weights):
    """Weighted BCE written in terms of q = -log p, with d loss / d q.

    Working in q keeps the positive-cell gradient finite when the kernel
    score underflows.
    """
    qc = np.maximum(q, _BCE_EPS)
    neg = -np.log(-np.expm1(-qc))
    per_cell = weights * (y * q + (1.0 - y) * neg)
    with np.errstate(over="ignore"):
        dq = weights * (y - (1.0 - y) * (q >= _BCE_EPS) / np.expm1(qc))
    return per_cell, dq


def _loss_weights(y, pos_weight):
    return np.where(y >= 0.5, pos_weight, 1.0)


def detection_loss(scores, targets, pos_weight=10.0):
    """Mean weighted binary cross-entropy of kernel scores against targets.

    Cells with target >= 0.5 are weighted by ``pos_weight``. Returns the loss
    and its gradient w.r.t. ``scores``.
    """
    p = np.asarray(scores, dtype=float)
    y = np.asarray(targets, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if np.isnan(p).any() or np.isnan(y).any():
        raise ValueError("NaN in detection loss inputs")
    q = -np.log(p)
    per_cell, dq = _bce_from_scaled_distance(q, y, _loss_weights(y, pos_weight))
    n = p.size
    return per_cell.sum() / n, (dq / n) * (-1.0 / p)


def regularization_loss(embeddings, centroids, targets, lam=20.0):
    """Hyperspace regularisation: y^lam-weighted mean squared centroid distance.

    Parameters
    ----------
    embeddings : ndarray, shape (..., n_classes, D)
    centroids : ndarray, shape (n_classes, D)
    targets : ndarray, shape (..., n_classes)

    Returns the loss and its gradient w.r.t. ``embeddings`` (centroids are
    treated as constants). With no positive weight the loss is 0.
    """
    z = np.asarray(embeddings, dtype=float)
    diff = z - np.asarray(centroids, dtype=float)
    wgt = np.asarray(targets, dtype=float) ** lam
    total = wgt.sum()
    if total <= 0:
        return 0.0, np.zeros_like(z)
    sq = np.sum(diff**2, axis=-1)
    loss = float(np.sum(wgt * sq) / total)
    grad = 2.0 * wgt[..., None] * diff / total
    return loss, grad


def dims_loss(dims_pred, dims_targets, center_mask):
    """Mean L1 error of predicted (w, h) at centre cells.

    ``dims_pred`` and ``dims_targets`` are ``(..., 2)``; ``center_mask`` has
    the leading shape. Returns 0 with zero gradient when there are no centres.
    """
    pred = np.asarray(dims_pred, dtype=float)
    tgt = np.asarray(dims_targets, dtype=float)
    mask = np.asarray(center_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - tgt) * mask[..., None]
    loss = float(np.abs(diff).sum() / (2 * n))
    grad = np.sign(diff) / (2 * n)
    return loss, grad


# ---------------------------------------------------------------------------
# centroid dynamics


def normalized_distance(embeddings, centroid):
    d = np.asarray(embeddings).shape[-1]
    return np.sqrt(np.sum((np.asarray(embeddings) - centroid) ** 2, axis=-1) / d)


def update_centroids(centroid_set, embeddings, targets, lam=20.0, gamma=None,
                     sigma=None, outlier_protection=False, balanced=True):
    """One moving-average centroid step; returns a new :class:`CentroidSet`.

    Parameters
    ----------
    centroid_set : CentroidSet
    embeddings : ndarray, shape (..., n_classes, D)
    targets : ndarray, shape (..., n_classes)
        Ground-truth heatmap values for the same cells.
    balanced : bool
        If True, each class moves toward its y^lam-weighted mean embedding in
        this minibatch. If False, use count-normalised running sums (weights
        y, no exponent), which makes the step size depend on how many objects
        of the class the minibatch holds.
    outlier_protection : bool
        Ignore cells whose D-normalised distance to the centroid exceeds
        ``3 * sigma``.
    """
    new = centroid_set.copy()
    gamma = centroid_set.gamma if gamma is None else gamma
    sigma = centroid_set.sigma if sigma is None else sigma
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    n_cls, d = centroid_set.centroids.shape
    z = np.asarray(embeddings, dtype=float).reshape(-1, n_cls, d)
    y = np.asarray(targets, dtype=float).reshape(-1, n_cls)
    for c in range(n_cls):
        e = centroid_set.centroids[c].astype(float)
        wgt = y[:, c] ** lam if balanced else y[:, c].copy()
        if outlier_protection:
            wgt = wgt * (normalized_distance(z[:, c], e) <= 3.0 * sigma)
        total = wgt.sum()
        if balanced:
            if total <= 0:
                continue
            mean = (wgt @ z[:, c]) / total
            new.centroids[c] = gamma * e + (1.0 - gamma) * mean
        else:
            if new.counts is None:
                new.counts = np.ones(n_cls)
                new.sums = centroid_set.centroids.astype(float).copy()
            if total <= 0:
                continue
            new.counts[c] = gamma * new.counts[c] + (1.0 - gamma) * total
            new.sums[c] = gamma * new.sums[c] + (1.0 - gamma) * (wgt @ z[:, c])
            new.centroids[c] = new.sums[c] / new.counts[c]
    new.gamma = gamma
    new.sigma = sigma
    return new


def schedule_momentum(epoch, schedule=PAPER_GAMMA_SCHEDULE):
    """Momentum of the latest schedule entry whose epoch is <= ``epoch``."""
    if not schedule:
        raise ValueError("empty momentum schedule")
    gamma = schedule[0][1]
    for start, value in schedule:
        if start <= epoch:
            gamma = value
    return gamma


def anneal_length_scale(step, sigma0=0.25, decay=0.999, sigma_min=0.05):
    """``max(sigma_min, sigma0 * decay**step)``."""
    if not 0 < decay < 1:
        raise ValueError("decay must lie in (0, 1)")
    if sigma_min > sigma0:
        raise ValueError("sigma_min must not exceed sigma0")
    return max(sigma_min, sigma0 * decay**step)


# ---------------------------------------------------------------------------
# config / state


@dataclass
class TrainConfig:
    """Training hyperparameters and feature flags.

    Defaults follow the full-scale recipe (Adam, lr 1.25e-4 decayed x0.1,
    lambda 20, L_reg weight 1e-2, dims weight 0.2, momentum schedule
    0.9 -> 0.9999, sigma 0.25 -> 0.05 at 0.999/step). :meth:`desk` returns the
    shortened desk-scale variant used for the synthetic benchmark.
    """

    lam: float = 20.0
    gamma_schedule: tuple = PAPER_GAMMA_SCHEDULE
    sigma0: float = 0.25
    sigma_min: float = 0.05
    sigma_decay: float = 0.999
    reg_weight: float = 1e-2
    dims_weight: float = 0.2
    pos_weight: float = 10.0
    learning_rate: float = 1.25e-4
    lr_decay_epochs: tuple = (45, 60)
    lr_decay_factor: float = 0.1
    batch_size: int = 16
    epochs: int = 80
    freeze_epochs: int = 10
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    hyperspace_dim: int = 16
    widths: tuple = (8, 16, 32, 32, 32)
    use_reg_loss: bool = True
    balanced_update: bool = True
    outlier_protection: bool = True
    momentum_schedule: bool = True
    sigma_annealing: bool = True
    freeze_final: bool = True

    def __post_init__(self):
        self.gamma_schedule = tuple((int(e), float(g)) for e, g in self.gamma_schedule)
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.widths = tuple(int(w) for w in self.widths)
        if self.lam < 1:
            raise ValueError("lam must be >= 1")
        for name in ("reg_weight", "dims_weight", "pos_weight", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        starts = [e for e, _ in self.gamma_schedule]
        if not starts or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("gamma_schedule epochs must be non-empty and strictly increasing")
        if any(not 0 < g < 1 for _, g in self.gamma_schedule):
            raise ValueError("scheduled gamma values must lie in (0, 1)")
        if self.sigma_min > self.sigma0 or self.sigma_min <= 0:
            raise ValueError("need 0 < sigma_min <= sigma0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @classmethod
    def desk(cls, **overrides):
        """Desk-scale preset: 20 epochs with the epoch-indexed schedules shrunk
        to match, and a larger learning rate for the small backbone."""
        params = dict(
            epochs=20,
            freeze_epochs=3,
            learning_rate=2e-3,
            lr_decay_epochs=(13, 17),
            gamma_schedule=((0, 0.9), (2, 0.99), (6, 0.999), (17, 0.9999)),
        )
        params.update(overrides)
        return cls(**params)

    @property
    def flags(self):
        return {flag: bool(getattr(self, flag)) for flag in FEATURE_FLAGS}

    def with_ablation(self, name):
        params = self.to_dict()
        params.update(ablation_flags(name))
        return type(self).from_dict(params)

    def to_dict(self):
        out = asdict(self)
        out["gamma_schedule"] = [list(x) for x in self.gamma_schedule]
        for key in ("lr_decay_epochs", "adam_betas", "widths"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    sigma: float = 0.25
    gamma: float = 0.9
    seed: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)


@dataclass
class TrainingTrace:
    """Per-epoch training record plus the active feature flags."""

    flags: dict
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "step", "det_loss", "reg_loss", "dims_loss", "sigma", "gamma",
               "centroid_drift")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in self.COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------------------
# loop


def current_sigma(config, step):
    if config.sigma_annealing:
        return anneal_length_scale(step, config.sigma0, config.sigma_decay, config.sigma_min)
    return config.sigma_min


def current_gamma(config, epoch):
    if config.momentum_schedule:
        return schedule_momentum(epoch, config.gamma_schedule)
    return config.gamma_schedule[0][1]


def current_lr(config, epoch):
    n = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.learning_rate * config.lr_decay_factor**n


def prepare_targets(scenes, grid_shape, stride, n_classes):
    """Stack splatted targets for a list of scenes (channels-last)."""
    n = len(scenes)
    hm = np.zeros((n,) + tuple(grid_shape) + (n_classes,))
    dims = np.zeros((n,) + tuple(grid_shape) + (2,))
    mask = np.zeros((n,) + tuple(grid_shape), dtype=bool)
    for i, scene in enumerate(scenes):
        gt = splat_ground_truth(scene.boxes, scene.classes, grid_shape, stride, n_classes)
        hm[i] = np.moveaxis(gt.heatmaps, 0, -1)
        dims[i] = np.moveaxis(gt.dims, 0, -1)
        mask[i] = gt.center_mask
    return hm, dims, mask


def loss_and_grads(model, images, y, dims_t, mask, config, sigma, trainable=None):
    """Total loss and parameter gradients for one minibatch.

    Returns ``(parts, grads, cache)`` where ``parts`` holds the individual
    loss terms and ``cache`` the forward pass (its embeddings are reused for
    the centroid update).
    """
    cache = model._forward(model._as_batch(images))
    d = model.config.hyperspace_dim
    scale = 1.0 / (d * sigma**2)
    q = 0.5 * cache.sq_dist * scale
    per_cell, dq = _bce_from_scaled_distance(q, y, _loss_weights(y, config.pos_weight))
    det = per_cell.sum() / q.size
    diff = cache.z - model.centroid_set.centroids[None, None, None].astype(cache.z.dtype)
    grad_z = (dq / q.size)[..., None] * scale * diff

    reg = 0.0
    if config.use_reg_loss:
        reg, greg = regularization_loss(cache.z, model.centroid_set.centroids, y, config.lam)
        grad_z = grad_z + config.reg_weight * greg

    dims_pred = model.config.dims_scale * np.logaddexp(0.0, cache.dims_pre)
    dl, gdims = dims_loss(dims_pred, dims_t, mask)
    grad_dims_pre = config.dims_weight * gdims * model.config.dims_scale * sigmoid(cache.dims_pre)

    grads = model.backward(cache, grad_z.astype(model.dtype),
                           grad_dims_pre.astype(model.dtype), trainable)
    total = det + config.reg_weight * reg + config.dims_weight * dl
    parts = {"total": float(total), "det": float(det), "reg": float(reg), "dims": float(dl)}
    return parts, grads, cache


def _adam_step(model, grads, state, config, lr, trainable):
    b1, b2 = config.adam_betas
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if trainable is not None and name not in trainable:
            continue
        m = state.adam_m.setdefault(name, np.zeros_like(g))
        v = state.adam_v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        model.params[name] -= (lr * mhat / (np.sqrt(vhat) + config.adam_eps)).astype(model.dtype)


def train(scenes, config=None, seed=0, model_config=None, dtype=np.float32,
          callback=None):
    """Train a detector on a list of scenes.

    Returns ``(model, trace)``. Deterministic for a given seed. Raises
    :class:`TrainingDiverged` when a loss becomes non-finite.
    """
    config = config or TrainConfig.desk()
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    n_classes = max(
        (int(np.max(s.classes)) + 1 for s in scenes if len(s.classes)), default=1)
    if model_config is None:
        model_config = ModelConfig(n_classes=max(n_classes, 3),
                                   hyperspace_dim=config.hyperspace_dim,
                                   widths=config.widths)
    sigma = current_sigma(config, 0)
    gamma = current_gamma(config, 0)
    model = CertainNetModel.initialize(model_config, seed=seed, sigma=config.sigma0,
                                       gamma=gamma, dtype=dtype, flags=config.flags)
    model.centroid_set.sigma = sigma
    images = np.stack([s.image for s in scenes]).astype(dtype)
    grid = model.grid_shape(*images.shape[1:3])
    y_all, dims_all, mask_all = prepare_targets(scenes, grid, model.stride,
                                                model_config.n_classes)
    rng = np.random.default_rng(seed)
    state = TrainState(sigma=sigma, gamma=gamma, seed=seed)
    trace = TrainingTrace(flags=config.flags)
    n = len(scenes)
    all_params = set(model.params)
    head_only = {"proj.weight"}
    freeze_from = config.epochs - config.freeze_epochs if config.freeze_final else None
    log.info("training %d scenes for %d epochs, flags=%s", n, config.epochs, config.flags)

    for epoch in range(config.epochs):
        state.epoch = epoch
        gamma = current_gamma(config, epoch)
        lr = current_lr(config, epoch)
        trainable = head_only if freeze_from is not None and epoch >= freeze_from else all_params
        order = rng.permutation(n)
        sums = {"det": 0.0, "reg": 0.0, "dims": 0.0}
        drift = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            sigma = current_sigma(config, state.step)
            parts, grads, cache = loss_and_grads(
                model, images[idx], y_all[idx], dims_all[idx], mask_all[idx],
                config, sigma, trainable)
            if not np.isfinite(parts["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {state.step}: {parts}")
            _adam_step(model, grads, state, config, lr, trainable)
            old = model.centroid_set.centroids.astype(float)
            model.centroid_set = update_centroids(
                model.centroid_set, cache.z, y_all[idx], lam=config.lam, gamma=gamma,
                sigma=sigma, outlier_protection=config.outlier_protection,
                balanced=config.balanced_update)
            model.centroid_set.centroids = model.centroid_set.centroids.astype(model.dtype)
            drift += float(np.linalg.norm(model.centroid_set.centroids - old, axis=1).mean())
            for k in sums:
                sums[k] += parts[k]
            batches += 1
        sigma = current_sigma(config, state.step)
        model.centroid_set.sigma = sigma
        state.sigma, state.gamma = sigma, gamma
        row = {
            "epoch": epoch,
            "step": state.step,
            "det_loss": sums["det"] / batches,
            "reg_loss": sums["reg"] / batches,
            "dims_loss": sums["dims"] / batches,
            "sigma": sigma,
            "gamma": gamma,
            "centroid_drift": drift / batches,
        }
        trace.rows.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) if isinstance(v, float) else v
                                         for k, v in row.items()})
        if callback is not None:
            callback(model, row)
    return model, trace
