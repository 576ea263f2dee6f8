"""Uncertainty-aware detector core: backbone, hyperspace projection, RBF head.

Arrays are channels-last internally (``N, H, W, C``); the public
``HeadOutputs`` grids are channels-first (``C, h, w``) to match the heatmap
dump format.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"CERTAINNET-CKPT-v1"

FEATURE_FLAGS = (
    "use_reg_loss",
    "balanced_update",
    "outlier_protection",
    "momentum_schedule",
    "sigma_annealing",
    "freeze_final",
)


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or incompatible checkpoint files."""


# ---------------------------------------------------------------------------
# kernel


def rbf_score(z, centroid, sigma):
    """RBF similarity between embedding(s) ``z`` and a class centroid.

    Computes ``exp(-||z - e||^2 / (2 * D * sigma^2))`` over the last axis, so
    the length scale does not depend on the hyperspace dimensionality ``D``.
    """
    if not sigma > 0:
        raise ValueError(f"length scale must be positive, got {sigma!r}")
    z = np.asarray(z, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    if z.shape[-1] != centroid.shape[-1]:
        raise ValueError(
            f"embedding dim {z.shape[-1]} != centroid dim {centroid.shape[-1]}"
        )
    dim = z.shape[-1]
    sq = np.sum((z - centroid) ** 2, axis=-1)
    return np.exp(-sq / (2.0 * dim * sigma**2))


def objectness_uncertainty(score):
    """Objectness uncertainty as the complement of the kernel score."""
    return 1.0 - np.asarray(score, dtype=float)


# ---------------------------------------------------------------------------
# layers


def conv2d_forward(x, weight, bias, stride=1, dilation=1):
    """'Same'-padded 2-D convolution on ``(N, H, W, C)`` input.

    ``weight`` has shape ``(k, k, C_in, C_out)``. Output spatial size is
    ``ceil(H / stride)``. Returns the output and the im2col buffer, which the
    backward pass reuses.
    """
    n, h, w, c = x.shape
    k = weight.shape[0]
    pad = dilation * (k - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[
                :,
                i * dilation : i * dilation + stride * (ho - 1) + 1 : stride,
                j * dilation : j * dilation + stride * (wo - 1) + 1 : stride,
                :,
            ]
    out = cols.reshape(-1, k * k * c) @ weight.reshape(k * k * c, -1) + bias
    return out.reshape(n, ho, wo, -1), cols


def conv2d_backward(grad, cols, x_shape, weight, stride=1, dilation=1):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias."""
    n, h, w, c = x_shape
    k = weight.shape[0]
    pad = dilation * (k - 1) // 2
    _, ho, wo, c_out = grad.shape
    g2 = grad.reshape(-1, c_out)
    dweight = (cols.reshape(-1, k * k * c).T @ g2).reshape(weight.shape)
    dbias = g2.sum(axis=0)
    dcols = (g2 @ weight.reshape(k * k * c, c_out).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            dxp[
                :,
                i * dilation : i * dilation + stride * (ho - 1) + 1 : stride,
                j * dilation : j * dilation + stride * (wo - 1) + 1 : stride,
                :,
            ] += dcols[:, :, :, i, j, :]
    return dxp[:, pad : pad + h, pad : pad + w, :], dweight, dbias


def softplus(a):
    return np.logaddexp(0.0, a)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# ---------------------------------------------------------------------------
# head outputs


@dataclass
class HeadOutputs:
    """Dense head outputs for one image (or a batch with a leading axis).

    Attributes
    ----------
    class_heatmaps : ndarray, shape (..., n_classes, h, w)
        Kernel scores in (0, 1].
    dims_map : ndarray, shape (..., 2, h, w)
        Predicted (width, height) in input pixels for every cell.
    stride : int
        Input pixels per grid cell.
    embedding_maps : ndarray, shape (..., n_classes, h, w, D), optional
        Projected hyperspace coordinates; absent for imported heatmap dumps.
    """

    class_heatmaps: np.ndarray
    dims_map: np.ndarray
    stride: int
    embedding_maps: np.ndarray | None = None

    def __post_init__(self):
        if self.class_heatmaps.shape[-2:] != self.dims_map.shape[-2:]:
            raise ValueError("heatmap and dims grids must share spatial shape")

    @property
    def batched(self):
        return self.class_heatmaps.ndim == 4

    def __len__(self):
        return self.class_heatmaps.shape[0] if self.batched else 1

    def __getitem__(self, i):
        if not self.batched:
            raise TypeError("single-image HeadOutputs is not indexable")
        emb = None if self.embedding_maps is None else self.embedding_maps[i]
        return HeadOutputs(self.class_heatmaps[i], self.dims_map[i], self.stride, emb)


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The default backbone has five 3x3 stages: two stride-2 stages giving an
    output stride of 4, then three stride-1 stages with dilations 1, 2, 4 so
    the receptive field (63 px) covers the largest synthetic objects.
    """

    n_classes: int = 3
    in_channels: int = 1
    widths: tuple = (8, 16, 32, 32, 32)
    strides: tuple = (2, 2, 1, 1, 1)
    dilations: tuple = (1, 1, 1, 2, 4)
    kernel_size: int = 3
    hyperspace_dim: int = 16
    dims_scale: float = 16.0
    dims_init: float = 24.0

    def __post_init__(self):
        self.widths = tuple(int(v) for v in self.widths)
        self.strides = tuple(int(v) for v in self.strides)
        self.dilations = tuple(int(v) for v in self.dilations)
        if not (len(self.widths) == len(self.strides) == len(self.dilations)):
            raise ValueError("widths, strides and dilations must have equal length")
        if self.n_classes < 1 or self.hyperspace_dim < 1:
            raise ValueError("n_classes and hyperspace_dim must be positive")

    @property
    def stride(self):
        return int(np.prod(self.strides))

    def to_dict(self):
        return {
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "strides": list(self.strides),
            "dilations": list(self.dilations),
            "kernel_size": self.kernel_size,
            "hyperspace_dim": self.hyperspace_dim,
            "dims_scale": self.dims_scale,
            "dims_init": self.dims_init,
        }


@dataclass
class CentroidSet:
    """Per-class hyperspace centroids with the kernel length scale and momentum.

    ``counts`` and ``sums`` are only used by the unbalanced (count-normalised)
    centroid update.
    """

    centroids: np.ndarray
    sigma: float
    gamma: float
    counts: np.ndarray | None = None
    sums: np.ndarray | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    def copy(self):
        return CentroidSet(
            self.centroids.copy(),
            self.sigma,
            self.gamma,
            None if self.counts is None else self.counts.copy(),
            None if self.sums is None else self.sums.copy(),
        )


@dataclass
class ForwardCache:
    images: np.ndarray
    acts: list
    cols: list
    pre: list
    features: np.ndarray
    z: np.ndarray
    sq_dist: np.ndarray
    dims_pre: np.ndarray


class CertainNetModel:
    """Feature extractor, per-class hyperspace projection, RBF and dims heads.

    Parameters are held in ``params`` (name -> array). Conv weights have
    shape ``(k, k, C_in, C_out)``, the projector ``(n_classes, F, D)``.
    """

    def __init__(self, config=None, params=None, centroid_set=None, flags=None,
                 dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = params
        self.centroid_set = centroid_set
        self.flags = dict(flags or {})

    # -- construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config=None, seed=0, sigma=0.25, gamma=0.9,
                   dtype=np.float32, flags=None):
        """He-initialised weights and centroids ~ N(0, 1) * sigma, from ``seed``."""
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        params = {}
        c_in = config.in_channels
        k = config.kernel_size
        for i, c_out in enumerate(config.widths):
            fan_in = k * k * c_in
            params[f"conv{i}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (k, k, c_in, c_out))
            params[f"conv{i}.bias"] = np.zeros(c_out)
            c_in = c_out
        feat = config.widths[-1]
        d = config.hyperspace_dim
        params["proj.weight"] = rng.normal(
            0.0, np.sqrt(1.0 / feat), (config.n_classes, feat, d))
        params["dims.weight"] = rng.normal(0.0, 0.01, (feat, 2))
        # inverse softplus so the initial dims prediction is ``dims_init`` px
        init = np.log(np.expm1(config.dims_init / config.dims_scale))
        params["dims.bias"] = np.full(2, init)
        params = {name: v.astype(dtype) for name, v in params.items()}
        centroids = rng.standard_normal((config.n_classes, d)) * sigma
        cset = CentroidSet(
            centroids.astype(dtype), float(sigma), float(gamma),
            counts=np.ones(config.n_classes),
            sums=centroids.copy(),
        )
        return cls(config, params, cset, flags, dtype)

    def _check_ready(self):
        if self.params is None or self.centroid_set is None:
            raise RuntimeError("model parameters are not initialised")

    @property
    def stride(self):
        return self.config.stride

    def grid_shape(self, height, width):
        r = self.stride
        return -(-height // r), -(-width // r)

    # -- forward ----------------------------------------------------------

    def _as_batch(self, images):
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, :, :, None]
        elif x.ndim == 3:
            x = x[..., None] if self.config.in_channels == 1 else x[None]
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ValueError(f"cannot interpret image array of shape {np.shape(images)}")
        return x

    def features(self, images):
        self._check_ready()
        return self._forward(self._as_batch(images)).features

    def _forward(self, x):
        p = self.params
        cfg = self.config
        acts, cols, pre = [x], [], []
        h = x
        for i in range(len(cfg.widths)):
            out, col = conv2d_forward(
                h, p[f"conv{i}.weight"], p[f"conv{i}.bias"],
                cfg.strides[i], cfg.dilations[i])
            cols.append(col)
            pre.append(out)
            h = np.maximum(out, 0)
            acts.append(h)
        feats = h
        z = project_features(feats, p["proj.weight"])
        e = self.centroid_set.centroids.astype(self.dtype)
        sq = np.sum((z - e[None, None, None]) ** 2, axis=-1)
        dims_pre = feats @ p["dims.weight"] + p["dims.bias"]
        return ForwardCache(x, acts, cols, pre, feats, z, sq, dims_pre)

    def heatmaps_from_cache(self, cache, sigma=None):
        sigma = self.centroid_set.sigma if sigma is None else sigma
        d = self.config.hyperspace_dim
        return np.exp(-cache.sq_dist / (2.0 * d * sigma**2))

    def forward(self, images, keep_embeddings=True):
        """Run the detector on an image or batch and return :class:`HeadOutputs`.

        A 2-D input is treated as a single grayscale image and produces
        unbatched outputs.
        """
        self._check_ready()
        single = np.ndim(images) == 2
        cache = self._forward(self._as_batch(images))
        scores = self.heatmaps_from_cache(cache)
        dims = self.config.dims_scale * softplus(cache.dims_pre)
        heat = np.moveaxis(scores, -1, 1)
        dims = np.moveaxis(dims, -1, 1)
        emb = np.moveaxis(cache.z, 3, 1) if keep_embeddings else None
        out = HeadOutputs(heat, dims, self.stride, emb)
        return out[0] if single else out

    # -- backward ---------------------------------------------------------

    def backward(self, cache, grad_z=None, grad_dims_pre=None, trainable=None):
        """Back-propagate head gradients to every parameter.

        ``grad_z`` is d loss / d embeddings with shape ``(N, h, w, C, D)``,
        ``grad_dims_pre`` d loss / d pre-softplus dims ``(N, h, w, 2)``.
        ``trainable`` optionally restricts which parameters get gradients;
        the backbone is skipped entirely when none of its parameters train.
        """
        p = self.params
        cfg = self.config
        feats = cache.features
        grads = {}
        dfeat = np.zeros_like(feats)
        feat_dim = feats.shape[-1]
        f2 = feats.reshape(-1, feat_dim)
        if grad_z is not None:
            n_cls, _, d = p["proj.weight"].shape
            gz = grad_z.reshape(-1, n_cls, d)
            grads["proj.weight"] = np.einsum("mf,mcd->cfd", f2, gz)
            dfeat += np.einsum("mcd,cfd->mf", gz, p["proj.weight"]).reshape(feats.shape)
        else:
            grads["proj.weight"] = np.zeros_like(p["proj.weight"])
        if grad_dims_pre is not None:
            g2 = grad_dims_pre.reshape(-1, 2)
            grads["dims.weight"] = f2.T @ g2
            grads["dims.bias"] = g2.sum(axis=0)
            dfeat += (g2 @ p["dims.weight"].T).reshape(feats.shape)
        else:
            grads["dims.weight"] = np.zeros_like(p["dims.weight"])
            grads["dims.bias"] = np.zeros_like(p["dims.bias"])

        backbone = [f"conv{i}.{t}" for i in range(len(cfg.widths)) for t in ("weight", "bias")]
        if trainable is not None and not any(name in trainable for name in backbone):
            for name in backbone:
                grads[name] = np.zeros_like(p[name])
            return grads

        g = dfeat
        for i in reversed(range(len(cfg.widths))):
            g = g * (cache.pre[i] > 0)
            dx, dw, db = conv2d_backward(
                g, cache.cols[i], cache.acts[i].shape, p[f"conv{i}.weight"],
                cfg.strides[i], cfg.dilations[i])
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
            g = dx
        return grads

    # -- persistence ------------------------------------------------------

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def project_features(features, projector, cls=None):
    """Apply per-class 1x1 projections to a feature grid.

    Parameters
    ----------
    features : ndarray, shape (..., F)
        Feature vectors in the last axis (any leading grid shape).
    projector : ndarray, shape (n_classes, F, D)
    cls : int, optional
        If given, only class ``cls`` is projected and the result has shape
        ``(..., D)``; otherwise ``(..., n_classes, D)``.
    """
    features = np.asarray(features)
    projector = np.asarray(projector)
    if features.size == 0:
        raise ValueError("feature grid is empty")
    if cls is not None:
        if not 0 <= cls < projector.shape[0]:
            raise IndexError(f"class index {cls} out of range [0, {projector.shape[0]})")
        return features @ projector[cls]
    n_cls, feat, d = projector.shape
    flat = features.reshape(-1, feat) @ projector.transpose(1, 0, 2).reshape(feat, n_cls * d)
    return flat.reshape(features.shape[:-1] + (n_cls, d))


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# Layout: magic line, little-endian uint64 header length, UTF-8 JSON header,
# then the raw little-endian array bytes at the offsets listed in the header.


def save_checkpoint(model, path):
    model._check_ready()
    cset = model.centroid_set
    arrays = dict(model.params)
    arrays["centroids"] = cset.centroids
    if cset.counts is not None:
        arrays["centroid_counts"] = cset.counts
        arrays["centroid_sums"] = cset.sums
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": CHECKPOINT_MAGIC.decode(),
        "config": model.config.to_dict(),
        "stride": model.stride,
        "hyperspace_dim": model.config.hyperspace_dim,
        "n_classes": model.config.n_classes,
        "sigma": cset.sigma,
        "gamma": cset.gamma,
        "dtype": model.dtype.str,
        "flags": {k: bool(model.flags.get(k, False)) for k in FEATURE_FLAGS},
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    path = Path(path)
    data = path.read_bytes()
    magic = CHECKPOINT_MAGIC + b"\n"
    if not data.startswith(magic):
        found = data[: len(magic)].split(b"\n")[0][:40]
        raise CheckpointError(
            f"{path}: not a checkpoint (expected magic {CHECKPOINT_MAGIC.decode()!r}, "
            f"found {found!r})")
    pos = len(magic)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header at byte {pos}")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at byte {pos}: {exc}") from None
    body = pos + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = body + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(
                f"{path}: array {entry['name']!r} truncated at byte {len(data)} "
                f"(needs {end}; format {CHECKPOINT_MAGIC.decode()})")
        arr = np.frombuffer(data[start:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    cfg = header["config"]
    config = ModelConfig(**cfg)
    centroids = arrays.pop("centroids")
    counts = arrays.pop("centroid_counts", None)
    sums = arrays.pop("centroid_sums", None)
    cset = CentroidSet(centroids, header["sigma"], header["gamma"], counts, sums)
    return CertainNetModel(config, arrays, cset, header["flags"], np.dtype(header["dtype"]))
