"""Turn head outputs into detections with per-signal uncertainties.

Works on any detector's class heatmaps + dims maps, so it can be applied
post hoc to imported heatmap dumps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import HeadOutputs
from .training import gaussian_radius

DUMP_KEYS = ("image_id", "stride", "class_heatmaps", "dims_w", "dims_h")


class DumpFormatError(ValueError):
    pass


@dataclass
class DecodeConfig:
    threshold: float = 0.1
    eta: float = 4.0
    boundary_scale: float = 1.0
    min_overlap: float = 0.7
    min_radius: int = 1
    max_detections: int = 100

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not self.boundary_scale > 0:
            raise ValueError("boundary_scale must be positive")


@dataclass
class Detection:
    """A decoded box (centre/size in input pixels) with its uncertainties."""

    cls: int
    cx: float
    cy: float
    w: float
    h: float
    score: float
    u_obj: float
    u_x: float
    u_y: float
    u_w: float
    u_h: float
    u_cls: float
    inner_box: tuple
    outer_box: tuple
    image_id: str | None = None

    @property
    def box(self):
        """``(x, y, w, h)`` with (x, y) the top-left corner."""
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h)

    def to_record(self):
        return {
            "image_id": self.image_id,
            "class": int(self.cls),
            "score": float(self.score),
            "box": [float(v) for v in self.box],
            "u_obj": float(self.u_obj),
            "u_x": float(self.u_x),
            "u_y": float(self.u_y),
            "u_w": float(self.u_w),
            "u_h": float(self.u_h),
            "u_cls": float(self.u_cls),
            "inner_box": [float(v) for v in self.inner_box],
            "outer_box": [float(v) for v in self.outer_box],
        }

    @classmethod
    def from_record(cls, rec):
        x, y, w, h = rec["box"]
        return cls(int(rec["class"]), x + w / 2, y + h / 2, w, h, rec["score"],
                   rec["u_obj"], rec["u_x"], rec["u_y"], rec["u_w"], rec["u_h"],
                   rec["u_cls"], tuple(rec["inner_box"]), tuple(rec["outer_box"]),
                   rec.get("image_id"))


def extract_peaks(class_heatmaps, threshold):
    """3x3 local maxima at or above ``threshold``.

    Returns ``(row, col, class, score)`` tuples ordered by (row, col, class).
    Plateau cells that tie the neighbourhood maximum all count as peaks.
    """
    heat = np.asarray(class_heatmaps, dtype=float)
    if heat.ndim == 2:
        heat = heat[None]
    n_cls, h, w = heat.shape
    padded = np.pad(heat, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    hmax = np.full_like(heat, -np.inf)
    for di in range(3):
        for dj in range(3):
            np.maximum(hmax, padded[:, di : di + h, dj : dj + w], out=hmax)
    keep = (heat == hmax) & (heat >= threshold)
    cls_idx, rows, cols = np.nonzero(keep)
    order = np.lexsort((cls_idx, cols, rows))
    return [(int(rows[k]), int(cols[k]), int(cls_idx[k]), float(heat[cls_idx[k], rows[k], cols[k]]))
            for k in order]


def window_radius(w_pred, h_pred, stride, min_overlap=0.7, min_radius=1):
    r = gaussian_radius(max(w_pred / stride, 1e-6), max(h_pred / stride, 1e-6), min_overlap)
    return max(min_radius, int(r))


def _window(shape, row, col, radius):
    h, w = shape
    r0, r1 = max(0, row - radius), min(h, row + radius + 1)
    c0, c1 = max(0, col - radius), min(w, col + radius + 1)
    dy = np.arange(r0, r1)[:, None] - row
    dx = np.arange(c0, c1)[None, :] - col
    return (slice(r0, r1), slice(c0, c1)), np.broadcast_to(dx, (r1 - r0, c1 - c0)), \
        np.broadcast_to(dy, (r1 - r0, c1 - c0))


def location_uncertainty(heatmap, row, col, w_pred, h_pred, eta=4.0, radius=1, stride=1):
    """Angularly weighted spread of scores around a peak, normalised by box size.

    Offsets are measured in input pixels (cell offset x stride). Each window
    cell contributes with weight ``p * |cos a|**eta`` to the x-variance and
    ``p * |sin a|**eta`` to the y-variance, where ``a`` is the angle of its
    offset from the x-axis; the centre cell has weight ``p`` and offset 0.
    """
    if not (w_pred > 0 and h_pred > 0):
        raise ValueError("predicted width and height must be positive")
    heat = np.asarray(heatmap, dtype=float)
    sl, dx, dy = _window(heat.shape, row, col, radius)
    p = heat[sl]
    dist = np.hypot(dx, dy)
    center = dist == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(center, 1.0, np.abs(dx) / np.where(center, 1.0, dist))
        sin = np.where(center, 1.0, np.abs(dy) / np.where(center, 1.0, dist))
    wx = p * cos**eta
    wy = p * sin**eta
    ox = dx * stride
    oy = dy * stride
    sx, sy = wx.sum(), wy.sum()
    var_x = float((ox**2 * wx).sum() / sx) if sx > 0 else 0.0
    var_y = float((oy**2 * wy).sum() / sy) if sy > 0 else 0.0
    return math.sqrt(var_x) / w_pred, math.sqrt(var_y) / h_pred


def dimension_uncertainty(dims_map, heatmap, row, col, w_pred, h_pred, radius=1):
    """Score-weighted RMSE of neighbouring size predictions, normalised by size.

    ``dims_map`` is ``(2, h, w)`` holding per-cell (width, height).
    """
    if not (w_pred > 0 and h_pred > 0):
        raise ValueError("predicted width and height must be positive")
    heat = np.asarray(heatmap, dtype=float)
    sl, _, _ = _window(heat.shape, row, col, radius)
    p = heat[sl]
    total = p.sum()
    if total <= 0:
        return 0.0, 0.0
    ws = np.asarray(dims_map[0], dtype=float)[sl]
    hs = np.asarray(dims_map[1], dtype=float)[sl]
    u_w = math.sqrt(float((p * (w_pred - ws) ** 2).sum() / total)) / w_pred
    u_h = math.sqrt(float((p * (h_pred - hs) ** 2).sum() / total)) / h_pred
    return u_w, u_h


def class_uncertainty(class_scores):
    """Recursive class ambiguity from the ranked class scores at a centre.

    ``U(1) = 0`` and ``U(i) = U(i-1) + (1 - U(i-1)) * (p_i / p_1)**i`` for
    ``i = 2..N``, with ``p_i`` the i-th highest score; clamped to [0, 1].
    """
    scores = np.sort(np.asarray(class_scores, dtype=float).ravel())[::-1]
    if scores.size == 0:
        raise ValueError("need at least one class score")
    top = scores[0]
    if not top > 0:
        raise ValueError("top class score must be positive")
    u = 0.0
    for i in range(2, scores.size + 1):
        u = u + (1.0 - u) * (scores[i - 1] / top) ** i
    return float(min(1.0, max(0.0, u)))


def grow_box(box, sx, sy):
    """Grow (positive) or shrink (negative) a box symmetrically, size >= 0."""
    x, y, w, h = box
    cx, cy = x + w / 2, y + h / 2
    nw = max(0.0, w + 2 * sx)
    nh = max(0.0, h + 2 * sy)
    return (cx - nw / 2, cy - nh / 2, nw, nh)


def boundary_slack(w, h, u_x=0.0, u_y=0.0, u_w=0.0, u_h=0.0, k=1.0):
    sx = k * u_x * w + k * u_w * w / 2
    sy = k * u_y * h + k * u_h * h / 2
    return sx, sy


def uncertainty_boundaries(detection, k=1.0):
    """Inner and outer boxes for a detection; ``inner <= box <= outer``."""
    if not k > 0:
        raise ValueError("boundary scale must be positive")
    d = detection
    sx, sy = boundary_slack(d.w, d.h, d.u_x, d.u_y, d.u_w, d.u_h, k)
    return grow_box(d.box, -sx, -sy), grow_box(d.box, sx, sy)


def decode(outputs, config=None, image_id=None):
    """Decode single-image :class:`HeadOutputs` into detections, best first."""
    config = config or DecodeConfig()
    heat = np.asarray(outputs.class_heatmaps, dtype=float)
    dims = np.asarray(outputs.dims_map, dtype=float)
    stride = outputs.stride
    dets = []
    for row, col, cls, score in extract_peaks(heat, config.threshold):
        w_pred = float(dims[0, row, col])
        h_pred = float(dims[1, row, col])
        if not (w_pred > 0 and h_pred > 0):
            continue
        radius = window_radius(w_pred, h_pred, stride, config.min_overlap, config.min_radius)
        u_x, u_y = location_uncertainty(heat[cls], row, col, w_pred, h_pred,
                                        config.eta, radius, stride)
        u_w, u_h = dimension_uncertainty(dims, heat[cls], row, col, w_pred, h_pred, radius)
        u_cls = class_uncertainty(heat[:, row, col])
        det = Detection(cls, (col + 0.5) * stride, (row + 0.5) * stride, w_pred, h_pred,
                        score, 1.0 - score, u_x, u_y, u_w, u_h, u_cls, (), (), image_id)
        det.inner_box, det.outer_box = uncertainty_boundaries(det, config.boundary_scale)
        dets.append(det)
    # stable: equal scores keep (row, col, class) order
    dets.sort(key=lambda d: -d.score)
    return dets[: config.max_detections]


# ---------------------------------------------------------------------------
# heatmap dump / detection JSON Lines


def heatmap_record(image_id, outputs):
    return {
        "image_id": image_id,
        "stride": int(outputs.stride),
        "class_heatmaps": np.asarray(outputs.class_heatmaps, dtype=float).tolist(),
        "dims_w": np.asarray(outputs.dims_map[0], dtype=float).tolist(),
        "dims_h": np.asarray(outputs.dims_map[1], dtype=float).tolist(),
    }


def write_heatmap_dump(path, items):
    """Write ``(image_id, HeadOutputs)`` pairs as JSON Lines."""
    with open(path, "w") as fh:
        for image_id, outputs in items:
            fh.write(json.dumps(heatmap_record(image_id, outputs)) + "\n")


def read_heatmap_dump(path):
    """Yield ``(image_id, HeadOutputs)`` from a heatmap dump file."""
    path = Path(path)
    with open(path) as fh:
        for k, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"{path}: record {k} is not valid JSON: {exc}") from None
            missing = [key for key in DUMP_KEYS if key not in rec]
            if missing:
                raise DumpFormatError(f"{path}: record {k} missing keys {missing}")
            heat = np.asarray(rec["class_heatmaps"], dtype=float)
            if heat.ndim == 2:
                heat = heat[None]
            dims = np.stack([np.asarray(rec["dims_w"], dtype=float),
                             np.asarray(rec["dims_h"], dtype=float)])
            if heat.ndim != 3 or dims.shape[1:] != heat.shape[1:]:
                raise DumpFormatError(
                    f"{path}: record {k} grid shapes disagree: heatmaps {heat.shape}, dims {dims.shape}")
            yield rec["image_id"], HeadOutputs(heat, dims, int(rec["stride"]))


def write_detections(path, detections):
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_record()) + "\n")


def read_detections(path):
    path = Path(path)
    out = []
    with open(path) as fh:
        for k, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                out.append(Detection.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DumpFormatError(f"{path}: detection record {k} invalid: {exc!r}") from None
    return out
