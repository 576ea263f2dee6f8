"""Deterministic synthetic scenes with controllable domain shift, and dataset I/O.

A dataset directory holds::

    manifest.json       format name, schema version, scene count, generator config
    grids.bin           one binary record per scene (the float32 image)
    annotations.jsonl   one line per object: {image_id, class, box [x, y, w, h]}
    render.jsonl        one line per scene: render attributes needed to re-draw it
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASET_FORMAT = "certainnet-dataset"
DATASET_VERSION = 1
GRID_MAGIC = b"GRID"
_RECORD_HEADER = struct.Struct("<4sIII")

SHAPES = ("rectangle", "ellipse", "triangle")
UNSEEN_SHAPES = ("cross", "ring")


class DatasetError(ValueError):
    """Base class for dataset file problems."""


class DatasetVersionError(DatasetError):
    pass


class CorruptRecordError(DatasetError):
    pass


@dataclass
class SceneConfig:
    """Generator settings. ``class_weights`` must sum to 1."""

    height: int = 128
    width: int = 128
    count_range: tuple = (1, 4)
    class_shapes: tuple = SHAPES
    class_weights: tuple = (0.7, 0.2, 0.1)
    size_range: tuple = (16, 40)
    intensity_range: tuple = (0.55, 1.0)
    background_range: tuple = (0.0, 0.3)
    background_gradient: float = 0.15
    noise_level: float = 0.03
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        self.count_range = tuple(int(v) for v in self.count_range)
        self.class_shapes = tuple(self.class_shapes)
        self.class_weights = tuple(float(v) for v in self.class_weights)
        self.size_range = tuple(int(v) for v in self.size_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        self.background_range = tuple(float(v) for v in self.background_range)
        lo, hi = self.size_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid size_range {self.size_range}")
        if hi > min(self.height, self.width):
            raise ValueError("objects larger than the image")
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ValueError(f"invalid count_range {self.count_range}")
        if len(self.class_weights) != len(self.class_shapes):
            raise ValueError("one class weight per class shape required")
        if abs(sum(self.class_weights) - 1.0) > 1e-9 or min(self.class_weights) < 0:
            raise ValueError(f"class_weights must be non-negative and sum to 1, got {self.class_weights}")
        unknown = set(self.class_shapes) - set(SHAPES + UNSEEN_SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    @property
    def n_classes(self):
        return len(self.class_shapes)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ShiftConfig:
    """Domain-shift knobs; all-zero (and size_factor 1) is the identity."""

    noise_sigma: float = 0.0
    intensity_shift: float = 0.0
    size_factor: float = 1.0
    unseen_rate: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.size_factor <= 0:
            raise ValueError("size_factor must be positive")
        if not 0 <= self.unseen_rate <= 1:
            raise ValueError("unseen_rate must lie in [0, 1]")

    @classmethod
    def benchmark(cls):
        """The out-of-domain split used by the acceptance benchmark."""
        return cls(noise_sigma=0.2, size_factor=1.3, unseen_rate=0.1)


@dataclass
class Scene:
    """One grayscale image with its annotations and render attributes."""

    image_id: str
    index: int
    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    shapes: list = field(default_factory=list)
    intensities: list = field(default_factory=list)
    background: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.image_id == other.image_id and self.index == other.index
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.boxes, other.boxes)
                and np.array_equal(self.classes, other.classes)
                and list(self.shapes) == list(other.shapes)
                and list(self.intensities) == list(other.intensities)
                and self.background == other.background)


# ---------------------------------------------------------------------------
# rendering


def shape_mask(shape, box, height, width):
    """Boolean mask of pixels whose centres fall inside the shape drawn in ``box``."""
    x, y, w, h = box
    px = np.arange(width) + 0.5
    py = (np.arange(height) + 0.5)[:, None]
    cx, cy = x + w / 2, y + h / 2
    if shape == "rectangle":
        return (px >= x) & (px < x + w) & (py >= y) & (py < y + h)
    if shape == "ellipse":
        return ((px - cx) / (w / 2)) ** 2 + ((py - cy) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        frac = (py - y) / h
        return (frac >= 0) & (frac <= 1) & (np.abs(px - cx) <= (w / 2) * frac)
    if shape == "cross":
        inside = (px >= x) & (px < x + w) & (py >= y) & (py < y + h)
        return inside & ((np.abs(px - cx) <= w / 6) | (np.abs(py - cy) <= h / 6))
    if shape == "ring":
        r = ((px - cx) / (w / 2)) ** 2 + ((py - cy) / (h / 2)) ** 2
        return (r <= 1.0) & (r >= 0.36)
    raise ValueError(f"unknown shape {shape!r}")


def render_background(background, height, width):
    u = (np.arange(width) + 0.5) / width - 0.5
    v = ((np.arange(height) + 0.5) / height - 0.5)[:, None]
    img = background["level"] + background["gx"] * u + background["gy"] * v
    img = np.broadcast_to(img, (height, width)).astype(np.float64)
    if background["noise_level"] > 0:
        rng = np.random.default_rng(background["noise_seed"])
        img = img + rng.normal(0.0, background["noise_level"], (height, width))
    return img


def render(background, boxes, shapes, intensities, height, width):
    img = render_background(background, height, width)
    for box, shape, value in zip(boxes, shapes, intensities):
        img[shape_mask(shape, box, height, width)] = value
    return img.astype(np.float32)


def _boxes_intersect(a, b):
    return (a[0] < b[0] + b[2] and b[0] < a[0] + a[2]
            and a[1] < b[1] + b[3] and b[1] < a[1] + a[3])


def generate_scene(config, index):
    """Generate scene ``index``; a pure function of ``(config, index)``.

    Objects never overlap. When a placement fails ``max_retries`` times the
    scene keeps fewer objects.
    """
    rng = np.random.default_rng([config.seed, index])
    lo, hi = config.count_range
    count = int(rng.integers(lo, hi + 1))
    h_img, w_img = config.height, config.width
    boxes, classes, shapes, intensities = [], [], [], []
    for _ in range(count):
        cls = int(rng.choice(config.n_classes, p=config.class_weights))
        value = float(rng.uniform(*config.intensity_range))
        placed = None
        for _ in range(config.max_retries):
            w = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            h = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            x = int(rng.integers(0, w_img - w + 1))
            y = int(rng.integers(0, h_img - h + 1))
            cand = (x, y, w, h)
            if not any(_boxes_intersect(cand, b) for b in boxes):
                placed = cand
                break
        if placed is None:
            log.debug("scene %d: could not place object %d", index, len(boxes))
            continue
        boxes.append(placed)
        classes.append(cls)
        shapes.append(config.class_shapes[cls])
        intensities.append(value)
    if len(boxes) < count:
        log.info("scene %d: placed %d of %d objects", index, len(boxes), count)
    background = {
        "level": float(rng.uniform(*config.background_range)),
        "gx": float(rng.uniform(-1, 1) * config.background_gradient),
        "gy": float(rng.uniform(-1, 1) * config.background_gradient),
        "noise_level": float(config.noise_level),
        "noise_seed": int(rng.integers(0, 2**31 - 1)),
    }
    box_arr = np.asarray(boxes, dtype=float).reshape(-1, 4)
    image = render(background, box_arr, shapes, intensities, h_img, w_img)
    return Scene(f"{index:06d}", index, image, box_arr,
                 np.asarray(classes, dtype=np.int64), shapes, intensities, background)


def generate_dataset(config, count, start=0):
    return [generate_scene(config, i) for i in range(start, start + count)]


def apply_shift(scene, shift, seed=0):
    """Return a shifted copy of ``scene``.

    Size scaling (about each box centre) and unseen-shape substitution
    re-draw the objects over the scene's background; intensity offset and
    Gaussian noise are then added per pixel. Class labels are kept.
    """
    rng = np.random.default_rng([seed, scene.index])
    boxes = scene.boxes.copy()
    shapes = list(scene.shapes)
    redraw = shift.size_factor != 1.0 or shift.unseen_rate > 0
    if shift.unseen_rate > 0:
        swap = rng.random(len(shapes)) < shift.unseen_rate
        picks = rng.integers(0, len(UNSEEN_SHAPES), len(shapes))
        shapes = [UNSEEN_SHAPES[p] if s else old for s, p, old in zip(swap, picks, shapes)]
    if shift.size_factor != 1.0 and len(boxes):
        centers = boxes[:, :2] + boxes[:, 2:] / 2
        boxes[:, 2:] = boxes[:, 2:] * shift.size_factor
        boxes[:, :2] = centers - boxes[:, 2:] / 2
    if redraw:
        h, w = scene.image.shape
        image = render(scene.background, boxes, shapes, scene.intensities, h, w)
    else:
        image = scene.image.copy()
    image = image.astype(np.float64)
    if shift.intensity_shift:
        image += shift.intensity_shift
    if shift.noise_sigma > 0:
        image += rng.normal(0.0, shift.noise_sigma, image.shape)
    return replace(scene, image=image.astype(np.float32), boxes=boxes, shapes=shapes,
                   classes=scene.classes.copy(), intensities=list(scene.intensities),
                   background=dict(scene.background))


# ---------------------------------------------------------------------------
# I/O


def _json_line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_dataset(path, scenes, config=None):
    """Write scenes to a dataset directory (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "grids.bin", "wb") as fh:
        for i, scene in enumerate(scenes):
            img = np.ascontiguousarray(scene.image, dtype="<f4")
            fh.write(_RECORD_HEADER.pack(GRID_MAGIC, i, img.shape[0], img.shape[1]))
            fh.write(img.tobytes())
    with open(path / "annotations.jsonl", "w") as fh:
        for scene in scenes:
            for box, cls in zip(scene.boxes, scene.classes):
                fh.write(_json_line({"image_id": scene.image_id, "class": int(cls),
                                     "box": [float(v) for v in box]}))
    with open(path / "render.jsonl", "w") as fh:
        for scene in scenes:
            fh.write(_json_line({
                "image_id": scene.image_id,
                "index": int(scene.index),
                "shapes": list(scene.shapes),
                "intensities": [float(v) for v in scene.intensities],
                "background": scene.background,
            }))
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "num_scenes": len(scenes),
        "grids": "grids.bin",
        "annotations": "annotations.jsonl",
        "render": "render.jsonl",
        "config": None if config is None else config.to_dict(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: missing dataset manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: unreadable manifest: {exc}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{mpath}: format {manifest.get('format')!r} is not {DATASET_FORMAT!r}")
    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise DatasetVersionError(
            f"{mpath}: dataset schema version {version!r} unsupported "
            f"(expected version {DATASET_VERSION})")
    return manifest


def _read_jsonl(fpath):
    records = []
    with open(fpath) as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorruptRecordError(
                    f"{fpath}: record {lineno} is not valid JSON ({exc}); "
                    f"schema version {DATASET_VERSION}") from None
    return records


def read_grids(fpath, expected):
    data = Path(fpath).read_bytes()
    grids = []
    offset = 0
    for i in range(expected):
        if offset + _RECORD_HEADER.size > len(data):
            raise CorruptRecordError(
                f"{fpath}: record {i} header truncated at byte offset {offset} "
                f"(schema version {DATASET_VERSION})")
        magic, idx, h, w = _RECORD_HEADER.unpack_from(data, offset)
        if magic != GRID_MAGIC or idx != i:
            raise CorruptRecordError(
                f"{fpath}: record {i} at byte offset {offset} has bad header "
                f"(magic {magic!r}, index {idx}; schema version {DATASET_VERSION})")
        start = offset + _RECORD_HEADER.size
        end = start + 4 * h * w
        if end > len(data):
            raise CorruptRecordError(
                f"{fpath}: record {i} truncated at byte offset {len(data)} "
                f"(record starts at {offset}, needs {end - offset} bytes; "
                f"schema version {DATASET_VERSION})")
        grids.append(np.frombuffer(data[start:end], dtype="<f4").reshape(h, w).astype(np.float32))
        offset = end
    if offset != len(data):
        raise CorruptRecordError(
            f"{fpath}: {len(data) - offset} trailing bytes after record {expected - 1} "
            f"at byte offset {offset} (schema version {DATASET_VERSION})")
    return grids


def load_dataset(path):
    """Load a dataset directory written by :func:`save_dataset`."""
    path = Path(path)
    manifest = read_manifest(path)
    n = manifest["num_scenes"]
    grids = read_grids(path / manifest["grids"], n)
    renders = _read_jsonl(path / manifest["render"])
    if len(renders) != n:
        raise CorruptRecordError(
            f"{path / manifest['render']}: {len(renders)} records, manifest says {n} "
            f"(schema version {DATASET_VERSION})")
    by_id = {r["image_id"]: ([], []) for r in renders}
    for k, ann in enumerate(_read_jsonl(path / manifest["annotations"])):
        if ann.get("image_id") not in by_id:
            raise CorruptRecordError(
                f"{path / manifest['annotations']}: record {k} references unknown "
                f"image_id {ann.get('image_id')!r} (schema version {DATASET_VERSION})")
        by_id[ann["image_id"]][0].append(ann["box"])
        by_id[ann["image_id"]][1].append(ann["class"])
    scenes = []
    for grid, r in zip(grids, renders):
        boxes, classes = by_id[r["image_id"]]
        scenes.append(Scene(
            r["image_id"], int(r["index"]), grid,
            np.asarray(boxes, dtype=float).reshape(-1, 4),
            np.asarray(classes, dtype=np.int64),
            list(r["shapes"]), list(r["intensities"]), dict(r["background"])))
    return scenes


def load_config(path, cls):
    """Read a JSON key-value config file into ``cls`` via ``from_dict``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON config: {exc}") from None
    return cls.from_dict(data)
