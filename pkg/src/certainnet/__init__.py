"""Single-pass center-heatmap object detector with per-box uncertainty estimates."""

__version__ = "0.1.0"
