"""Heatmap rendering, threshold masks and map statistics.

Rendered images come back as binary PGM (grayscale) or PPM (colour)
bytes: a short ASCII header followed by raw row-major pixels.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .store import encode_pnm, tensor_to_pixels

COLORMAPS = ("grayscale", "signed")
MID_GRAY = 128


@dataclass(frozen=True)
class RenderSpec:
    """``threshold`` is ``"none"``, ``"pos"`` or ``"<n>sigma"`` (e.g. ``"2sigma"``)."""

    colormap: str = "signed"
    threshold: str = "none"
    overlay_alpha: float = 0.5

    def __post_init__(self):
        if self.colormap not in COLORMAPS:
            raise ConfigError(f"colormap must be one of {COLORMAPS}, got {self.colormap!r}")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ConfigError(f"overlay alpha must lie in [0, 1], got {self.overlay_alpha}")
        parse_threshold(self.threshold)


def parse_threshold(spec: str):
    """Return ``None``, ``"pos"`` or the sigma multiple ``n``."""
    if spec in ("none", "", None):
        return None
    if spec in ("pos", "positive"):
        return "pos"
    m = re.fullmatch(r"(\d+(?:\.\d*)?|\.\d+)\s*sigma", spec)
    if not m:
        raise ConfigError(f"threshold must be none, pos or <n>sigma, got {spec!r}")
    return float(m.group(1))


@dataclass(frozen=True)
class MapStats:
    mean: float
    std: float
    min: float
    max: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    def to_text(self) -> str:
        lines = [f"mean {self.mean:.9g}", f"std {self.std:.9g}",
                 f"min {self.min:.9g}", f"max {self.max:.9g}", "histogram"]
        for lo, hi, n in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
            lines.append(f"{lo:.9g} {hi:.9g} {int(n)}")
        return "\n".join(lines) + "\n"


def map_stats(m, bins: int = 64) -> MapStats:
    """Population mean/std, range and a histogram spanning [min, max]."""
    a = np.asarray(m, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("statistics of an empty map")
    lo, hi = float(a.min()), float(a.max())
    counts, edges = np.histogram(a, bins=bins, range=(lo, hi))
    return MapStats(float(a.mean()), float(a.std()), lo, hi, counts, edges)


def threshold_mask(m, spec: RenderSpec | str = "none") -> np.ndarray:
    """Boolean mask of the pixels kept by a threshold (strict inequalities)."""
    a = np.asarray(m, dtype=np.float64)
    t = parse_threshold(spec.threshold if isinstance(spec, RenderSpec) else spec)
    if t is None:
        return np.ones(a.shape, dtype=bool)
    if t == "pos":
        return a > 0
    return a > a.mean() + t * a.std()


def _as_map(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 3:
        a = a.sum(axis=0)
    if a.ndim != 2:
        raise ShapeError(f"render expects an H x W map, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot render a map with non-finite values")
    return a


def _q(v) -> np.ndarray:
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def render_pixels(m, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """uint8 H x W (grayscale) or H x W x 3 (signed) pixels.

    Grayscale maps [min, max] affinely onto [0, 255]; signed puts positive
    values in red and negative in blue, scaled by the largest magnitude.
    Constant maps render mid-gray. Pixels outside the threshold are black.
    """
    a = _as_map(m)
    lo, hi = a.min(), a.max()
    if spec.colormap == "grayscale":
        px = np.full(a.shape, MID_GRAY, np.uint8) if hi == lo else _q(255.0 * (a - lo) / (hi - lo))
    else:
        if hi == lo:
            px = np.full(a.shape + (3,), MID_GRAY, np.uint8)
        else:
            scale = np.abs(a).max()
            px = np.zeros(a.shape + (3,), np.uint8)
            px[..., 0] = _q(255.0 * np.maximum(a, 0) / scale)
            px[..., 2] = _q(255.0 * np.maximum(-a, 0) / scale)
    keep = threshold_mask(a, spec)
    px[~keep] = 0
    return px


def render(m, spec: RenderSpec = RenderSpec()) -> bytes:
    return encode_pnm(render_pixels(m, spec))


def _rgb(px) -> np.ndarray:
    px = np.asarray(px, dtype=np.uint8)
    return np.repeat(px[..., None], 3, axis=2) if px.ndim == 2 else px


def overlay_pixels(base, m, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """Alpha-blend the rendered map over ``base`` inside the threshold mask.

    ``base`` is uint8 H x W / H x W x 3 pixels or a [0, 1] C x H x W tensor.
    """
    base = np.asarray(base)
    if base.dtype != np.uint8:
        base = tensor_to_pixels(base)
    base = _rgb(base)
    a = _as_map(m)
    if base.shape[:2] != a.shape:
        raise ShapeError(f"overlay extents differ: image {base.shape[:2]}, map {a.shape}")
    top = _rgb(render_pixels(a, spec))
    alpha = spec.overlay_alpha
    blend = _q((1.0 - alpha) * base.astype(np.float64) + alpha * top.astype(np.float64))
    keep = threshold_mask(a, spec)
    out = base.copy()
    out[keep] = blend[keep]
    return out


def overlay(base, m, spec: RenderSpec = RenderSpec()) -> bytes:
    return encode_pnm(overlay_pixels(base, m, spec))
