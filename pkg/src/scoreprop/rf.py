"""Receptive-field arithmetic and Gaussian splatting into input space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ExplanationBundle, ScoreState, channel_sum
from .errors import ConfigError, ShapeError
from .graph import ModelGraph
from .visualize import map_stats

CONVENTIONS = ("paper", "standard")


@dataclass(frozen=True)
class RfEntry:
    """Receptive field of the output units of one layer.

    ``start`` is the input coordinate (row, col) of the RF centre of hidden
    position (0, 0); ``extent`` the hidden spatial extent; ``canvas`` the
    input spatial extent.
    """

    layer: int
    kind: str
    rf: tuple[int, int]
    jump: tuple[int, int]
    start: tuple[float, float]
    extent: tuple[int, int]
    canvas: tuple[int, int]


def compute_rf_table(model: ModelGraph, convention: str = "paper") -> list[RfEntry]:
    """One entry per layer.

    ``standard`` grows the RF by ``(k - 1) * jump`` for convolutions and pools.
    ``paper`` lets pools multiply the jump without adding their own extent.
    Centres are geometric and identical under both conventions.
    """
    if convention not in CONVENTIONS:
        raise ConfigError(f"RF convention must be one of {CONVENTIONS}, got {convention!r}")
    shapes = model.shapes()
    if len(shapes[0]) != 3:
        raise ShapeError("RF table needs a C x H x W input")
    canvas = tuple(shapes[0][1:])
    rf, jump, start = [1, 1], [1, 1], [0.0, 0.0]
    table = []
    for i, layer in enumerate(model.layers):
        in_shape, out_shape = shapes[i], shapes[i + 1]
        k = layer.kind
        if k in ("conv2d", "maxpool", "avgpool"):
            kern, stride = layer.kernel, layer.stride
            pad = layer.pad if k == "conv2d" else (0, 0)
            for ax in range(2):
                if k == "conv2d" or convention == "standard":
                    rf[ax] += (kern[ax] - 1) * jump[ax]
                start[ax] += ((kern[ax] - 1) / 2 - pad[ax]) * jump[ax]
                jump[ax] *= stride[ax]
        elif k == "flatten" and len(in_shape) == 3:
            # a full-extent kernel over the remaining spatial grid
            for ax in range(2):
                rf[ax] += (in_shape[ax + 1] - 1) * jump[ax]
                start[ax] += (in_shape[ax + 1] - 1) / 2 * jump[ax]
        extent = tuple(out_shape[1:]) if len(out_shape) == 3 else (1, 1)
        table.append(RfEntry(i, k, tuple(rf), tuple(jump), tuple(start), extent, canvas))
    return table


def conv_rf_sequence(table: list[RfEntry]) -> list[int]:
    """RF side length after every convolution."""
    return [e.rf[0] for e in table if e.kind == "conv2d"]


def spatial_entries(table: list[RfEntry]) -> list[RfEntry]:
    return [e for e in table if e.kind in ("conv2d", "maxpool", "avgpool")]


def rf_center(entry: RfEntry, pos) -> tuple[float, float]:
    """Input coordinate of the RF centre of hidden ``pos``, clamped to the image."""
    r, c = pos
    if not (0 <= r < entry.extent[0] and 0 <= c < entry.extent[1]):
        raise IndexError(f"hidden position {pos} outside extent {entry.extent}")
    y = entry.start[0] + r * entry.jump[0]
    x = entry.start[1] + c * entry.jump[1]
    return (min(max(y, 0.0), entry.canvas[0] - 1.0), min(max(x, 0.0), entry.canvas[1] - 1.0))


@dataclass(frozen=True)
class SplatConfig:
    """sigma = RF / sigma_div per axis; truncation at the RF square."""

    sigma_div: float = 2.0
    renormalize: bool = True
    convention: str = "paper"

    def __post_init__(self):
        if not self.sigma_div > 0:
            raise ConfigError(f"sigma divisor must be positive, got {self.sigma_div}")
        if self.convention not in CONVENTIONS:
            raise ConfigError(f"RF convention must be one of {CONVENTIONS}, got {self.convention!r}")


def _axis_kernel(n_hidden, start, jump, rf, n_canvas, sigma_div):
    """(n_hidden, n_canvas) truncated Gaussian weights along one axis."""
    centers = np.clip(start + np.arange(n_hidden) * jump, 0.0, n_canvas - 1.0)
    d = np.arange(n_canvas)[None, :] - centers[:, None]
    sigma = rf / sigma_div
    g = np.exp(-0.5 * (d / sigma) ** 2)
    g[np.abs(d) > rf / 2] = 0.0
    return g, sigma


def gaussian_splat(m, entry: RfEntry, cfg: SplatConfig = SplatConfig(), canvas=None) -> np.ndarray:
    """Spread each hidden value over its RF square as a 2D Gaussian.

    With ``renormalize`` every unit's truncated, canvas-clipped kernel has
    discrete mass exactly 1, so the canvas total equals the map total. The
    Gaussian and its clipping rectangle are separable, which reduces the
    splat to ``Gy.T @ (m / (my x mx)) @ Gx``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3:
        m = m.sum(axis=0)
    if m.shape != tuple(entry.extent):
        raise ShapeError(f"map shape {m.shape} does not match layer extent {entry.extent}")
    H, W = entry.canvas if canvas is None else canvas
    gy, sy = _axis_kernel(m.shape[0], entry.start[0], entry.jump[0], entry.rf[0], H, cfg.sigma_div)
    gx, sx = _axis_kernel(m.shape[1], entry.start[1], entry.jump[1], entry.rf[1], W, cfg.sigma_div)
    if cfg.renormalize:
        weights = m / np.outer(gy.sum(axis=1), gx.sum(axis=1))
    else:
        weights = m / (2.0 * np.pi * sy * sx)
    return gy.T @ weights @ gx


def coverage(entry: RfEntry) -> tuple[slice, slice]:
    """Canvas rectangle covered by the union of the layer's RF squares."""
    out = []
    for ax in range(2):
        n = entry.canvas[ax]
        lo_c = min(max(entry.start[ax], 0.0), n - 1.0)
        hi_c = min(max(entry.start[ax] + (entry.extent[ax] - 1) * entry.jump[ax], 0.0), n - 1.0)
        lo = max(0, int(np.ceil(lo_c - entry.rf[ax] / 2)))
        hi = min(n, int(np.floor(hi_c + entry.rf[ax] / 2)) + 1)
        out.append(slice(lo, hi))
    return out[0], out[1]


def uniform_splat(value: float, entry: RfEntry) -> np.ndarray:
    canvas = np.zeros(entry.canvas)
    ys, xs = coverage(entry)
    region = canvas[ys, xs]
    region += value / region.size
    return canvas


def total_input_map(bundle: ExplanationBundle, cfg: SplatConfig = SplatConfig(), c: int | None = None,
                    table: list[RfEntry] | None = None):
    """Channel-summed input scores plus every layer's splatted constants.

    Returns one H x W map for class ``c``, or a dict over all classes.
    """
    if table is None:
        table = compute_rf_table(bundle.model, cfg.convention)
    if c is None:
        return {k: total_input_map(bundle, cfg, k, table) for k in bundle.classes}
    return state_total_map(bundle.states[c], table, cfg)


def state_total_map(state: ScoreState, table: list[RfEntry], cfg: SplatConfig = SplatConfig()) -> np.ndarray:
    total = channel_sum(state.input_scores).copy()
    for entry, const, res in zip(table, state.constant_maps, state.residuals):
        if np.any(const):
            total += gaussian_splat(const, entry, cfg)
        if res:
            total += uniform_splat(res, entry)
    return total


def mapped_layer_maps(state: ScoreState, table: list[RfEntry], cfg: SplatConfig = SplatConfig(),
                      which: str = "scores") -> list[np.ndarray]:
    """Input-space projection of every layer's score (or constant) map."""
    maps = state.layer_maps if which == "scores" else state.constant_maps
    return [gaussian_splat(m, e, cfg) for m, e in zip(maps, table)]


def attach_total_maps(bundle: ExplanationBundle, cfg: SplatConfig = SplatConfig()) -> ExplanationBundle:
    """Fill ``bundle.total_maps`` and ``bundle.stats`` for every class."""
    maps = total_input_map(bundle, cfg)
    bundle.total_maps.update(maps)
    bundle.stats.update({c: map_stats(m) for c, m in maps.items()})
    return bundle
