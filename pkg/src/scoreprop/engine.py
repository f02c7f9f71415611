"""Backward score propagation with an input-dependent / constant split.

Every unit carries a score ``S = lam * a``. Walking from the class output
back to the image, each layer splits its output score into a part that
is linear in its input activation (propagated through ``lam``) and a
constant part ``S_k`` that stays with the layer. For a class ``c`` the
logit is recovered exactly as

    logit_c = sum(input scores) + sum_l (sum S_k^(l) + residual^(l))

All propagation runs in float64 on top of the float32 forward tape.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .graph import ForwardTape, ModelGraph

ACC = np.float64
AVGPOOL_MODES = ("paper-equal", "linear")


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=ACC)


def _check_same(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def init_class_score(logits, c: int) -> np.ndarray:
    """Seed multiplier: one at output ``c``, zero elsewhere."""
    logits = np.asarray(logits).reshape(-1)
    if not 0 <= int(c) < logits.size:
        raise ConfigError(f"class index {c} outside 0..{logits.size - 1}")
    lam = np.zeros(logits.size, dtype=ACC)
    lam[int(c)] = 1.0
    return lam


def score_linear(lam_out, weights, bias, a_in=None):
    """Fully connected split: the bias becomes the layer's constant score."""
    lam_out = _f64(lam_out)
    w = _f64(weights)
    if w.ndim != 2 or w.shape[0] != lam_out.shape[0]:
        raise ShapeError(f"score_linear: lambda length {lam_out.shape} does not match weights {w.shape}")
    if a_in is not None and np.shape(a_in) != (w.shape[1],):
        raise ShapeError(f"score_linear: input length {np.shape(a_in)} does not match weights {w.shape}")
    return w.T @ lam_out, lam_out * _f64(bias)


def conv_transpose(lam_out, weights, in_shape, stride=1, pad=0) -> np.ndarray:
    """Scatter output multipliers back onto the input grid through the kernel.

    Contributions that land on the zero padding are dropped.
    """
    lam_out = _f64(lam_out)
    w = _f64(weights)
    o, c, kh, kw = w.shape
    sh, sw = T._pair(stride)
    ph, pw = T._pair(pad)
    _, h, wd = in_shape
    oh, ow = lam_out.shape[1:]
    if lam_out.shape[0] != o:
        raise ShapeError(f"conv_transpose: lambda has {lam_out.shape[0]} channels, kernel has {o} outputs")
    if (oh, ow) != (T.out_extent(h, kh, sh, ph), T.out_extent(wd, kw, sw, pw)):
        raise ShapeError(f"conv_transpose: lambda extent {(oh, ow)} does not match forward geometry")
    flat = lam_out.reshape(o, -1)
    acc = np.zeros((c, h + 2 * ph, wd + 2 * pw), dtype=ACC)
    for dy in range(kh):
        for dx in range(kw):
            acc[:, dy:dy + sh * (oh - 1) + 1:sh, dx:dx + sw * (ow - 1) + 1:sw] += \
                (w[:, :, dy, dx].T @ flat).reshape(c, oh, ow)
    return acc[:, ph:ph + h, pw:pw + wd]


def score_conv(lam_out, weights, bias, a_in, stride=1, pad=0):
    """Convolution split: inputs collect kernel-weighted multipliers, bias stays."""
    lam_out = _f64(lam_out)
    a_in = np.asarray(a_in)
    if a_in.ndim != 3 or a_in.shape[0] != np.shape(weights)[1]:
        raise ShapeError(f"score_conv: input shape {a_in.shape} does not match weights {np.shape(weights)}")
    lam_in = conv_transpose(lam_out, weights, a_in.shape, stride, pad)
    s_k = lam_out * _f64(bias)[:, None, None]
    return lam_in, s_k


def _bn_affine(gamma, beta, mean, var, eps, ndim):
    shape = (-1,) + (1,) * (ndim - 1)
    sigma = T.bn_sigma(var, eps)
    scale = _f64(gamma) / sigma
    shift = _f64(beta) - _f64(gamma) * _f64(mean) / sigma
    return scale.reshape(shape), shift.reshape(shape)


def score_batchnorm(lam_out, gamma, beta, mean, var, eps=1e-5, a_in=None):
    """Batchnorm split: lam_in = lam * gamma/sigma, S_k = lam * (beta - gamma*mu/sigma)."""
    lam_out = _f64(lam_out)
    if a_in is not None:
        _check_same(lam_out, a_in, "score_batchnorm")
    if np.shape(gamma) != (lam_out.shape[0],):
        raise ShapeError(f"score_batchnorm: {np.shape(gamma)} parameters for {lam_out.shape[0]} channels")
    scale, shift = _bn_affine(gamma, beta, mean, var, eps, lam_out.ndim)
    return lam_out * scale, lam_out * shift


def score_relu(lam_out, a_in):
    """Pass-through on active units; ``a_in == 0`` counts as inactive."""
    lam_out = _f64(lam_out)
    _check_same(lam_out, a_in, "score_relu")
    return np.where(np.asarray(a_in) > 0, lam_out, 0.0), np.zeros_like(lam_out)


def score_activation_taylor(lam_out, a_in, phi: Callable, dphi: Callable):
    """First-order split of a smooth activation, expanded at the recorded input.

    S_k = lam * (phi(a) - phi'(a) a) and lam_in = lam * phi'(a). Exact for the
    analysed input because the expansion point is ``a_in`` itself.
    """
    lam_out = _f64(lam_out)
    a = _f64(a_in)
    _check_same(lam_out, a, "score_activation_taylor")
    f, df = _f64(phi(a)), _f64(dphi(a))
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(df))):
        raise ValueError("activation or its derivative is not finite at the expansion point")
    return lam_out * df, lam_out * (f - df * a)


def score_maxpool(lam_out, index, a_in, kernel=None, stride=None):
    """Copy each output's multiplier onto its recorded winner.

    When ``kernel``/``stride`` are given, every index is checked against its
    window and a stale map raises ``ValueError``.
    """
    lam_out = _f64(lam_out)
    index = np.asarray(index)
    _check_same(lam_out, index, "score_maxpool")
    c, h, w = np.shape(a_in)
    if kernel is not None:
        (kh, kw), (sh, sw) = T._pair(kernel), T._pair(kernel if stride is None else stride)
        oh, ow = index.shape[1:]
        rows, cols = index // w, index % w
        r0 = (np.arange(oh) * sh)[None, :, None]
        c0 = (np.arange(ow) * sw)[None, None, :]
        ok = (rows >= r0) & (rows < r0 + kh) & (cols >= c0) & (cols < c0 + kw)
        if not ok.all():
            raise ValueError("max-pool index map does not belong to this forward pass (index outside its window)")
    elif index.size and (index.min() < 0 or index.max() >= h * w):
        raise ValueError("max-pool index map out of range for this input")
    plane = (np.arange(c) * (h * w))[:, None, None]
    lam_in = np.bincount((index + plane).ravel(), weights=lam_out.ravel(), minlength=c * h * w)
    return lam_in.reshape(c, h, w), np.zeros_like(lam_out)


def score_avgpool(lam_out, a_in, kernel, stride=None, mode="paper-equal", a_out=None):
    """Average-pool split. Returns ``(lam_in, S_k, residual)``.

    ``linear``: every window input gets ``lam_out / N`` (score proportional
    to activation). ``paper-equal``: each of the N inputs receives an equal
    share ``S_out / N``; the share of a zero activation has no multiplier to
    carry it and is returned as ``residual`` instead. ``a_out`` defaults to
    the float64 window mean; pass the taped output for exact bookkeeping.
    """
    if mode not in AVGPOOL_MODES:
        raise ConfigError(f"avgpool mode must be one of {AVGPOOL_MODES}, got {mode!r}")
    lam_out = _f64(lam_out)
    a_in = np.asarray(a_in)
    kh, kw = T._pair(kernel)
    sh, sw = T._pair(kernel if stride is None else stride)
    n = kh * kw
    c, h, w = a_in.shape
    oh, ow = lam_out.shape[1:]
    if (oh, ow) != (T.out_extent(h, kh, sh), T.out_extent(w, kw, sw)):
        raise ShapeError("score_avgpool: lambda extent does not match forward geometry")

    windows = [(slice(dy, dy + sh * (oh - 1) + 1, sh), slice(dx, dx + sw * (ow - 1) + 1, sw))
               for dy in range(kh) for dx in range(kw)]
    per_input = lam_out / n
    if mode == "paper-equal":
        if a_out is None:
            a64 = _f64(a_in)
            a_out = sum(a64[:, ys, xs] for ys, xs in windows) / n
        per_input = lam_out * _f64(a_out) / n  # score share per window input

    acc = np.zeros((c, h, w), dtype=ACC)
    for ys, xs in windows:
        acc[:, ys, xs] += per_input
    s_k = np.zeros_like(lam_out)
    if mode == "linear":
        return acc, s_k, 0.0
    a64 = _f64(a_in)
    live = a64 != 0
    lam_in = np.zeros_like(acc)
    np.divide(acc, a64, out=lam_in, where=live)
    residual = float(acc[~live].sum())
    return lam_in, s_k, residual


def score_dropout(lam_out, p: float):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    lam_out = _f64(lam_out)
    return lam_out * (1.0 - p), np.zeros_like(lam_out)


def score_fused_block(lam_out, weight, bias, gamma, beta, mean, var, eps, relu_mask, a_in,
                      stride=1, pad=0):
    """conv -> batchnorm -> ReLU treated as one unit.

    S_k = lam * (beta + gamma (b - mu) / sigma) on active units and
    lam_in = conv_transpose(lam * gamma / sigma); identical to chaining the
    three single-layer rules.
    """
    lam_out = _f64(lam_out)
    _check_same(lam_out, relu_mask, "score_fused_block")
    lam = np.where(np.asarray(relu_mask) > 0, lam_out, 0.0)
    sigma = T.bn_sigma(var, eps)
    g = _f64(gamma)
    scale = (g / sigma)[:, None, None]
    const = (_f64(beta) + g * (_f64(bias) - _f64(mean)) / sigma)[:, None, None]
    lam_in = conv_transpose(lam * scale, weight, np.shape(a_in), stride, pad)
    return lam_in, lam * const


def channel_sum(a) -> np.ndarray:
    """Spatial map of a C x H x W tensor; vectors count as C x 1 x 1."""
    a = _f64(a)
    if a.ndim == 1:
        return np.array([[a.sum()]])
    if a.ndim == 2:
        return a
    return a.sum(axis=0)


@dataclass
class ScoreState:
    """Propagation result for one target class.

    Per-layer lists are indexed by layer; entry ``l`` describes the output of
    layer ``l``. ``lambdas``/``scores``/``constants`` hold full tensors only
    when the state was built with ``keep_tensors=True``.
    """

    target: int
    logit: float
    input_lambda: np.ndarray
    input_scores: np.ndarray
    layer_maps: list[np.ndarray]
    constant_maps: list[np.ndarray]
    constant_totals: np.ndarray
    residuals: np.ndarray
    feature_scores: np.ndarray | None = None
    lambdas: list[np.ndarray] | None = None
    scores: list[np.ndarray] | None = None
    constants: list[np.ndarray] | None = None

    @property
    def input_total(self) -> float:
        return float(self.input_scores.sum())

    @property
    def constant_total(self) -> float:
        return float(self.constant_totals.sum() + self.residuals.sum())

    @property
    def total(self) -> float:
        return self.input_total + self.constant_total

    def conservation_error(self) -> float:
        """|logit - total| / max(1, |logit|)."""
        return abs(self.logit - self.total) / max(1.0, abs(self.logit))


def layer_score_map(state: ScoreState, l: int) -> np.ndarray:
    if not -len(state.layer_maps) <= l < len(state.layer_maps):
        raise IndexError(f"layer {l} out of range")
    return state.layer_maps[l]


def _propagate_layer(layer, p, lam, a_in, a_out, pool_index, avgpool_mode):
    k = layer.kind
    if k == "linear":
        return (*score_linear(lam, p["weight"], p["bias"], a_in), 0.0)
    if k == "conv2d":
        return (*score_conv(lam, p["weight"], p["bias"], a_in, layer.stride, layer.pad), 0.0)
    if k == "batchnorm":
        return (*score_batchnorm(lam, p["gamma"], p["beta"], p["mean"], p["var"], layer.eps, a_in), 0.0)
    if k == "relu":
        return (*score_relu(lam, a_in), 0.0)
    if k == "maxpool":
        return (*score_maxpool(lam, pool_index, a_in), 0.0)
    if k == "avgpool":
        return score_avgpool(lam, a_in, layer.kernel, layer.stride, avgpool_mode, a_out)
    if k == "dropout":
        return (*score_dropout(lam, layer.p), 0.0)
    if k == "flatten":
        return _f64(lam).reshape(np.shape(a_in)), np.zeros(np.shape(lam)), 0.0
    raise ConfigError(f"score propagation does not support layer kind {k!r}")


def propagate(model: ModelGraph, tape: ForwardTape, c: int, avgpool_mode="paper-equal",
              keep_tensors=True, seed_scale: float = 1.0) -> ScoreState:
    """Run the per-layer split rules from class ``c`` down to the input."""
    if len(tape) != len(model):
        raise ShapeError(f"tape has {len(tape)} layers, model has {len(model)}")
    if avgpool_mode not in AVGPOOL_MODES:
        raise ConfigError(f"avgpool mode must be one of {AVGPOOL_MODES}, got {avgpool_mode!r}")
    n = len(model)
    lam = init_class_score(tape.logits, c) * seed_scale
    layer_maps: list = [None] * n
    constant_maps: list = [None] * n
    constant_totals = np.zeros(n)
    residuals = np.zeros(n)
    lambdas = [None] * n if keep_tensors else None
    scores = [None] * n if keep_tensors else None
    constants = [None] * n if keep_tensors else None
    feature_scores = None
    last_linear = max((i for i, l in enumerate(model.layers) if l.kind == "linear"), default=None)

    for l in range(n - 1, -1, -1):
        layer, p = model.layers[l], model.params[l]
        a_in, a_out = tape.activations[l], tape.activations[l + 1]
        s = lam * a_out
        layer_maps[l] = channel_sum(s)
        lam_in, s_k, res = _propagate_layer(layer, p, lam, a_in, a_out, tape.pool_indices.get(l), avgpool_mode)
        constant_maps[l] = channel_sum(s_k)
        constant_totals[l] = s_k.sum()
        residuals[l] = res
        if keep_tensors:
            lambdas[l], scores[l], constants[l] = lam, s, s_k
        if l == last_linear:
            feature_scores = lam_in * _f64(a_in)
        lam = lam_in

    x = tape.activations[0]
    return ScoreState(
        target=int(c), logit=float(tape.logits[c]) * seed_scale,
        input_lambda=lam, input_scores=lam * _f64(x),
        layer_maps=layer_maps, constant_maps=constant_maps,
        constant_totals=constant_totals, residuals=residuals,
        feature_scores=feature_scores, lambdas=lambdas, scores=scores, constants=constants,
    )


@dataclass
class ExplanationBundle:
    """Per-class explanation of one image, before and after input-space mapping."""

    model: ModelGraph
    logits: np.ndarray
    avgpool_mode: str
    states: dict[int, ScoreState]
    total_maps: dict[int, np.ndarray] = field(default_factory=dict)
    stats: dict[int, object] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.states)

    def input_map(self, c: int) -> np.ndarray:
        return self.states[c].input_scores

    def totals(self) -> dict[int, float]:
        return {c: s.total for c, s in sorted(self.states.items())}


def thread_count() -> int:
    """Worker cap from SCOREPROP_THREADS (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("SCOREPROP_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def explain(model: ModelGraph, tape: ForwardTape, classes: Iterable[int] | None = None,
            avgpool_mode="paper-equal", keep_tensors=True, threads: int | None = None) -> ExplanationBundle:
    """Propagate every requested class over a shared, read-only tape."""
    if classes is None:
        classes = range(tape.logits.size)
    classes = sorted(set(int(c) for c in classes))
    for c in classes:
        init_class_score(tape.logits, c)
    workers = min(threads or thread_count(), len(classes)) or 1

    def run(c):
        return propagate(model, tape, c, avgpool_mode, keep_tensors)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, classes))
    else:
        results = [run(c) for c in classes]
    return ExplanationBundle(model, np.array(tape.logits), avgpool_mode, dict(zip(classes, results)))


@dataclass
class FusedBlock:
    """conv -> batchnorm -> ReLU block in the layer numbering used for figures."""

    number: int
    conv: int
    relu: int
    score_map: np.ndarray
    constant_map: np.ndarray


def block_view(model: ModelGraph, state: ScoreState) -> list[FusedBlock]:
    """Group conv/bn/relu triples; block ``number`` counts from 1 at the input."""
    blocks = []
    kinds = [l.kind for l in model.layers]
    for i in range(len(kinds) - 2):
        if kinds[i:i + 3] == ["conv2d", "batchnorm", "relu"]:
            const = state.constant_maps[i] + state.constant_maps[i + 1] + state.constant_maps[i + 2]
            blocks.append(FusedBlock(len(blocks) + 1, i, i + 2, state.layer_maps[i + 2], const))
    return blocks
