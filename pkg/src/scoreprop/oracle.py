"""Brute-force verifiers for the score engine.

Nothing here calls the engine's backward rules or the tensor-core
primitives: the harness carries its own batched float64 forward pass,
which it runs either freely or with ReLU masks and max-pool winners
frozen to those of a reference input. A frozen piecewise-linear network
is affine in its input, ``logit = g . x + K``, and ``g``/``K`` can be read
off with forward passes alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import explain
from .errors import ConfigError
from .graph import ModelGraph, forward_with_tape
from .rf import SplatConfig, attach_total_maps

PIECEWISE_LINEAR = {"conv2d", "batchnorm", "relu", "maxpool", "avgpool", "dropout", "flatten", "linear"}


def _windows(xs, kh, kw, sh, sw):
    n, c, h, w = xs.shape
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    v = np.lib.stride_tricks.sliding_window_view(xs, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw][:, :, :oh, :ow].reshape(n, c, oh, ow, kh * kw), oh, ow


def _run(model: ModelGraph, xs, pattern=None, upto=None):
    """Batched float64 forward over ``xs`` of shape (N, *input_shape).

    With ``pattern`` the ReLU masks / pool winners are taken from it;
    otherwise they are computed and returned (each with a leading N axis).
    """
    a = np.asarray(xs, dtype=np.float64)
    n = a.shape[0]
    seen = {}
    last = len(model.layers) - 1 if upto is None else upto
    for l, (layer, p) in enumerate(zip(model.layers, model.params)):
        if l > last:
            break
        k = layer.kind
        if k == "conv2d":
            w = np.asarray(p["weight"], dtype=np.float64)
            (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.pad
            ap = np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            oh = (ap.shape[2] - kh) // sh + 1
            ow = (ap.shape[3] - kw) // sw + 1
            out = np.zeros((n, w.shape[0], oh, ow))
            for dy in range(kh):
                for dx in range(kw):
                    patch = ap[:, :, dy::sh, dx::sw][:, :, :oh, :ow]
                    out += np.einsum("oc,nchw->nohw", w[:, :, dy, dx], patch)
            a = out + np.asarray(p["bias"], dtype=np.float64)[None, :, None, None]
        elif k == "batchnorm":
            shape = (1, -1) + (1,) * (a.ndim - 2)
            sigma = np.sqrt(np.asarray(p["var"], dtype=np.float64) + layer.eps)
            a = (np.asarray(p["beta"], dtype=np.float64).reshape(shape)
                 + np.asarray(p["gamma"], dtype=np.float64).reshape(shape)
                 * (a - np.asarray(p["mean"], dtype=np.float64).reshape(shape)) / sigma.reshape(shape))
        elif k == "relu":
            mask = pattern[l] if pattern is not None else a > 0
            seen[l] = mask
            a = np.where(mask, a, 0.0)
        elif k == "maxpool":
            (kh, kw), (sh, sw) = layer.kernel, layer.stride
            win, oh, ow = _windows(a, kh, kw, sh, sw)
            if pattern is not None:
                arg = np.broadcast_to(pattern[l], win.shape[:4])
            else:
                arg = np.argmax(win, axis=-1)
            seen[l] = arg
            a = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        elif k == "avgpool":
            (kh, kw), (sh, sw) = layer.kernel, layer.stride
            win, _, _ = _windows(a, kh, kw, sh, sw)
            a = win.mean(axis=-1)
        elif k == "dropout":
            a = a * (1.0 - layer.p)
        elif k == "flatten":
            a = a.reshape(n, -1)
        elif k == "linear":
            a = a @ np.asarray(p["weight"], dtype=np.float64).T + np.asarray(p["bias"], dtype=np.float64)
        else:
            raise ConfigError(f"oracle cannot evaluate layer kind {k!r}")
    return a, seen


def reference_pattern(model: ModelGraph, x):
    """Activation pattern (ReLU masks, pool window winners) at input ``x``."""
    _, seen = _run(model, np.asarray(x, dtype=np.float64)[None])
    return {l: v[0] for l, v in seen.items()}


def frozen_forward(model: ModelGraph, xs, pattern) -> np.ndarray:
    """Logits (N, classes) of the affine network selected by ``pattern``."""
    out, _ = _run(model, xs, pattern)
    return out.reshape(out.shape[0], -1)


def _same_pattern(seen, base, i):
    return all(np.array_equal(seen[l][i], base[l]) for l in base)


@dataclass
class LinearizationResult:
    """``logit = sum(gradient * input) + constant`` for the frozen network.

    ``gradient`` is NaN where it was not computed (sampled mode without a
    full map). ``fd_index``/``fd_gradient`` hold central-difference samples.
    """

    target: int
    logit: float
    gradient: np.ndarray
    constant: float
    fd_index: np.ndarray
    fd_gradient: np.ndarray
    flagged: int = 0


def fd_samples(model, x, c, count, step=1e-3, seed=0, base=None, max_tries=20):
    """Central differences at ``count`` random flat input indices.

    Indices whose ±step perturbation changes the activation pattern are
    flagged and replaced by fresh draws.
    """
    x = np.asarray(x, dtype=np.float64)
    base = reference_pattern(model, x) if base is None else base
    rng = np.random.default_rng(seed)
    kept_i, kept_g, flagged = [], [], 0
    for _ in range(max_tries):
        need = count - len(kept_i)
        if need <= 0:
            break
        idx = rng.choice(x.size, size=min(need, x.size), replace=need > x.size)
        batch = np.repeat(x[None], 2 * idx.size, axis=0).reshape(2 * idx.size, -1)
        rows = np.arange(idx.size)
        batch[2 * rows, idx] += step
        batch[2 * rows + 1, idx] -= step
        out, seen = _run(model, batch.reshape((-1,) + x.shape))
        out = out.reshape(out.shape[0], -1)[:, c]
        for r, i in enumerate(idx):
            if _same_pattern(seen, base, 2 * r) and _same_pattern(seen, base, 2 * r + 1):
                kept_i.append(int(i))
                kept_g.append((out[2 * r] - out[2 * r + 1]) / (2 * step))
            else:
                flagged += 1
    return np.array(kept_i[:count], dtype=np.int64), np.array(kept_g[:count]), flagged


def linearize_at_input(model: ModelGraph, x, c: int, samples: int = 100, step: float = 1e-3,
                       seed: int = 0, full_map: bool | None = None, chunk: int = 256) -> LinearizationResult:
    """Effective gradient and constant of the frozen-pattern affine model at ``x``."""
    bad = {l.kind for l in model.layers} - PIECEWISE_LINEAR
    if bad:
        raise ConfigError(f"linearization needs piecewise-linear layers, found {sorted(bad)}")
    x = np.asarray(x, dtype=np.float64)
    base = reference_pattern(model, x)
    logit = float(frozen_forward(model, x[None], base)[0, c])
    if full_map is None:
        full_map = x.size <= 4096
    k0 = float(frozen_forward(model, np.zeros((1,) + x.shape), base)[0, c])
    grad = np.full(x.size, np.nan)
    if full_map:
        for s in range(0, x.size, chunk):
            idx = np.arange(s, min(s + chunk, x.size))
            basis = np.zeros((idx.size, x.size))
            basis[np.arange(idx.size), idx] = 1.0
            grad[idx] = frozen_forward(model, basis.reshape((-1,) + x.shape), base)[:, c] - k0
        constant = logit - float(np.dot(grad, x.reshape(-1)))
    else:
        constant = k0
    fi, fg, flagged = fd_samples(model, x, c, samples, step, seed, base) if samples else (
        np.zeros(0, np.int64), np.zeros(0), 0)
    return LinearizationResult(int(c), logit, grad.reshape(x.shape), constant, fi, fg, flagged)


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)

    def line(self) -> str:
        return f"{self.name} {self.value:.3e} {self.tol:.1e} {'PASS' if self.passed else 'FAIL'}"


@dataclass
class Report:
    checks: list[Check] = field(default_factory=list)

    def add(self, name, value, tol):
        self.checks.append(Check(name, float(value), float(tol)))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def extend(self, other: "Report"):
        self.checks.extend(other.checks)

    def to_text(self) -> str:
        return "".join(c.line() + "\n" for c in self.checks)


def relative_error(a, b) -> float:
    """|a - b| / max(1, |b|)."""
    return abs(float(a) - float(b)) / max(1.0, abs(float(b)))


def check_conservation(model: ModelGraph, x, classes=None, avgpool_mode="paper-equal",
                       cfg: SplatConfig = SplatConfig(), engine_tol=1e-4, mapped_tol=1e-3,
                       label="") -> Report:
    """Compare each class logit with the engine total and the mapped-map sum."""
    tape = forward_with_tape(model, x)
    bundle = explain(model, tape, classes, avgpool_mode, keep_tensors=False)
    attach_total_maps(bundle, cfg)
    report = Report()
    prefix = f"{label}:" if label else ""
    for c, state in sorted(bundle.states.items()):
        logit = float(tape.logits[c])
        report.add(f"{prefix}conservation_engine[c{c}]", relative_error(state.total, logit), engine_tol)
        report.add(f"{prefix}conservation_mapped[c{c}]",
                   relative_error(bundle.total_maps[c].sum(), logit), mapped_tol)
    return report


def check_gradient(model: ModelGraph, x, c: int, samples=100, tol=1e-3, seed=0, label="") -> Report:
    """Engine input multipliers (linear avg-pool mode) against the linearization oracle."""
    tape = forward_with_tape(model, x)
    state = explain(model, tape, [c], "linear", keep_tensors=False).states[c]
    lin = linearize_at_input(model, x, c, samples=samples, seed=seed)
    lam = state.input_lambda.reshape(-1)
    prefix = f"{label}:" if label else ""
    report = Report()
    if lin.fd_index.size:
        got = lam[lin.fd_index]
        err = np.abs(got - lin.fd_gradient) / np.maximum(np.abs(lin.fd_gradient), 1e-9)
        report.add(f"{prefix}fd_gradient[c{c}]", err.max(), tol)
    report.add(f"{prefix}constant[c{c}]", relative_error(state.constant_total, lin.constant), tol)
    return report


@dataclass(frozen=True)
class Box:
    """Inclusive input-pixel bounding box."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def size(self) -> tuple[int, int]:
        return self.bottom - self.top + 1, self.right - self.left + 1


def rf_footprint(model: ModelGraph, layer: int, position, probes: int = 3, magnitude: float = 1e3,
                 seed: int = 0) -> Box | None:
    """Bounding box of input pixels whose perturbation changes one unit.

    The unit is spatial position ``position`` of layer ``layer``'s output
    (any channel). Every pixel is pushed by ±``magnitude`` on a few random
    base images; large pushes defeat max-pool and ReLU gating.
    """
    c, h, w = model.input_shape
    r0, c0 = position
    rng = np.random.default_rng(seed)
    hit = np.zeros((h, w), dtype=bool)

    def unit(out):
        return out[:, :, r0, c0] if out.ndim == 4 else out

    for _ in range(probes):
        x = rng.random((c, h, w))
        ref = unit(_run(model, x[None], upto=layer)[0])[0]
        for sign in (1.0, -1.0):
            batch = np.repeat(x[None], h * w, axis=0)
            rows, cols = np.divmod(np.arange(h * w), w)
            batch[np.arange(h * w), :, rows, cols] += sign * magnitude
            out = unit(_run(model, batch, upto=layer)[0])
            hit |= np.any(out != ref, axis=1).reshape(h, w)
    if not hit.any():
        return None
    rs, cs = np.flatnonzero(hit.any(axis=1)), np.flatnonzero(hit.any(axis=0))
    return Box(int(rs[0]), int(rs[-1]), int(cs[0]), int(cs[-1]))
