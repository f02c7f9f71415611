"""Dense float32 tensors and deterministic forward primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in
channel/height/width order. Every primitive accumulates in float64 and
rounds once to float32 on output, iterating kernel offsets in a fixed
row-major order so repeated calls are bit-identical.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32
ACC = np.float64


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    """Return ``x`` as a contiguous float32 array.

    A leading batch extent of 1 is stripped from rank-4 input.
    """
    a = np.ascontiguousarray(x, dtype=DTYPE)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError(f"batch extent must be 1, got {a.shape[0]}")
        a = a[0]
    if a.ndim > 4:
        raise ShapeError(f"rank {a.ndim} tensor not supported")
    if ndim is not None and a.ndim != ndim:
        raise ShapeError(f"expected rank {ndim} tensor, got shape {a.shape}")
    return a


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def out_extent(size: int, k: int, stride: int, pad: int = 0) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pool_geometry(x, k, stride):
    kh, kw = _pair(k)
    sh, sw = _pair(stride)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError(f"pool kernel {k} / stride {stride} must be positive")
    _, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    return kh, kw, sh, sw, out_extent(h, kh, sh), out_extent(w, kw, sw)


def conv2d_forward(x, weights, bias, stride=1, pad=0) -> np.ndarray:
    x = as_tensor(x, 3)
    weights = np.asarray(weights)
    if weights.ndim != 4:
        raise ShapeError(f"conv weights must be rank 4, got shape {weights.shape}")
    o, c, kh, kw = weights.shape
    if x.shape[0] != c:
        raise ShapeError(f"input channels: input has {x.shape[0]}, weights expect {c}")
    bias = np.asarray(bias)
    if bias.shape != (o,):
        raise ShapeError(f"bias length {bias.shape} does not match out channels {o}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    h, w = x.shape[1:]
    if h + 2 * ph < kh:
        raise ShapeError(f"height: padded extent {h + 2 * ph} smaller than kernel {kh}")
    if w + 2 * pw < kw:
        raise ShapeError(f"width: padded extent {w + 2 * pw} smaller than kernel {kw}")
    oh, ow = out_extent(h, kh, sh, ph), out_extent(w, kw, sw, pw)

    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))).astype(ACC) if (ph or pw) else x.astype(ACC)
    w64 = weights.astype(ACC)
    acc = np.zeros((o, oh * ow), dtype=ACC)
    for dy in range(kh):
        for dx in range(kw):
            win = xp[:, dy:dy + sh * (oh - 1) + 1:sh, dx:dx + sw * (ow - 1) + 1:sw]
            acc += w64[:, :, dy, dx] @ win.reshape(c, -1)
    acc += bias.astype(ACC)[:, None]
    return acc.reshape(o, oh, ow).astype(DTYPE)


def _windows(x, kh, kw, sh, sw, oh, ow):
    """View of shape (C, oh, ow, kh, kw) over the pooling windows."""
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return v[:, :sh * (oh - 1) + 1:sh, :sw * (ow - 1) + 1:sw]


def maxpool2d_forward(x, k, stride) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling. Returns the pooled tensor and the winner index map.

    The index map has shape (C, oh, ow) and holds the flat index
    ``row * W + col`` of the selected input inside its channel plane.
    Ties go to the lowest flat index.
    """
    x = as_tensor(x, 3)
    kh, kw, sh, sw, oh, ow = _pool_geometry(x, k, stride)
    win = _windows(x, kh, kw, sh, sw, oh, ow).reshape(x.shape[0], oh, ow, kh * kw)
    # argmax returns the first maximum; within a window row-major order is
    # increasing flat index, so this is the lowest-index tie break
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    w = x.shape[2]
    rows = np.arange(oh)[:, None] * sh + arg // kw
    cols = np.arange(ow)[None, :] * sw + arg % kw
    index = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out, dtype=DTYPE), index


def avgpool2d_forward(x, k, stride) -> np.ndarray:
    x = as_tensor(x, 3)
    kh, kw, sh, sw, oh, ow = _pool_geometry(x, k, stride)
    acc = np.zeros((x.shape[0], oh, ow), dtype=ACC)
    for dy in range(kh):
        for dx in range(kw):
            acc += x[:, dy:dy + sh * (oh - 1) + 1:sh, dx:dx + sw * (ow - 1) + 1:sw]
    return (acc / (kh * kw)).astype(DTYPE)


def bn_sigma(var, eps) -> np.ndarray:
    """The normalizing denominator sqrt(var + eps), in float64."""
    return np.sqrt(np.asarray(var, dtype=ACC) + ACC(eps))


def batchnorm_forward(x, gamma, beta, mean, var, eps=1e-5) -> np.ndarray:
    x = as_tensor(x)
    c = x.shape[0]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.shape(v) != (c,):
            raise ShapeError(f"batchnorm {name} has shape {np.shape(v)}, input has {c} channels")
    if np.any(np.asarray(var) < 0):
        raise ShapeError("batchnorm variance must be non-negative")
    bshape = (c,) + (1,) * (x.ndim - 1)
    sigma = bn_sigma(var, eps).reshape(bshape)
    g = np.asarray(gamma, dtype=ACC).reshape(bshape)
    b = np.asarray(beta, dtype=ACC).reshape(bshape)
    m = np.asarray(mean, dtype=ACC).reshape(bshape)
    return (b + g * ((x.astype(ACC) - m) / sigma)).astype(DTYPE)


def relu_forward(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, DTYPE(0))


def dropout_forward(x, p: float) -> np.ndarray:
    """Inference-time dropout: scale by (1 - p), non-inverted convention."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    return (x.astype(ACC) * (1.0 - p)).astype(DTYPE)


def linear_forward(x, weights, bias) -> np.ndarray:
    x = as_tensor(x, 1)
    weights = np.asarray(weights)
    if weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: input length {x.shape[0]} does not match weights {weights.shape}")
    if np.shape(bias) != (weights.shape[0],):
        raise ShapeError(f"linear: bias shape {np.shape(bias)} does not match {weights.shape[0]} outputs")
    out = weights.astype(ACC) @ x.astype(ACC) + np.asarray(bias, dtype=ACC)
    return out.astype(DTYPE)


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=ACC)
    e = np.exp(s - s.max())
    return e / e.sum()
