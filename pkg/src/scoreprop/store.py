"""Binary model files, score-map files, PPM/PGM images and preprocessing.

Model file layout (all integers little-endian)::

    b"SPMF"  u32 version  u32 manifest_bytes  u64 blob_bytes
    manifest  UTF-8 JSON: version, input_shape, layers, param_elements
    blob      float32 LE parameters, layer order, per-layer name order
              (conv/linear: weight, bias; batchnorm: gamma, beta, mean, var)

Score-map file: b"SMAP", u32 version, u32 C, H, W, then C*H*W float32 LE.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, BlankImageError, ConfigError, FormatError, ImageFormatError,
                     LengthMismatchError, ShapeError, TruncatedBlobError, UnknownLayerError,
                     VersionMismatchError)
from .graph import (LAYER_KINDS, AvgPool, BatchNorm, Conv2d, Dropout, Flatten, Linear, MaxPool,
                    ModelGraph, ReLU, init_params, total_elements)

MODEL_MAGIC = b"SPMF"
MODEL_VERSION = 1
SMAP_MAGIC = b"SMAP"
SMAP_VERSION = 1
_LE_F32 = np.dtype("<f4")


# -- models -----------------------------------------------------------------

def _manifest(model: ModelGraph) -> bytes:
    doc = {
        "version": MODEL_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [{"kind": l.kind, **l.hyper()} for l in model.layers],
        "param_elements": total_elements(model.layers),
    }
    return json.dumps(doc, indent=1).encode("utf-8") + b"\n"


def model_to_bytes(model: ModelGraph) -> bytes:
    manifest = _manifest(model)
    chunks = [np.asarray(p[name], dtype=_LE_F32).tobytes()
              for layer, p in zip(model.layers, model.params) for name in layer.param_shapes()]
    blob = b"".join(chunks)
    header = MODEL_MAGIC + struct.pack("<IIQ", MODEL_VERSION, len(manifest), len(blob))
    return header + manifest + blob


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def _layer_from_record(rec: dict):
    rec = dict(rec)
    kind = rec.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise UnknownLayerError(kind)
    try:
        return LAYER_KINDS[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()})
    except TypeError as e:
        raise FormatError(f"bad hyperparameters for {kind}: {e}") from None


def model_from_bytes(data: bytes) -> ModelGraph:
    if len(data) < 20:
        raise TruncatedBlobError(f"file too short for a model header ({len(data)} bytes)")
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    version, mlen, blen = struct.unpack_from("<IIQ", data, 4)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"model file version {version}, reader supports {MODEL_VERSION}")
    start = 20
    if len(data) < start + mlen:
        raise TruncatedBlobError("manifest truncated")
    try:
        doc = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}") from None
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatchError(f"manifest version {doc.get('version')}, reader supports {MODEL_VERSION}")
    layers = [_layer_from_record(r) for r in doc["layers"]]
    n = total_elements(layers)
    if doc.get("param_elements", n) != n:
        raise LengthMismatchError(f"manifest declares {doc['param_elements']} elements, layers need {n}")
    if blen != 4 * n:
        raise LengthMismatchError(f"blob holds {blen} bytes, manifest layers need {4 * n}")
    blob = data[start + mlen:]
    if len(blob) < blen:
        raise TruncatedBlobError(f"blob truncated: {len(blob)} of {blen} bytes present")
    if len(blob) > blen:
        raise LengthMismatchError(f"{len(blob) - blen} trailing bytes after blob")
    flat = np.frombuffer(blob, dtype=_LE_F32)
    params, off = [], 0
    for layer in layers:
        d = {}
        for name, shape in layer.param_shapes().items():
            size = int(np.prod(shape))
            d[name] = flat[off:off + size].reshape(shape).astype(T.DTYPE)
            off += size
        params.append(d)
    return ModelGraph(tuple(doc["input_shape"]), tuple(layers), tuple(params))


def load_model(path) -> ModelGraph:
    return model_from_bytes(Path(path).read_bytes())


# -- score maps ---------------------------------------------------------------

def scoremap_to_bytes(m) -> bytes:
    a = np.asarray(m)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ShapeError(f"score map must be H x W or C x H x W, got shape {a.shape}")
    if 0 in a.shape:
        raise ShapeError(f"score map extents must be positive, got {a.shape}")
    return SMAP_MAGIC + struct.pack("<IIII", SMAP_VERSION, *a.shape) + a.astype(_LE_F32).tobytes()


def save_scoremap(m, path) -> None:
    Path(path).write_bytes(scoremap_to_bytes(m))


def scoremap_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 20:
        raise TruncatedBlobError("score map shorter than its header")
    if data[:4] != SMAP_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {SMAP_MAGIC!r}")
    version, c, h, w = struct.unpack_from("<IIII", data, 4)
    if version != SMAP_VERSION:
        raise VersionMismatchError(f"score map version {version}, reader supports {SMAP_VERSION}")
    if 0 in (c, h, w):
        raise ShapeError(f"score map extents must be positive, got {(c, h, w)}")
    payload = data[20:]
    if len(payload) < 4 * c * h * w:
        raise TruncatedBlobError(f"payload has {len(payload)} bytes, extents need {4 * c * h * w}")
    if len(payload) != 4 * c * h * w:
        raise LengthMismatchError(f"payload has {len(payload)} bytes, extents need {4 * c * h * w}")
    return np.frombuffer(payload, dtype=_LE_F32).reshape(c, h, w).astype(T.DTYPE)


def load_scoremap(path) -> np.ndarray:
    return scoremap_from_bytes(Path(path).read_bytes())


# -- PPM / PGM ----------------------------------------------------------------

def _header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset of the single whitespace byte that
    ends the last token.
    """
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise ImageFormatError("header ended early")
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    return tokens, i + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode binary PGM/PPM (maxval 255) to uint8 H x W or H x W x 3."""
    (magic, w, h, maxval), off = _header_tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported image magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError("non-numeric header field") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad extents {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} not supported (need 255)")
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    payload = data[off:off + need]
    if len(payload) < need:
        raise ImageFormatError(f"short payload: {len(payload)} of {need} bytes")
    a = np.frombuffer(payload, dtype=np.uint8)
    return a.reshape(h, w) if ch == 1 else a.reshape(h, w, 3)


def encode_pnm(pixels) -> bytes:
    """Encode uint8 H x W (P5) or H x W x 3 (P6)."""
    a = np.ascontiguousarray(pixels, dtype=np.uint8)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"pixels must be H x W or H x W x 3, got {a.shape}")
    return magic + b"\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes()


def load_image(path) -> np.ndarray:
    """Channels-first float32 tensor in [0, 1]."""
    px = decode_pnm(Path(path).read_bytes())
    t = px[None] if px.ndim == 2 else px.transpose(2, 0, 1)
    return (t.astype(np.float32) / np.float32(255.0)).astype(T.DTYPE)


def tensor_to_pixels(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    px = np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if px.shape[0] == 1:
        return px[0]
    if px.shape[0] == 3:
        return px.transpose(1, 2, 0)
    raise ShapeError(f"images have 1 or 3 channels, got {px.shape[0]}")


def save_image(x, path) -> None:
    """Write a [0, 1] C x H x W tensor as PGM (1 channel) or PPM (3 channels)."""
    Path(path).write_bytes(encode_pnm(tensor_to_pixels(x)))


# -- preprocessing --------------------------------------------------------------

def resize_bilinear(x, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in/out - 0.5``,
    clamped to ``[0, in - 1]``; the two nearest source pixels are mixed
    linearly. Resizing to the same extent reproduces the input.
    """
    x = np.asarray(x, dtype=np.float64)

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    ylo, yhi, fy = axis_weights(x.shape[1], out_h)
    xlo, xhi, fx = axis_weights(x.shape[2], out_w)
    rows = x[:, ylo] * (1 - fy)[None, :, None] + x[:, yhi] * fy[None, :, None]
    out = rows[:, :, xlo] * (1 - fx) + rows[:, :, xhi] * fx
    return out.astype(T.DTYPE)


def trim_box(x, threshold: float = 10 / 255) -> tuple[int, int, int, int]:
    """Bounding box (top, bottom, left, right; exclusive ends) of foreground."""
    fg = np.asarray(x).max(axis=0) > threshold
    if not fg.any():
        raise BlankImageError()
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def preprocess_trim_resize(x, target: int = 640, threshold: float = 10 / 255) -> np.ndarray:
    """Crop to the foreground box, zero-pad to square, resize to target x target.

    Padding is split evenly; an odd remainder goes to the bottom/right.
    """
    x = T.as_tensor(x, 3)
    if x.size == 0:
        raise ShapeError("empty image")
    top, bottom, left, right = trim_box(x, threshold)
    crop = x[:, top:bottom, left:right]
    h, w = crop.shape[1:]
    side = max(h, w)
    py, px = side - h, side - w
    sq = np.pad(crop, ((0, 0), (py // 2, py - py // 2), (px // 2, px - px // 2)))
    return resize_bilinear(sq, target, target)


# -- toy models ---------------------------------------------------------------

def toy_layers(blocks: int = 2, channels=(4, 8), input_size: int = 16, in_channels: int = 3,
               classes: int = 5, dropout: float = 0.0):
    channels = tuple(int(c) for c in channels)
    if blocks < 1 or len(channels) != blocks:
        raise ConfigError(f"need one channel count per block: blocks={blocks}, channels={channels}")
    if input_size % (2 ** blocks) or input_size // 2 ** blocks < 2:
        raise ShapeError(f"input size {input_size} does not halve cleanly {blocks} times down to >= 2")
    layers, c_in = [], in_channels
    for c in channels:
        layers += [Conv2d(c_in, c, 3, 1, 1), BatchNorm(c), ReLU(),
                   Conv2d(c, c, 3, 1, 1), BatchNorm(c), ReLU(), MaxPool(2, 2)]
        c_in = c
    head = input_size // 2 ** blocks - 1
    layers += [Conv2d(c_in, c_in, 2, 1, 0), BatchNorm(c_in), ReLU(), AvgPool(head, head), Flatten()]
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(Linear(c_in, classes))
    return layers


def make_toy_model(seed: int = 0, blocks: int = 2, channels=(4, 8), input_size: int = 16,
                   in_channels: int = 3, classes: int = 5, dropout: float = 0.0) -> ModelGraph:
    """Miniature of the preset network with seeded random parameters."""
    layers = toy_layers(blocks, channels, input_size, in_channels, classes, dropout)
    params = init_params(layers, np.random.default_rng(seed))
    return ModelGraph((in_channels, input_size, input_size), tuple(layers), tuple(params))


def random_image(shape, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).random(shape).astype(T.DTYPE)
