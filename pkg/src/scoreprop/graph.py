"""Sequential model container, taped forward execution and the DR preset."""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import ClassVar, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

Shape = tuple[int, ...]


def _pair(v) -> tuple[int, int]:
    return T._pair(v)


@dataclass(frozen=True)
class LayerSpec:
    kind: ClassVar[str] = ""

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def trainable(self) -> tuple[str, ...]:
        return tuple(self.param_shapes())

    def hyper(self) -> dict:
        """Hyperparameters as plain JSON-ready values."""
        return {}


def _spatial(in_shape, kind):
    if len(in_shape) != 3:
        raise ShapeError(f"{kind} expects a C x H x W input, got shape {in_shape}")
    return in_shape


@dataclass(frozen=True)
class Conv2d(LayerSpec):
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    kind: ClassVar[str] = "conv2d"

    def __post_init__(self):
        for name in ("kernel", "stride", "pad"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.pad) < 0:
            raise ConfigError(f"conv2d: bad geometry kernel={self.kernel} stride={self.stride} pad={self.pad}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("conv2d: channel counts must be positive")

    def out_shape(self, in_shape):
        c, h, w = _spatial(in_shape, self.kind)
        if c != self.in_channels:
            raise ShapeError(f"conv2d: input has {c} channels, layer expects {self.in_channels}")
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.pad
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
        return (self.out_channels, T.out_extent(h, kh, sh, ph), T.out_extent(w, kw, sw, pw))

    def param_shapes(self):
        return {"weight": (self.out_channels, self.in_channels) + self.kernel,
                "bias": (self.out_channels,)}

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": list(self.kernel), "stride": list(self.stride), "pad": list(self.pad)}


@dataclass(frozen=True)
class BatchNorm(LayerSpec):
    channels: int
    eps: float = 1e-5
    kind: ClassVar[str] = "batchnorm"

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"batchnorm: eps must be positive, got {self.eps}")

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"batchnorm: input has {in_shape[0]} channels, layer expects {self.channels}")
        return in_shape

    def param_shapes(self):
        c = (self.channels,)
        return {"gamma": c, "beta": c, "mean": c, "var": c}

    def trainable(self):
        return ("gamma", "beta")

    def hyper(self):
        return {"channels": self.channels, "eps": self.eps}


@dataclass(frozen=True)
class ReLU(LayerSpec):
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class _Pool(LayerSpec):
    kernel: tuple[int, int] = (2, 2)
    stride: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.kernel if self.stride is None else self.stride))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigError(f"{self.kind}: kernel and stride must be positive")

    def out_shape(self, in_shape):
        c, h, w = _spatial(in_shape, self.kind)
        (kh, kw), (sh, sw) = self.kernel, self.stride
        if kh > h or kw > w:
            raise ShapeError(f"{self.kind}: window {kh}x{kw} larger than input {h}x{w}")
        return (c, T.out_extent(h, kh, sh), T.out_extent(w, kw, sw))

    def hyper(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}


@dataclass(frozen=True)
class MaxPool(_Pool):
    kind: ClassVar[str] = "maxpool"


@dataclass(frozen=True)
class AvgPool(_Pool):
    kind: ClassVar[str] = "avgpool"


@dataclass(frozen=True)
class Dropout(LayerSpec):
    p: float = 0.5
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p}")

    def hyper(self):
        return {"p": self.p}


@dataclass(frozen=True)
class Flatten(LayerSpec):
    kind: ClassVar[str] = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True)
class Linear(LayerSpec):
    in_features: int
    out_features: int
    kind: ClassVar[str] = "linear"

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"linear: input shape {in_shape}, layer expects ({self.in_features},)")
        return (self.out_features,)

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}


LAYER_KINDS: dict[str, type[LayerSpec]] = {
    cls.kind: cls for cls in (Conv2d, BatchNorm, ReLU, MaxPool, AvgPool, Dropout, Flatten, Linear)
}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=T.DTYPE, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelGraph:
    """Immutable sequential model: layer specs, their parameters, input shape."""

    input_shape: Shape
    layers: tuple[LayerSpec, ...]
    params: tuple[Mapping[str, np.ndarray], ...] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.params) != len(self.layers):
            raise ShapeError(f"{len(self.layers)} layers but {len(self.params)} parameter sets")
        frozen = []
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            expected = layer.param_shapes()
            if set(p) != set(expected):
                raise ShapeError(f"layer {i} ({layer.kind}): parameters {sorted(p)}, expected {sorted(expected)}")
            d = {}
            for name, shape in expected.items():
                arr = np.asarray(p[name])
                if arr.shape != shape:
                    raise ShapeError(f"layer {i} ({layer.kind}): {name} has shape {arr.shape}, expected {shape}")
                d[name] = _freeze(arr)
            if layer.kind == "batchnorm" and np.any(d["var"] < 0):
                raise ShapeError(f"layer {i} (batchnorm): negative running variance")
            frozen.append(MappingProxyType(d))
        object.__setattr__(self, "params", tuple(frozen))
        # validates composition eagerly
        self.shapes()

    def __len__(self):
        return len(self.layers)

    def shapes(self) -> list[Shape]:
        """Symbolic shape trace: ``[input, out_0, out_1, ...]``."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                out.append(tuple(layer.out_shape(out[-1])))
            except ShapeError as e:
                raise ShapeError(f"layer {i}: {e}") from None
        return out

    @property
    def output_shape(self) -> Shape:
        return self.shapes()[-1]


@dataclass
class ForwardTape:
    """Activations recorded during one forward pass.

    ``activations[0]`` is the input; ``activations[l + 1]`` is the output
    of layer ``l`` (and the input of layer ``l + 1``).
    """

    activations: list[np.ndarray]
    pool_indices: dict[int, np.ndarray]
    logits: np.ndarray

    def __len__(self):
        return len(self.activations) - 1

    def layer_input(self, l: int) -> np.ndarray:
        return self.activations[l]

    def layer_output(self, l: int) -> np.ndarray:
        return self.activations[l + 1]


def apply_layer(layer: LayerSpec, p: Mapping[str, np.ndarray], x: np.ndarray):
    """Run one layer. Returns ``(output, pool_index_or_None)``."""
    k = layer.kind
    if k == "conv2d":
        return T.conv2d_forward(x, p["weight"], p["bias"], layer.stride, layer.pad), None
    if k == "batchnorm":
        return T.batchnorm_forward(x, p["gamma"], p["beta"], p["mean"], p["var"], layer.eps), None
    if k == "relu":
        return T.relu_forward(x), None
    if k == "maxpool":
        return T.maxpool2d_forward(x, layer.kernel, layer.stride)
    if k == "avgpool":
        return T.avgpool2d_forward(x, layer.kernel, layer.stride), None
    if k == "dropout":
        return T.dropout_forward(x, layer.p), None
    if k == "flatten":
        return np.ascontiguousarray(x.reshape(-1)), None
    if k == "linear":
        return T.linear_forward(x, p["weight"], p["bias"]), None
    raise ConfigError(f"unsupported layer kind {k!r}")


def _check_input(model: ModelGraph, x) -> np.ndarray:
    x = T.as_tensor(x)
    if tuple(x.shape) != model.input_shape:
        raise ShapeError(f"input shape {tuple(x.shape)} does not match model input {model.input_shape}")
    return x


def forward_with_tape(model: ModelGraph, x) -> ForwardTape:
    x = _check_input(model, x)
    acts = [x]
    pools = {}
    for i, (layer, p) in enumerate(zip(model.layers, model.params)):
        out, idx = apply_layer(layer, p, acts[-1])
        if idx is not None:
            pools[i] = idx
        acts.append(out)
    return ForwardTape(acts, pools, acts[-1].reshape(-1).copy())


def forward(model: ModelGraph, x) -> np.ndarray:
    """Logits only; keeps a single activation alive at a time."""
    a = _check_input(model, x)
    for layer, p in zip(model.layers, model.params):
        a, _ = apply_layer(layer, p, a)
    return a.reshape(-1)


def param_count(model: ModelGraph) -> int:
    """Trainable element count (weights, biases, gamma, beta)."""
    n = 0
    for layer in model.layers:
        shapes = layer.param_shapes()
        n += sum(int(np.prod(shapes[name])) for name in layer.trainable())
    return n


def buffer_count(model: ModelGraph) -> int:
    """Non-trainable element count (batchnorm running mean and variance)."""
    n = 0
    for layer in model.layers:
        shapes = layer.param_shapes()
        n += sum(int(np.prod(s)) for name, s in shapes.items() if name not in layer.trainable())
    return n


def total_elements(layers: Sequence[LayerSpec]) -> int:
    return sum(int(np.prod(s)) for layer in layers for s in layer.param_shapes().values())


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> list[dict[str, np.ndarray]]:
    """Seeded random parameters: He-normal weights, small biases, perturbed BN."""
    out = []
    for layer in layers:
        d = {}
        if layer.kind in ("conv2d", "linear"):
            wshape = layer.param_shapes()["weight"]
            fan_in = int(np.prod(wshape[1:]))
            d["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape)
            d["bias"] = rng.normal(0.0, 0.1, wshape[0])
        elif layer.kind == "batchnorm":
            c = layer.channels
            d["gamma"] = rng.uniform(0.5, 1.5, c)
            d["beta"] = rng.normal(0.0, 0.1, c)
            d["mean"] = rng.normal(0.0, 0.1, c)
            d["var"] = rng.uniform(0.5, 1.5, c)
        out.append({k: v.astype(T.DTYPE) for k, v in d.items()})
    return out


PAPER_INPUT = (3, 640, 640)
PAPER_CHANNELS = (16, 16, 32, 32, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64)
PAPER_CLASSES = 5


def paper_layers() -> list[LayerSpec]:
    """Layer list of the 640x640 diabetic-retinopathy grading network.

    Census: 14 feature convs + 1 classifier conv + 1 linear carry weights
    (16 weighted layers); each conv is followed by batchnorm and ReLU.
    """
    layers: list[LayerSpec] = []
    c_in = PAPER_INPUT[0]
    for i, c in enumerate(PAPER_CHANNELS):
        layers += [Conv2d(c_in, c, 3, 1, 1), BatchNorm(c), ReLU()]
        c_in = c
        if i % 2 == 1:
            layers.append(MaxPool(2, 2))
    layers += [Conv2d(64, 64, 2, 1, 0), BatchNorm(64), ReLU(),
               AvgPool(4, 4), Flatten(), Linear(64, PAPER_CLASSES)]
    return layers


def build_paper_model(params=None, *, seed: int = 0) -> ModelGraph:
    """The 640x640 five-class preset; random weights from ``seed`` when ``params`` is None.

    ``params`` may be a per-layer list of name->array dicts or a flat
    sequence of arrays in layer/parameter order.
    """
    layers = paper_layers()
    if params is None:
        params = init_params(layers, np.random.default_rng(seed))
    elif len(params) and not isinstance(params[0], Mapping):
        flat = list(params)
        grouped = []
        for layer in layers:
            d = {}
            for name in layer.param_shapes():
                if not flat:
                    raise ShapeError("parameter source exhausted before the last layer")
                d[name] = flat.pop(0)
            grouped.append(d)
        if flat:
            raise ShapeError(f"{len(flat)} surplus parameter arrays")
        params = grouped
    return ModelGraph(PAPER_INPUT, tuple(layers), tuple(params))
