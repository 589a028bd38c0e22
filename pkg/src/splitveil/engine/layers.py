"""Layer specifications, shape arithmetic, initialization and forward dispatch."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    Tensor,
    avg_pool2d,
    conv2d,
    conv2d_output_hw,
    conv_transpose2d,
    conv_transpose2d_output_hw,
    linear,
)

KINDS = ("conv2d", "conv_transpose2d", "linear", "relu", "avg_pool2d", "sigmoid_output")
TRAINABLE = ("conv2d", "conv_transpose2d", "linear")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    window: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("conv2d", "conv_transpose2d"):
            for name in ("in_channels", "out_channels", "kernel", "stride"):
                if getattr(self, name) <= 0:
                    raise ValueError(f"{self.kind}: {name} must be positive")
            if self.padding < 0:
                raise ValueError(f"{self.kind}: padding must be non-negative")
        elif self.kind == "linear":
            if self.in_features <= 0 or self.out_features <= 0:
                raise ValueError("linear: in_features and out_features must be positive")
        elif self.kind == "avg_pool2d":
            if self.window <= 0:
                raise ValueError("avg_pool2d: window must be positive")

    # constructors used throughout the package
    @classmethod
    def conv(cls, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> "LayerSpec":
        return cls("conv2d", in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, padding=padding)

    @classmethod
    def deconv(cls, cin: int, cout: int, kernel: int = 2, stride: int = 2, padding: int = 0) -> "LayerSpec":
        return cls("conv_transpose2d", in_channels=cin, out_channels=cout, kernel=kernel,
                   stride=stride, padding=padding)

    @classmethod
    def fc(cls, fin: int, fout: int) -> "LayerSpec":
        return cls("linear", in_features=fin, out_features=fout)

    @classmethod
    def pool(cls, window: int) -> "LayerSpec":
        return cls("avg_pool2d", window=window)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v or k == "kind"}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)

    def describe(self) -> str:
        if self.kind in ("conv2d", "conv_transpose2d"):
            return (f"{self.kind}({self.in_channels}->{self.out_channels}, k={self.kernel}, "
                    f"s={self.stride}, p={self.padding})")
        if self.kind == "linear":
            return f"linear({self.in_features}->{self.out_features})"
        if self.kind == "avg_pool2d":
            return f"avg_pool2d({self.window})"
        return self.kind


def output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape (no batch axis) for a per-sample input shape."""
    shape = tuple(int(s) for s in shape)
    if spec.kind in ("relu", "sigmoid_output"):
        return shape
    if spec.kind == "linear":
        if math.prod(shape) != spec.in_features:
            raise ShapeError(f"{spec.describe()}: input shape {shape} has {math.prod(shape)} features, "
                             f"expected {spec.in_features}")
        return (spec.out_features,)
    if len(shape) != 3:
        raise ShapeError(f"{spec.describe()}: expected (C, H, W) input, got {shape}")
    c, h, w = shape
    if spec.kind == "avg_pool2d":
        ho, wo = conv2d_output_hw(h, w, spec.window, spec.window, 0)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"{spec.describe()}: input shape {shape} gives empty output ({c}, {ho}, {wo})")
        return (c, ho, wo)
    if c != spec.in_channels:
        raise ShapeError(f"{spec.describe()}: input shape {shape} has {c} channels, "
                         f"expected {spec.in_channels}")
    if spec.kind == "conv2d":
        ho, wo = conv2d_output_hw(h, w, spec.kernel, spec.stride, spec.padding)
    else:
        ho, wo = conv_transpose2d_output_hw(h, w, spec.kernel, spec.stride, spec.padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{spec.describe()}: input shape {shape} gives empty output "
                         f"({spec.out_channels}, {ho}, {wo})")
    return (spec.out_channels, ho, wo)


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    k = spec.kernel
    if spec.kind == "conv2d":
        return {"weight": (spec.out_channels, spec.in_channels, k, k), "bias": (spec.out_channels,)}
    if spec.kind == "conv_transpose2d":
        return {"weight": (spec.in_channels, spec.out_channels, k, k), "bias": (spec.out_channels,)}
    if spec.kind == "linear":
        return {"weight": (spec.out_features, spec.in_features), "bias": (spec.out_features,)}
    return {}


def fan_in(spec: LayerSpec) -> int:
    if spec.kind == "conv2d":
        return spec.in_channels * spec.kernel * spec.kernel
    if spec.kind == "conv_transpose2d":
        # each output pixel receives ceil(k/s)^2 taps per input channel
        taps = math.ceil(spec.kernel / spec.stride)
        return spec.in_channels * taps * taps
    if spec.kind == "linear":
        return spec.in_features
    return 0


def init_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-uniform weights and small uniform biases, both scaled by fan-in."""
    shapes = param_shapes(spec)
    if not shapes:
        return {}
    fi = fan_in(spec)
    w_bound = math.sqrt(6.0 / fi)
    b_bound = 1.0 / math.sqrt(fi)
    return {
        "weight": Tensor(rng.uniform(-w_bound, w_bound, shapes["weight"]), requires_grad=True),
        "bias": Tensor(rng.uniform(-b_bound, b_bound, shapes["bias"]), requires_grad=True),
    }


def layer_forward(spec: LayerSpec, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
    """Apply one layer to a batched input ``(N, ...)``."""
    params = params or {}
    expected = param_shapes(spec)
    for name, shp in expected.items():
        if name not in params:
            raise ShapeError(f"{spec.describe()}: missing parameter '{name}'")
        if tuple(params[name].shape) != shp:
            raise ShapeError(f"{spec.describe()}: parameter '{name}' has shape {params[name].shape}, "
                             f"expected {shp}")
    if x.ndim < 2:
        raise ShapeError(f"{spec.describe()}: input needs a batch axis, got shape {x.shape}")
    output_shape(spec, x.shape[1:])  # validates and raises with both shapes

    if spec.kind == "relu":
        return x.relu()
    if spec.kind == "sigmoid_output":
        # bounded to (-1, 1), the normalized image range
        return x.sigmoid() * 2.0 - 1.0
    if spec.kind == "avg_pool2d":
        return avg_pool2d(x, spec.window)
    if spec.kind == "linear":
        return linear(x, params["weight"], params["bias"])
    if spec.kind == "conv2d":
        return conv2d(x, params["weight"], params["bias"], spec.stride, spec.padding)
    return conv_transpose2d(x, params["weight"], params["bias"], spec.stride, spec.padding)
