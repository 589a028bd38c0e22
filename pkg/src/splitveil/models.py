"""Split models, reference architectures, the inversion decoder, and parameter files."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .engine import LayerSpec, ShapeError, Tensor, init_params, layer_forward, output_shape

PARAM_MAGIC = b"SVPM"
PARAM_VERSION = 1


AFFINE_KINDS = ("conv2d", "conv_transpose2d", "linear", "avg_pool2d")


class ParamFileError(ValueError):
    pass


class Sequential:
    """An ordered run of layers whose parameters are named ``"<layer index>.<role>"``.

    ``offset`` is the global index of the first layer, so a bottom/top pair
    built from one spec shares a single naming scheme.
    """

    def __init__(self, layers, params: Mapping[str, Tensor], input_shape, offset: int = 0):
        self.layers = tuple(layers)
        self.params = dict(params)
        self.input_shape = tuple(input_shape)
        self.offset = offset
        shape = self.input_shape
        for spec in self.layers:
            shape = output_shape(spec, shape)
        self.output_shape = shape

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"model expects per-sample input {self.input_shape}, got {tuple(x.shape[1:])}")
        for i, spec in enumerate(self.layers):
            gi = self.offset + i
            p = {role: self.params[f"{gi}.{role}"] for role in ("weight", "bias") if f"{gi}.{role}" in self.params}
            x = layer_forward(spec, x, p)
        return x

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def is_affine(self) -> bool:
        """True when every layer is affine, so the input Jacobian is the same at every point."""
        return all(spec.kind in AFFINE_KINDS for spec in self.layers)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.params)
        got = set(state)
        if expected != got:
            raise ParamFileError(f"parameter names differ: missing {sorted(expected - got)}, "
                                 f"unexpected {sorted(got - expected)}")
        for k, v in state.items():
            if tuple(v.shape) != self.params[k].shape:
                raise ParamFileError(f"parameter '{k}' has shape {tuple(v.shape)}, "
                                     f"model expects {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()


def _init_layers(layers, seed: int, offset: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0x1D])
    params = {}
    for i, spec in enumerate(layers):
        for role, t in init_params(spec, rng).items():
            params[f"{offset + i}.{role}"] = t
    return params


@dataclass(frozen=True)
class SplitModelSpec:
    """Layer list plus split point ``split``: the number of leading layers run on the client."""

    layers: tuple
    split: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not 1 <= self.split < len(self.layers):
            raise ValueError(f"split point must satisfy 1 <= p < {len(self.layers)}, got {self.split}")

    def bottom_layers(self):
        return self.layers[:self.split]

    def top_layers(self):
        return self.layers[self.split:]

    def interface_shape(self) -> tuple[int, ...]:
        shape = self.input_shape
        for spec in self.bottom_layers():
            shape = output_shape(spec, shape)
        return shape

    def validate(self) -> tuple[int, ...]:
        """Run shape inference over the whole list; returns the output shape."""
        z = self.interface_shape()
        try:
            shape = output_shape(self.layers[self.split], z)
        except ShapeError as exc:
            raise ShapeError(f"bottom output shape {z} does not fit the top model's first layer: {exc}") from None
        for spec in self.layers[self.split + 1:]:
            shape = output_shape(spec, shape)
        return shape

    def to_dict(self) -> dict:
        return {"layers": [s.to_dict() for s in self.layers], "split": self.split,
                "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitModelSpec":
        return cls(tuple(LayerSpec.from_dict(x) for x in d["layers"]), int(d["split"]), tuple(d["input_shape"]))


def build_split_model(spec: SplitModelSpec, seed: int = 0) -> tuple[Sequential, Sequential]:
    spec.validate()
    params = _init_layers(spec.layers, seed)
    p = spec.split
    bottom_params = {k: v for k, v in params.items() if int(k.split(".")[0]) < p}
    top_params = {k: v for k, v in params.items() if int(k.split(".")[0]) >= p}
    bottom = Sequential(spec.bottom_layers(), bottom_params, spec.input_shape, offset=0)
    top = Sequential(spec.top_layers(), top_params, bottom.output_shape, offset=p)
    return bottom, top


def full_forward(spec: SplitModelSpec, bottom: Sequential, top: Sequential, x: Tensor) -> Tensor:
    """Unsplit sequential forward over the whole layer list."""
    merged = {**bottom.params, **top.params}
    return Sequential(spec.layers, merged, spec.input_shape).forward(x)


# -- reference architectures --------------------------------------------------

def reference_tiny_spec(retained: int, num_classes: int, image_hw=(32, 32)) -> SplitModelSpec:
    """Small DCT-domain reference: client runs conv+relu, server runs conv, relu, pool, linear."""
    h, w = image_hw[0] // 8, image_hw[1] // 8
    pool = 2 if min(h, w) >= 2 else 1
    layers = (
        LayerSpec.conv(3 * retained, 32),
        LayerSpec("relu"),
        LayerSpec.conv(32, 64),
        LayerSpec("relu"),
        LayerSpec.pool(pool),
        LayerSpec.fc(64 * (h // pool) * (w // pool), num_classes),
    )
    return SplitModelSpec(layers, 2, (3 * retained, h, w))


def frequency_model_spec(retained: int, num_classes: int, image_hw=(16, 16),
                         bottom_channels: int = 192, top_channels: int = 64) -> SplitModelSpec:
    """Default DCT-domain split model; the client runs only the first convolution."""
    h, w = image_hw[0] // 8, image_hw[1] // 8
    pool = 2 if min(h, w) >= 2 else 1
    layers = (
        LayerSpec.conv(3 * retained, bottom_channels, kernel=1, padding=0),
        LayerSpec("relu"),
        LayerSpec.conv(bottom_channels, top_channels),
        LayerSpec("relu"),
        LayerSpec.pool(pool),
        LayerSpec.fc(top_channels * (h // pool) * (w // pool), num_classes),
    )
    return SplitModelSpec(layers, 1, (3 * retained, h, w))


def pixel_model_spec(num_classes: int, image_hw=(16, 16), bottom_channels: int = 16) -> SplitModelSpec:
    """Pixel-domain split model used by the undefended run and the baselines."""
    h, w = image_hw
    layers = [LayerSpec.conv(3, bottom_channels), LayerSpec("relu")]
    c = bottom_channels
    for width in (32, 64):
        layers += [LayerSpec.pool(2), LayerSpec.conv(c, width), LayerSpec("relu")]
        c = width
        h, w = h // 2, w // 2
    layers += [LayerSpec.pool(2)]
    h, w = h // 2, w // 2
    layers += [LayerSpec.fc(c * h * w, num_classes)]
    return SplitModelSpec(tuple(layers), 1, (3,) + tuple(image_hw))


def decoder_layers(z_shape, image_shape, width: int = 32) -> tuple[LayerSpec, ...]:
    """Transposed-convolution inverse network from smashed-data shape to image shape.

    A linear first stage maps latents straight to RGB. When the latent grid is
    coarser its kernel equals its stride, so each position decodes its own
    image patch, which is the structure of the exact block-DCT inverse. A
    small 3x3 nonlinear refinement follows at image resolution.
    """
    zc, zh, zw = z_shape
    ic, ih, iw = image_shape
    if ih % zh or iw % zw or ih // zh != iw // zw:
        raise ShapeError(f"cannot upsample {z_shape} to {image_shape} with a square stage")
    factor = ih // zh
    if factor == 1:
        first = LayerSpec.deconv(zc, ic, kernel=3, stride=1, padding=1)
    else:
        first = LayerSpec.deconv(zc, ic, kernel=factor, stride=factor)
    return (first, LayerSpec.deconv(ic, width, kernel=3, stride=1, padding=1), LayerSpec("relu"),
            LayerSpec.deconv(width, ic, kernel=3, stride=1, padding=1), LayerSpec("sigmoid_output"))


def build_decoder(z_shape, image_shape, seed: int = 0, width: int = 32, layers=None) -> Sequential:
    layers = tuple(layers) if layers is not None else decoder_layers(z_shape, image_shape, width)
    dec = Sequential(layers, _init_layers(layers, seed + 7919), z_shape)
    if dec.output_shape != tuple(image_shape):
        raise ShapeError(f"decoder output {dec.output_shape} does not match image shape {tuple(image_shape)}")
    return dec


# -- parameter files ------------------------------------------------------------

def save_params(params: Mapping[str, Tensor | np.ndarray], path) -> None:
    """Write ``SVPM`` | u8 version | u32 count | per tensor: u16 name len, name, u8 rank, u32 dims, f64 data."""
    out = bytearray(PARAM_MAGIC)
    out += struct.pack("<BI", PARAM_VERSION, len(params))
    for name in sorted(params):
        arr = params[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path, expected: Mapping[str, tuple] | None = None) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ParamFileError(f"{path}: truncated while reading {what} at byte offset {pos} "
                                 f"(need {n} bytes, {len(raw) - pos} left)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != PARAM_MAGIC:
        raise ParamFileError(f"{path}: bad magic, not a parameter file")
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != PARAM_VERSION:
        raise ParamFileError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = math.prod(dims)
        data = np.frombuffer(take(8 * n, f"data of '{name}'"), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = data
    if pos != len(raw):
        raise ParamFileError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    if expected is not None:
        for name, shape in expected.items():
            if name not in params:
                raise ParamFileError(f"{path}: missing tensor '{name}'")
            if tuple(params[name].shape) != tuple(shape):
                raise ParamFileError(f"{path}: tensor '{name}' has shape {params[name].shape}, expected {tuple(shape)}")
    return params
