"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient to parent gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and then discards it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0 and op == "leaf":
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
        return Tensor(data, op=op)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self
        e = float(exponent)

        def bw(g):
            return (g * e * a.data ** (e - 1.0),)

        return Tensor._make(a.data ** e, (a,), bw, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")

        def bw(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def flatten_batch(self) -> "Tensor":
        """Reshape to ``(N, -1)`` keeping the leading batch axis."""
        return self.reshape(self.shape[0], -1)

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: (g.T,), "transpose")

    def take(self, index) -> "Tensor":
        """Gather rows along axis 0 (indices may repeat)."""
        a = self
        idx = np.asarray(index, dtype=np.int64)

        def bw(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.data[idx], (a,), bw, "take")

    # -- elementwise functions --------------------------------------------
    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")

    def tanh(self) -> "Tensor":
        a = self
        y = np.tanh(a.data)
        return Tensor._make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self) -> "Tensor":
        a = self
        y = _stable_sigmoid(a.data)
        return Tensor._make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def exp(self) -> "Tensor":
        a = self
        y = np.exp(a.data)
        return Tensor._make(y, (a,), lambda g: (g * y,), "exp")

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def sqrt(self) -> "Tensor":
        a = self
        y = np.sqrt(a.data)
        return Tensor._make(y, (a,), lambda g: (0.5 * g / y,), "sqrt")

    def abs(self) -> "Tensor":
        a = self
        s = np.sign(a.data)
        return Tensor._make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse
        p = np.exp(y)

        def bw(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(y, (a,), bw, "log_softmax")

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every reachable leaf with ``requires_grad``.

        Without an explicit seed the tensor must be a finite scalar. The graph
        is released afterwards; a second call on the same output raises.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            if not np.isfinite(self.data).all():
                raise FloatingPointError(f"loss is not finite ({self.op})")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if self._backward is None and self._parents == () and self.op != "leaf":
            raise RuntimeError("graph already consumed by a previous backward()")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                if not np.isfinite(pg).all():
                    raise FloatingPointError(
                        f"non-finite gradient produced by '{node.op}' node for input of shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# Convolution-family primitives (NCHW layout)
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kernel) // stride + 1, (w + 2 * padding - kernel) // stride + 1


def conv_transpose2d_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    return (h - 1) * stride - 2 * padding + kernel, (w - 1) * stride - 2 * padding + kernel


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight layout ``(out, in, kh, kw)``."""
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    xp = _pad(x.data, padding)
    ho, wo = conv2d_output_hw(h, w, kh, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: empty output for input {x.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += \
                        cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with weight layout ``(in, out, kh, kw)``."""
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    ho, wo = conv_transpose2d_output_hw(h, w, kh, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d: empty output for input {x.shape}")
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # n, h, w, o, kh, kw
    full = np.zeros((n, o, fh, fw))
    for a in range(kh):
        for b in range(kw):
            full[:, :, a:a + stride * (h - 1) + 1:stride, b:b + stride * (w - 1) + 1:stride] += \
                cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gfull = np.zeros((n, o, fh, fw))
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        gx = None
        if x.requires_grad:
            gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, bw, "conv_transpose2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = conv2d_output_hw(h, w, kernel, stride, 0)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"avg_pool2d: window {kernel} too large for input {x.shape}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(4, 5))
    scale = 1.0 / (kernel * kernel)

    def bw(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for a in range(kernel):
            for b in range(kernel):
                gx[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += gs
        return (gx,)

    return Tensor._make(out, (x,), bw, "avg_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map with weight layout ``(out, in)``; inputs are flattened per sample."""
    if x.ndim != 2:
        x = x.flatten_batch()
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out
