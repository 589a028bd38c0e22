"""Finite-difference oracles used to cross-check analytic derivatives."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    pass


def _eval(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    with no_grad():
        out = fn(Tensor(x))
    return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64).reshape(-1)


def finite_diff_jacobian(fn: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``, shape ``(out_dim, in_dim)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y0 = _eval(fn, x0)
    if not np.array_equal(y0, _eval(fn, x0)):
        raise NonDeterministicError("fn returned different outputs for identical inputs; disable noise first")
    flat = x0.reshape(-1)
    jac = np.empty((y0.size, flat.size))
    for j in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += step
        xm[j] -= step
        jac[:, j] = (_eval(fn, xp.reshape(x0.shape)) - _eval(fn, xm.reshape(x0.shape))) / (2.0 * step)
    return jac


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar closure with respect to one tensor (mutated in place, restored)."""
    grad = np.empty_like(param.data)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        with no_grad():
            fp = loss_fn().item()
        flat[j] = orig - step
        with no_grad():
            fm = loss_fn().item()
        flat[j] = orig
        g[j] = (fp - fm) / (2.0 * step)
    return grad
