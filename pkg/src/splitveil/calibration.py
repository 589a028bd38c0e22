"""Jacobians of the client-side pipeline and closed-form Gaussian noise scales.

Two budgets are supported. For a Jacobian ``J`` of the smashed data with
respect to a ``d``-dimensional bottom-model input:

* dFIL:   ``sigma = sqrt(trace(J^T J) / (d * dFIL))``
* FSInfo: ``sigma = det(J^T J)^(1/(2d)) / (exp(FSInfo) * sqrt(2 pi e))``

The FSInfo scale is evaluated in log space from the eigenvalues of ``J^T J``.
"""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .engine import Tensor

EIG_FLOOR = 1e-12
RANK_WARNING_FRACTION = 0.10
HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)
BUDGET_KINDS = ("dfil", "fsinfo")


@dataclass(frozen=True)
class PrivacyBudget:
    kind: str
    target: float

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in BUDGET_KINDS:
            raise ValueError(f"budget kind must be one of {BUDGET_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not math.isfinite(self.target):
            raise ValueError("budget target must be finite")
        if kind == "dfil" and self.target <= 0:
            raise ValueError(f"dFIL target must be positive, got {self.target}")


@dataclass
class NoiseScale:
    sigma: float
    budget: PrivacyBudget | None = None
    epoch: int | None = None
    calib_size: int = 1
    rank_warning: bool = False
    floored_fraction: float = 0.0
    per_sample: list = field(default_factory=list)

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"noise scale must be finite and non-negative, got {self.sigma}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget"] = asdict(self.budget) if self.budget else None
        return d


@contextlib.contextmanager
def _frozen(params: Iterable[Tensor]):
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def jacobian(bottom: Callable[[Tensor], Tensor], x, chunk: int = 256,
             params: Mapping[str, Tensor] | None = None) -> np.ndarray:
    """Jacobian of ``bottom`` at one sample ``x`` (no batch axis), shape ``(dim z, dim x)``.

    Each row is a separate vector-Jacobian product seeded with a one-hot
    output gradient. Rows are computed ``chunk`` at a time by replicating
    the sample along the batch axis, which keeps every backward pass
    independent. ``params`` (defaults to ``bottom.parameters()``) are
    excluded from differentiation for the duration of the call.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("jacobian input contains non-finite values")
    if params is None and hasattr(bottom, "parameters"):
        params = bottom.parameters()
    with _frozen((params or {}).values()):
        probe = bottom(Tensor(x[None]))
        out_dim = probe.numel()
        rows = np.empty((out_dim, x.size))
        for start in range(0, out_dim, chunk):
            r = min(chunk, out_dim - start)
            xr = Tensor(np.broadcast_to(x, (r,) + x.shape).copy(), requires_grad=True)
            out = bottom(xr)
            seed = np.zeros((r, out_dim))
            seed[np.arange(r), start + np.arange(r)] = 1.0
            if out.requires_grad:
                out.backward(seed.reshape(out.shape))
                grad = xr.grad if xr.grad is not None else np.zeros_like(xr.data)
            else:  # constant map
                grad = np.zeros_like(xr.data)
            rows[start:start + r] = grad.reshape(r, -1)
    if not np.isfinite(rows).all():
        raise FloatingPointError("jacobian has non-finite entries")
    return rows


def trace_jtj(jac: np.ndarray) -> float:
    """``trace(J^T J)`` as the squared Frobenius norm, without forming the product."""
    return float(np.sum(np.square(jac)))


def log_det_jtj(jac: np.ndarray, floor: float = EIG_FLOOR) -> tuple[float, int]:
    """Sum of log-eigenvalues of ``J^T J`` with eigenvalues floored; returns (log det, #floored)."""
    jac = np.asarray(jac, dtype=np.float64)
    gram = jac.T @ jac
    eig = np.linalg.eigvalsh(gram)
    floored = int(np.sum(eig < floor))
    return float(np.sum(np.log(np.maximum(eig, floor)))), floored


def _input_dim(jac: np.ndarray, d: int | None) -> int:
    d = jac.shape[1] if d is None else int(d)
    if d <= 0:
        raise ValueError("input dimension must be positive")
    return d


def sigma_dfil(jac: np.ndarray, d: int | None, dfil_target: float) -> NoiseScale:
    budget = PrivacyBudget("dfil", dfil_target)
    d = _input_dim(jac, d)
    return NoiseScale(math.sqrt(trace_jtj(jac) / (d * budget.target)), budget)


def sigma_fsinfo(jac: np.ndarray, d: int | None, fsinfo_target: float) -> NoiseScale:
    budget = PrivacyBudget("fsinfo", fsinfo_target)
    d = _input_dim(jac, d)
    logdet, floored = log_det_jtj(jac)
    log_sigma = logdet / (2.0 * d) - budget.target - HALF_LOG_2PIE
    frac = floored / jac.shape[1]
    return NoiseScale(math.exp(log_sigma), budget, rank_warning=frac > RANK_WARNING_FRACTION,
                      floored_fraction=frac)


def sigma_for_budget(jac: np.ndarray, budget: PrivacyBudget, d: int | None = None) -> NoiseScale:
    if budget.kind == "dfil":
        return sigma_dfil(jac, d, budget.target)
    return sigma_fsinfo(jac, d, budget.target)


def calibrate(bottom: Callable[[Tensor], Tensor], calib_set, budget: PrivacyBudget,
              epoch: int | None = None, params: Mapping[str, Tensor] | None = None) -> NoiseScale:
    """Mean of the per-sample noise scales over ``calib_set`` (an ``(N, ...)`` array).

    A bottom exposing ``is_affine = True`` has one Jacobian everywhere, so it
    is computed once and shared by every calibration sample.
    """
    calib_set = np.asarray(getattr(calib_set, "data", calib_set), dtype=np.float64)
    if calib_set.ndim == 0 or len(calib_set) == 0:
        raise ValueError("calibration set is empty")
    if getattr(bottom, "is_affine", False):
        shared = sigma_for_budget(jacobian(bottom, calib_set[0], params=params), budget)
        scales = [shared] * len(calib_set)
    else:
        scales = [sigma_for_budget(jacobian(bottom, x, params=params), budget) for x in calib_set]
    sigmas = [s.sigma for s in scales]
    return NoiseScale(float(np.mean(sigmas)), budget, epoch=epoch, calib_size=len(scales),
                      rank_warning=any(s.rank_warning for s in scales),
                      floored_fraction=max(s.floored_fraction for s in scales),
                      per_sample=sigmas)


def perturb(z, scale, rng) -> Tensor | np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise. ``rng`` is a Generator or an integer seed."""
    sigma = scale.sigma if isinstance(scale, NoiseScale) else float(scale)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if sigma == 0:
        return z
    noise = rng.normal(0.0, sigma, size=data.shape)
    if isinstance(z, Tensor):
        return z + Tensor(noise)
    return data + noise


CALIBRATION_FIELDS = ("epoch", "budget_kind", "target", "sigma", "rank_warning")


def write_calibration_csv(scales: Iterable[NoiseScale], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CALIBRATION_FIELDS)
        for s in scales:
            w.writerow([s.epoch, s.budget.kind if s.budget else "", s.budget.target if s.budget else "",
                        repr(s.sigma), int(s.rank_warning)])
