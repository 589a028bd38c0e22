"""Training objectives and evaluation metrics, all differentiable where training needs them."""

from __future__ import annotations

import numpy as np

from .engine import Tensor, as_tensor


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if k < 2:
        raise ValueError("cross_entropy needs at least two classes")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(logits.log_softmax(axis=-1) * onehot).sum() * (1.0 / n)


def random_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh uniform permutation used as the partner index for each sample."""
    return rng.permutation(n)


def clustering_loss(z: Tensor, pairing) -> Tensor:
    """``(1/N) sum_i ||z_i - z_pairing(i)||^2`` over flattened per-sample representations."""
    z = as_tensor(z)
    n = z.shape[0]
    if n < 2:
        raise ValueError("clustering_loss needs at least two samples")
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (n,):
        raise ValueError(f"pairing must have length {n}")
    flat = z.reshape(n, -1)
    diff = flat - flat.take(pairing)
    return (diff * diff).sum() * (1.0 / n)


def _pairwise_distances(x: Tensor) -> Tensor:
    """Euclidean distance matrix with a zero-safe gradient on the diagonal."""
    xd = x.data
    diff = xd[:, None, :] - xd[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, (g + g.T) / dist, 0.0)
        # d D_ij / d x_i = (x_i - x_j) / D_ij, symmetric contributions folded into w
        return (w.sum(axis=1, keepdims=True) * xd - w @ xd,)

    return Tensor._make(dist, (x,), bw, "pairwise_distance")


def _double_center(d: Tensor) -> Tensor:
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def distance_correlation(x, z, eps: float = 1e-12) -> Tensor:
    """Sample distance correlation between per-row flattened ``x`` and ``z``.

    Returns exactly 0 (a constant, no gradient) when either distance variance vanishes.
    """
    x = as_tensor(x)
    z = as_tensor(z)
    n = x.shape[0]
    if n < 2 or z.shape[0] != n:
        raise ValueError("distance_correlation needs two or more paired rows")
    if not (np.isfinite(x.data).all() and np.isfinite(z.data).all()):
        raise ValueError("distance_correlation got non-finite input")
    a = _double_center(_pairwise_distances(x.reshape(n, -1)))
    b = _double_center(_pairwise_distances(z.reshape(n, -1)))
    dcov2 = (a * b).mean()
    dvar_x2 = (a * a).mean()
    dvar_z2 = (b * b).mean()
    if dvar_x2.item() <= eps or dvar_z2.item() <= eps:
        return Tensor(0.0)
    # dCor = dCov / sqrt(dVar_x dVar_z) = sqrt(dCov^2 / sqrt(dVar_x^2 dVar_z^2))
    ratio = dcov2 / ((dvar_x2 * dvar_z2) ** 0.5)
    if ratio.item() <= eps:
        return Tensor(0.0) if not ratio.requires_grad else ratio * 0.0
    return ratio ** 0.5


def noise_norm_penalty(delta: Tensor) -> Tensor:
    """Mean absolute value of the learnable noise tensor."""
    delta = as_tensor(delta)
    return delta.abs().mean()


def mse(x, x_hat) -> float:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    x_hat = np.asarray(x_hat.data if isinstance(x_hat, Tensor) else x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"mse shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def mse_loss(x_hat: Tensor, target) -> Tensor:
    """Differentiable mean squared error against a fixed target."""
    x_hat = as_tensor(x_hat)
    target = np.asarray(target, dtype=np.float64)
    if x_hat.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {x_hat.shape} vs {target.shape}")
    d = x_hat - target
    return (d * d).mean()


def per_sample_mse(x, x_hat) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"mse shape mismatch: {x.shape} vs {x_hat.shape}")
    return np.mean((x - x_hat) ** 2, axis=tuple(range(1, x.ndim)))
