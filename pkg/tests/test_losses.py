import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitveil.engine import Tensor, max_relative_error, numeric_grad
from splitveil.losses import (
    clustering_loss,
    cross_entropy,
    distance_correlation,
    mse,
    noise_norm_penalty,
)


def naive_ce(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[lab]
    return total / len(labels)


def naive_dcor(x, z):
    def centered(m):
        n = len(m)
        d = np.array([[np.linalg.norm(m[i] - m[j]) for j in range(n)] for i in range(n)])
        return d - d.mean(0) - d.mean(1)[:, None] + d.mean()

    a, b = centered(x), centered(z)
    dcov = np.sqrt(max((a * b).mean(), 0))
    dvx, dvz = np.sqrt((a * a).mean()), np.sqrt((b * b).mean())
    return dcov / np.sqrt(dvx * dvz)


def test_ce_uniform_logits():
    assert abs(cross_entropy(Tensor(np.zeros((4, 10))), [0, 3, 5, 9]).item() - math.log(10)) < 1e-12


def test_ce_confident_limit():
    logits = np.full((2, 3), -1e3)
    logits[0, 1] = logits[1, 2] = 1e3
    assert cross_entropy(Tensor(logits), [1, 2]).item() < 1e-12


def test_ce_matches_naive():
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=5, size=(16, 7))
    labels = rng.integers(0, 7, 16)
    assert abs(cross_entropy(Tensor(logits), labels).item() - naive_ce(logits.tolist(), labels)) < 1e-12


def test_ce_rejects_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_ce_non_negative_and_gradient():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, 5)
    loss = cross_entropy(w, labels)
    assert loss.item() >= 0
    loss.backward()
    assert max_relative_error(w.grad, numeric_grad(lambda: cross_entropy(w, labels), w)) < 1e-6


def test_clustering_identical_is_zero():
    z = Tensor(np.tile(np.arange(6.0), (5, 1)))
    assert clustering_loss(z, [1, 2, 3, 4, 0]).item() == 0.0


def test_clustering_basis_vectors():
    assert abs(clustering_loss(Tensor(np.eye(4)), [1, 2, 3, 0]).item() - 2.0) < 1e-12


def test_clustering_matches_brute_force():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(9, 2, 3))
    pairing = rng.permutation(9)
    ref = sum(np.sum((z[i] - z[pairing[i]]) ** 2) for i in range(9)) / 9
    assert abs(clustering_loss(Tensor(z), pairing).item() - ref) < 1e-12


def test_clustering_rejects_single_sample():
    with pytest.raises(ValueError):
        clustering_loss(Tensor(np.ones((1, 3))), [0])


def test_clustering_gradient():
    rng = np.random.default_rng(3)
    z = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    pairing = np.array([3, 3, 0, 5, 1, 2])  # repeated partners allowed
    clustering_loss(z, pairing).backward()
    assert max_relative_error(z.grad, numeric_grad(lambda: clustering_loss(z, pairing), z)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(-5, 5))
def test_clustering_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    a = clustering_loss(Tensor(z), perm).item()
    b = clustering_loss(Tensor(z + shift), perm).item()
    assert abs(a - b) < 1e-9 * max(1.0, a)


def test_dcor_perfect_dependence():
    x = np.random.default_rng(4).normal(size=(20, 3))
    assert abs(distance_correlation(x, x).item() - 1.0) < 1e-12


def test_dcor_constant_is_zero():
    z = np.random.default_rng(5).normal(size=(10, 2))
    assert distance_correlation(np.ones((10, 4)), z).item() == 0.0


def test_dcor_independent_monte_carlo():
    rng = np.random.default_rng(6)
    assert distance_correlation(rng.normal(size=(1000, 1)), rng.normal(size=(1000, 1))).item() < 0.1


def test_dcor_matches_naive_symmetric_and_bounded():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(12, 3))
    z = x[:, :2] ** 2 + 0.3 * rng.normal(size=(12, 2))
    d = distance_correlation(x, z).item()
    assert abs(d - naive_dcor(x, z)) < 1e-12
    assert abs(d - distance_correlation(z, x).item()) < 1e-12
    assert 0.0 <= d <= 1.0


def test_dcor_gradient():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(7, 3))
    z = Tensor(rng.normal(size=(7, 2)), requires_grad=True)
    distance_correlation(x, z).backward()
    assert max_relative_error(z.grad, numeric_grad(lambda: distance_correlation(x, z), z)) < 1e-4


def test_noise_norm_penalty():
    assert noise_norm_penalty(Tensor(np.zeros(5))).item() == 0.0
    assert noise_norm_penalty(Tensor(np.ones((2, 3)))).item() == 1.0
    d = np.random.default_rng(9).normal(size=(3, 4))
    assert abs(noise_norm_penalty(Tensor(d)).item() - sum(abs(v) for v in d.ravel()) / 12) < 1e-12


def test_mse_cases():
    x = np.random.default_rng(10).normal(size=(2, 3, 4))
    assert mse(x, x) == 0.0
    assert mse(np.ones(6), np.zeros(6)) == 1.0
    y = x + 0.1
    naive = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size
    assert abs(mse(x, y) - naive) < 1e-12
    assert mse(x, y) == mse(y, x)
    with pytest.raises(ValueError):
        mse(np.ones(3), np.ones(4))
