import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitveil.calibration import (
    NoiseScale,
    PrivacyBudget,
    calibrate,
    jacobian,
    log_det_jtj,
    perturb,
    sigma_dfil,
    sigma_fsinfo,
    trace_jtj,
    write_calibration_csv,
)
from splitveil.engine import LayerSpec, Tensor, finite_diff_jacobian, max_relative_error
from splitveil.models import Sequential, _init_layers


def small_conv_bottom(seed=0, relu=True):
    layers = [LayerSpec.conv(2, 3, 3, 1, 1)] + ([LayerSpec("relu")] if relu else [])
    return Sequential(layers, _init_layers(layers, seed), (2, 4, 4))


def test_jacobian_identity_and_scaling():
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    np.testing.assert_array_equal(jacobian(lambda t: t, x), np.eye(18))
    np.testing.assert_allclose(jacobian(lambda t: t * 2.5, x), 2.5 * np.eye(18))


def test_jacobian_matches_finite_differences():
    bottom = small_conv_bottom()
    x = np.random.default_rng(1).normal(size=(2, 4, 4))
    analytic = jacobian(bottom, x, chunk=7)
    numeric = finite_diff_jacobian(lambda t: bottom(t), x[None])
    assert analytic.shape == (48, 32)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_jacobian_leaves_param_grads_untouched():
    bottom = small_conv_bottom()
    jacobian(bottom, np.ones((2, 4, 4)))
    assert all(p.grad is None and p.requires_grad for p in bottom.parameters().values())


def test_sigma_dfil_cases():
    assert sigma_dfil(np.eye(10), 10, 4.0).sigma == 0.5
    assert sigma_dfil(2 * np.eye(7), 7, 1.0).sigma == 2.0
    with pytest.raises(ValueError):
        sigma_dfil(np.eye(3), 3, 0.0)


def test_trace_matches_naive():
    j = np.random.default_rng(2).normal(size=(9, 6))
    naive = sum(sum(j[i, k] * j[i, k] for i in range(9)) for k in range(6))
    assert abs(trace_jtj(j) - naive) / naive < 1e-10
    assert abs(trace_jtj(j) - np.trace(j.T @ j)) / naive < 1e-10


def test_sigma_fsinfo_analytic():
    assert abs(sigma_fsinfo(np.eye(16), 16, 0.0).sigma - 1 / math.sqrt(2 * math.pi * math.e)) < 1e-12
    assert abs(sigma_fsinfo(np.eye(16), 16, 0.0).sigma - 0.241971) < 1e-5
    assert abs(sigma_fsinfo(np.eye(16), 16, -1.0).sigma - math.sqrt(math.e / (2 * math.pi))) < 1e-12
    assert abs(sigma_fsinfo(np.eye(16), 16, -1.0).sigma - 0.657738) < 1e-5


def test_fsinfo_matches_svd_and_direct_det():
    rng = np.random.default_rng(3)
    j = rng.normal(size=(12, 8)) / 3
    d = 8
    s = np.linalg.svd(j, compute_uv=False)
    oracle = math.exp(np.sum(np.log(s)) / d) / math.sqrt(2 * math.pi * math.e) * math.exp(0.5)
    direct = np.linalg.det(j.T @ j) ** (1 / (2 * d)) / (math.exp(-0.5) * math.sqrt(2 * math.pi * math.e))
    got = sigma_fsinfo(j, d, -0.5).sigma
    assert abs(got - oracle) / oracle < 1e-6
    assert abs(got - direct) / direct < 1e-6


def test_rank_deficiency_flagged():
    j = np.zeros((4, 10))
    j[:, :4] = np.eye(4)
    ns = sigma_fsinfo(j, 10, -1.0)
    assert ns.rank_warning and ns.floored_fraction == 0.6
    assert not sigma_fsinfo(np.eye(10), 10, -1.0).rank_warning


def test_log_det_floor():
    logdet, floored = log_det_jtj(np.diag([1.0, 0.0]))
    assert floored == 1 and abs(logdet - math.log(1e-12)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.1, 10), st.floats(-3, 3))
def test_scale_equivariance(seed, c, f):
    j = np.random.default_rng(seed).normal(size=(8, 5))
    for fn, t in ((sigma_fsinfo, f), (sigma_dfil, abs(f) + 0.1)):
        a = fn(j, 5, t).sigma
        b = fn(c * j, 5, t).sigma
        assert abs(b - c * a) <= 1e-9 * c * a


def test_strict_monotonicity():
    j = np.random.default_rng(4).normal(size=(10, 6))
    fs = [sigma_fsinfo(j, 6, t).sigma for t in np.linspace(-3, 1, 10)]
    df = [sigma_dfil(j, 6, t).sigma for t in np.linspace(0.01, 2, 10)]
    assert all(a > b for a, b in zip(fs, fs[1:]))
    assert all(a > b for a, b in zip(df, df[1:]))


def test_calibrate_single_identical_and_pair():
    bottom = small_conv_bottom(relu=True)
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 2, 4, 4))
    budget = PrivacyBudget("dfil", 0.5)
    single = sigma_dfil(jacobian(bottom, a), None, 0.5).sigma
    assert calibrate(bottom, a[None], budget).sigma == single
    assert abs(calibrate(bottom, np.stack([a, a, a]), budget).sigma - single) < 1e-15
    pair = calibrate(bottom, np.stack([a, b]), budget, epoch=3)
    expected = (single + sigma_dfil(jacobian(bottom, b), None, 0.5).sigma) / 2
    assert abs(pair.sigma - expected) < 1e-15 and pair.epoch == 3 and pair.calib_size == 2
    with pytest.raises(ValueError):
        calibrate(bottom, np.zeros((0, 2, 4, 4)), budget)


def test_perturb_zero_sigma_identity():
    z = np.random.default_rng(6).normal(size=(3, 4))
    assert perturb(z, 0.0, 1) is z


def test_perturb_moments_and_determinism():
    z = np.zeros(1_000_000)
    out = perturb(z, 0.7, 123)
    assert abs(out.mean()) < 0.01 * 0.7
    assert abs(out.std() - 0.7) < 0.01 * 0.7
    assert np.array_equal(out, perturb(z, 0.7, 123))


def test_perturb_tensor_keeps_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    out = perturb(w * 2.0, NoiseScale(0.5), 0)
    out.sum().backward()
    np.testing.assert_array_equal(w.grad, [2.0, 2.0, 2.0])


def test_budget_validation():
    with pytest.raises(ValueError):
        PrivacyBudget("dfil", -1)
    with pytest.raises(ValueError):
        PrivacyBudget("epsilon", 1)
    assert PrivacyBudget("FSInfo", -2).kind == "fsinfo"


def test_calibration_csv(tmp_path):
    s = NoiseScale(0.25, PrivacyBudget("fsinfo", -1.0), epoch=2)
    write_calibration_csv([s], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,budget_kind,target,sigma,rank_warning"
    assert lines[1] == "2,fsinfo,-1.0,0.25,0"


def test_affine_shortcut_matches_per_sample():
    affine = small_conv_bottom(relu=False)
    assert affine.is_affine and not small_conv_bottom(relu=True).is_affine
    xs = np.random.default_rng(7).normal(size=(3, 2, 4, 4))
    budget = PrivacyBudget("fsinfo", -1.0)
    fast = calibrate(affine, xs, budget)
    slow = [sigma_fsinfo(jacobian(affine, x), None, -1.0).sigma for x in xs]
    assert max(abs(a - b) for a, b in zip(fast.per_sample, slow)) < 1e-12
    assert abs(fast.sigma - np.mean(slow)) < 1e-12
