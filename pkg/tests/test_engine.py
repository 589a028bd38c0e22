import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitveil.engine import (
    AdamState,
    LayerSpec,
    NonDeterministicError,
    ShapeError,
    Tensor,
    adam_step,
    finite_diff_jacobian,
    init_params,
    layer_forward,
    max_relative_error,
    numeric_grad,
    output_shape,
)

RTOL = 1e-4


def _layer_case(kind):
    return {
        "conv2d": (LayerSpec.conv(3, 4, kernel=3, stride=2, padding=1), (2, 3, 5, 5)),
        "conv_transpose2d": (LayerSpec.deconv(3, 2, kernel=3, stride=2, padding=1), (2, 3, 3, 3)),
        "linear": (LayerSpec.fc(12, 5), (3, 3, 2, 2)),
        "relu": (LayerSpec("relu"), (2, 3, 4, 4)),
        "avg_pool2d": (LayerSpec.pool(2), (2, 3, 4, 6)),
        "sigmoid_output": (LayerSpec("sigmoid_output"), (2, 3, 3, 3)),
    }[kind]


def test_relu_definition():
    out = layer_forward(LayerSpec("relu"), Tensor([[-1.0, 0.0, 2.0]]))
    assert out.data.tolist() == [[0.0, 0.0, 2.0]]


def test_identity_convolution():
    spec = LayerSpec.conv(1, 1, kernel=1, padding=0)
    params = {"weight": Tensor(np.ones((1, 1, 1, 1))), "bias": Tensor(np.zeros(1))}
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 5, 4)))
    assert np.array_equal(layer_forward(spec, x, params).data, x.data)


def _brute_conv_transpose(x, w, stride, padding):
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    full = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    for oi in range(o):
                        for a in range(k):
                            for b in range(k):
                                full[ni, oi, i * stride + a, j * stride + b] += x[ni, ci, i, j] * w[ci, oi, a, b]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    return full[:, :, padding:padding + ho, padding:padding + wo]


def test_conv_transpose_single_pixel():
    spec = LayerSpec.deconv(1, 1, kernel=2, stride=2)
    params = {"weight": Tensor(np.ones((1, 1, 2, 2))), "bias": Tensor(np.zeros(1))}
    out = layer_forward(spec, Tensor(np.full((1, 1, 1, 1), 3.0)), params)
    expected = _brute_conv_transpose(np.full((1, 1, 1, 1), 3.0), np.ones((1, 1, 2, 2)), 2, 0)
    assert np.array_equal(expected, np.full((1, 1, 2, 2), 3.0))
    assert np.array_equal(out.data, expected)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 0, 2), (3, 1, 4)])
def test_conv_transpose_matches_brute_force(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 3, 4))
    w = rng.normal(size=(3, 2, k, k))
    spec = LayerSpec.deconv(3, 2, kernel=k, stride=stride, padding=padding)
    out = layer_forward(spec, Tensor(x), {"weight": Tensor(w), "bias": Tensor(np.zeros(2))})
    np.testing.assert_allclose(out.data, _brute_conv_transpose(x, w, stride, padding), atol=1e-12)


def test_conv2d_matches_brute_force():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = layer_forward(LayerSpec.conv(3, 4, 3, 2, 1), Tensor(x), {"weight": Tensor(w), "bias": Tensor(b)}).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("ncab,ocab->no", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("kind", ["conv2d", "conv_transpose2d", "linear", "relu", "avg_pool2d", "sigmoid_output"])
def test_layer_gradients_match_finite_differences(kind):
    spec, shape = _layer_case(kind)
    rng = np.random.default_rng(7)
    params = init_params(spec, rng)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    probe = rng.normal(size=(shape[0],) + output_shape(spec, shape[1:]))

    def loss_fn():
        return (layer_forward(spec, x, params) * probe).sum()

    loss_fn().backward()
    assert max_relative_error(x.grad, numeric_grad(loss_fn, x)) < RTOL
    for p in params.values():
        assert p.grad.shape == p.shape
        assert max_relative_error(p.grad, numeric_grad(loss_fn, p)) < RTOL


@pytest.mark.parametrize("kind", ["conv2d", "conv_transpose2d", "linear", "avg_pool2d"])
def test_shape_algebra(kind):
    spec, shape = _layer_case(kind)
    params = init_params(spec, np.random.default_rng(0))
    out = layer_forward(spec, Tensor(np.zeros(shape)), params)
    assert out.shape[1:] == output_shape(spec, shape[1:])
    c, h, w = shape[1:] if len(shape) == 4 else (None, None, None)
    if kind == "conv2d":
        assert out.shape == (2, 4, (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1)
    elif kind == "conv_transpose2d":
        assert out.shape == (2, 2, (h - 1) * 2 - 2 + 3, (w - 1) * 2 - 2 + 3)
    elif kind == "avg_pool2d":
        assert out.shape == (2, 3, h // 2, w // 2)


def test_shape_mismatch_names_layer_and_shapes():
    spec = LayerSpec.conv(3, 4)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeError, match=r"conv2d\(3->4.*\(5, 8, 8\)"):
        layer_forward(spec, Tensor(np.zeros((1, 5, 8, 8))), params)


def test_empty_output_rejected():
    with pytest.raises(ShapeError):
        output_shape(LayerSpec.conv(1, 1, kernel=5, padding=0), (1, 3, 3))


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ValueError):
        LayerSpec.conv(0, 3)
    with pytest.raises(ValueError):
        LayerSpec("dropout")


def test_backward_linear_form():
    x = np.array([1.0, -2.0, 3.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    (w * x).sum().backward()
    assert np.array_equal(w.grad, x)


def test_backward_quadratic():
    w = Tensor(np.zeros(4), requires_grad=True)
    ((w - 1.0) ** 2).mean().backward()
    np.testing.assert_allclose(w.grad, -2.0 / 4)


def test_backward_rejects_non_scalar():
    w = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (w * 2.0).backward()


def test_backward_names_nan_node():
    w = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError, match="sqrt"):
        w.sqrt().sum().backward()


def test_graph_consumed_after_backward():
    w = Tensor(np.ones(2), requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_composed_network_gradients():
    rng = np.random.default_rng(11)
    specs = [LayerSpec.conv(2, 3, 3, 1, 1), LayerSpec("relu"), LayerSpec.pool(2),
             LayerSpec.conv(3, 4, 3, 1, 1), LayerSpec("relu"), LayerSpec.fc(16, 3)]
    params = [init_params(s, rng) for s in specs]
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    labels = np.array([0, 2])

    def loss_fn():
        h = x
        for s, p in zip(specs, params):
            h = layer_forward(s, h, p)
        logp = h.log_softmax()
        return -(logp * np.eye(3)[labels]).sum() * 0.5

    loss_fn().backward()
    for p in params:
        for t in p.values():
            assert max_relative_error(t.grad, numeric_grad(loss_fn, t)) < RTOL


def test_adam_zero_gradient_first_step_unchanged():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState(lr=0.1, weight_decay=0.0)
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_bias_corrected_unit_step():
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    state = AdamState(lr=0.1, weight_decay=0.0, beta1=0.9, beta2=0.999)
    adam_step(p, {"w": np.array([1.0])}, state)
    np.testing.assert_allclose(p["w"].data, [0.9], atol=1e-8)


def test_adam_decoupled_weight_decay():
    p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
    adam_step(p, {"w": np.zeros(1)}, AdamState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p["w"].data, [2.0 * (1 - 0.05)])


def test_adam_deterministic():
    def run():
        p = {"w": Tensor(np.array([0.3, -0.7]), requires_grad=True)}
        st_ = AdamState(lr=0.01)
        for _ in range(2):
            adam_step(p, {"w": np.array([0.5, -1.5])}, st_)
        return p["w"].data.copy(), st_.t

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and a[1] == b[1] == 2


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState())


def test_fd_jacobian_identity_and_scaling():
    x = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_allclose(finite_diff_jacobian(lambda t: t, x), np.eye(6), atol=1e-8)
    np.testing.assert_allclose(finite_diff_jacobian(lambda t: t * 2.0, x), 2 * np.eye(6), atol=1e-8)


def test_fd_jacobian_rejects_nondeterministic():
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_diff_jacobian(lambda t: t + rng.normal(size=t.shape), np.zeros(3))


def test_fd_jacobian_matches_backward_rows():
    rng = np.random.default_rng(5)
    spec = LayerSpec.conv(2, 3, 3, 1, 1)
    params = init_params(spec, rng)
    x0 = rng.normal(size=(1, 2, 4, 4))

    def fn(t):
        return layer_forward(LayerSpec("relu"), layer_forward(spec, t, params))

    numeric = finite_diff_jacobian(fn, x0)
    rows = []
    for i in range(numeric.shape[0]):
        x = Tensor(x0, requires_grad=True)
        out = fn(x)
        seed = np.zeros(out.shape)
        seed.reshape(-1)[i] = 1.0
        out.backward(seed)
        rows.append(x.grad.reshape(-1) if x.grad is not None else np.zeros(x0.size))
    assert max_relative_error(np.array(rows), numeric) < RTOL


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2),
       st.integers(1, 3))
def test_conv_shape_formula_property(c, h, w, k, p, s):
    spec = LayerSpec.conv(c, 2, kernel=k, stride=s, padding=p)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho <= 0 or wo <= 0:
        with pytest.raises(ShapeError):
            output_shape(spec, (c, h, w))
        return
    params = init_params(spec, np.random.default_rng(0))
    out = layer_forward(spec, Tensor(np.ones((1, c, h, w))), params)
    assert out.shape == (1, 2, ho, wo) == (1,) + output_shape(spec, (c, h, w))
