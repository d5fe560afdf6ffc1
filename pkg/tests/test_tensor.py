import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bce_scalar, conv2d_naive
from veinfpn.errors import DegenerateBatchError, GeometryError, ParameterError, PoisonedGradientError
from veinfpn.tensor import (
    AdamState,
    BatchNormParams,
    Conv2dParams,
    Tensor,
    adam_step,
    add,
    batchnorm,
    bce_loss,
    concat_channels,
    conv2d,
    conv2d_forward,
    grad_check,
    relu,
    sigmoid,
    upsample_nearest,
)


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def conv_params(rng, c_in, c_out, k, stride=1, pad=0):
    p = Conv2dParams.create(c_in, c_out, k, stride, pad, rng)
    p.bias.data = rng.standard_normal(p.bias.shape).astype(np.float32)
    return p


# --------------------------------------------------------------------------
# forward semantics


def test_tensor_rejects_non_4d():
    with pytest.raises(ParameterError):
        Tensor(np.zeros((3, 3)))


@pytest.mark.parametrize(
    "n,c_in,c_out,h,w,k,stride,pad",
    [(1, 1, 1, 5, 5, 3, 1, 1), (2, 3, 4, 7, 6, 5, 2, 2), (1, 2, 3, 8, 8, 1, 2, 0), (2, 2, 2, 6, 9, 3, 1, 0)],
)
def test_conv_matches_naive(n, c_in, c_out, h, w, k, stride, pad):
    rng = np.random.default_rng(n * 100 + k)
    x = rng.standard_normal((n, c_in, h, w)).astype(np.float32)
    wt = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
    b = rng.standard_normal((1, c_out, 1, 1)).astype(np.float32)
    np.testing.assert_allclose(conv2d_forward(x, wt, b, stride, pad), conv2d_naive(x, wt, b, stride, pad), atol=1e-5)


def test_conv_hand_case():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2), dtype=np.float32)
    out = conv2d_forward(x, w, np.zeros((1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(out[0, 0], [[8, 12], [20, 24]])


def test_conv_geometry_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(GeometryError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Conv2dParams.create(1, 1, 5, rng=rng))
    with pytest.raises(ParameterError):
        conv2d(Tensor(np.zeros((1, 2, 8, 8))), Conv2dParams.create(1, 1, 3, rng=rng))


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros((1, 3, 1, 1), np.float32), 1, 1), x)


def test_upsample_and_concat():
    x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    up = upsample_nearest(Tensor(x), 2).data
    np.testing.assert_array_equal(up[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    cat = concat_channels([Tensor(x), Tensor(x + 10)])
    assert cat.shape == (1, 2, 2, 2)
    with pytest.raises(ParameterError):
        concat_channels([Tensor(x), Tensor(np.zeros((1, 1, 3, 3)))])


def test_sigmoid_stable_and_strict():
    y = sigmoid(Tensor(np.array([-100.0, -1.0, 0.0, 1.0, 30.0]).reshape(1, 1, 1, 5))).data
    assert np.all(np.isfinite(y))
    assert y[0, 0, 0, 2] == 0.5
    np.testing.assert_allclose(y[0, 0, 0, 3], 1 / (1 + np.exp(-1.0)), rtol=1e-6)


def test_bce_against_scalar_oracle():
    rng = np.random.default_rng(3)
    y = rng.uniform(0.01, 0.99, (1, 1, 4, 5)).astype(np.float32)
    t = (rng.random((1, 1, 4, 5)) > 0.5).astype(np.float32)
    assert bce_loss(Tensor(y), t).item() == pytest.approx(bce_scalar(y, t), abs=1e-6)


def test_bce_clamp_finite_and_flat():
    y = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2), requires_grad=True)
    loss = bce_loss(y, np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
    assert np.isfinite(loss.item())
    loss.backward()
    np.testing.assert_array_equal(y.grad, 0.0)


def test_batchnorm_train_and_running_stats():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32) * 2 + 1
    p = BatchNormParams.create(3)
    out = batchnorm(Tensor(x), p).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(p.running_mean, 0.1 * m, rtol=1e-5)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * v, rtol=1e-5)


def test_batchnorm_update_stats_flag_and_eval():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    p = BatchNormParams.create(2)
    batchnorm(Tensor(x), p, update_stats=False)
    np.testing.assert_array_equal(p.running_mean, 0)
    p.training = False
    out = batchnorm(Tensor(x), p).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batchnorm(Tensor(np.zeros((1, 2, 1, 1))), BatchNormParams.create(2))


def test_backward_accumulates_over_shared_inputs():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = add(x, x)
    y.backward(np.ones((1, 1, 2, 2), np.float32))
    np.testing.assert_array_equal(x.grad, 2.0)


# --------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_conv(seed):
    rng = np.random.default_rng(seed)
    for stride, pad, k in ((1, 1, 3), (2, 2, 5), (2, 0, 1)):
        x = rand(rng, 2, 2, 8, 8)
        p = conv_params(rng, 2, 3, k, stride, pad)
        rep = grad_check(lambda x, w, b: conv2d(x, Conv2dParams(w, b, stride, pad)), [x, p.weight, p.bias], seed=seed)
        assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_batchnorm(seed):
    rng = np.random.default_rng(seed)
    p = BatchNormParams.create(3)
    p.gamma.data = rng.uniform(0.5, 1.5, p.gamma.shape).astype(np.float32)
    x = rand(rng, 2, 3, 4, 4)
    rep = grad_check(lambda x, g, b: batchnorm(x, BatchNormParams(g, b), update_stats=False), [x, p.gamma, p.beta], tol=5e-3, seed=seed)
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_elementwise(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 1, 2, 4, 4)
    kink = np.abs(x.data) < 5e-3
    assert grad_check(relu, [x], exclude=[kink], seed=seed).passed
    assert grad_check(sigmoid, [rand(rng, 1, 2, 4, 4)], seed=seed).passed
    assert grad_check(lambda z: upsample_nearest(z, 4), [rand(rng, 1, 2, 2, 3)], seed=seed).passed
    a, b = rand(rng, 1, 1, 3, 3), rand(rng, 1, 2, 3, 3)
    assert grad_check(lambda a, b: concat_channels([a, b]), [a, b], seed=seed).passed
    t = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    y = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)), requires_grad=True)
    assert grad_check(lambda y: bce_loss(y, t), [y], tol=5e-3, h=1e-3, seed=seed).passed


def test_gradcheck_float32_and_kink_screen():
    x = Tensor(np.array([-0.5, 0.0, 0.3, 0.7]).reshape(1, 1, 2, 2), requires_grad=True)
    loose = grad_check(relu, [x], h=1e-3, dtype=np.float32)
    assert not loose.passed  # the kink at 0 gives a central slope of 1/2
    screened = grad_check(relu, [x], h=1e-3, dtype=np.float32, kink_screen=True)
    assert screened.passed and screened.skipped == 1 and screened.checked == 3
    assert x.data.dtype == np.float32

    def doubled(z):
        return Tensor.from_op(relu(z).data, [z], lambda g: (2.0 * g * (z.data > 0),))

    assert not grad_check(doubled, [x], h=1e-3, dtype=np.float32, kink_screen=True).passed


# --------------------------------------------------------------------------
# optimiser


def test_adam_three_step_trace():
    p = Tensor(np.array([1.0, -2.0]).reshape(1, 1, 1, 2), requires_grad=True)
    state = AdamState(lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.25, 0.0]), np.array([-1.0, 2.0])]
    # hand-rolled reference in float64
    m = np.zeros(2)
    v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    for t, g in enumerate(grads, start=1):
        adam_step([p], [g.reshape(1, 1, 1, 2).astype(np.float32)], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data.reshape(-1), ref, rtol=1e-5)
    assert state.step == 3


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros((1, 1, 1, 3)), requires_grad=True)
    adam_step([p], [np.array([3.0, -0.01, 7.0], np.float32).reshape(1, 1, 1, 3)], AdamState(lr=1e-3))
    np.testing.assert_allclose(p.data.reshape(-1), [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_adam_poisoned_gradient_leaves_state():
    p = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
    state = AdamState()
    with pytest.raises(PoisonedGradientError):
        adam_step([p], [np.array([np.nan, 1.0], np.float32).reshape(1, 1, 1, 2)], state)
    np.testing.assert_array_equal(p.data, 1.0)
    assert state.step == 0 and not state.m


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(3, 7),
    st.integers(3, 7),
    st.sampled_from([1, 3]),
    st.integers(1, 2),
    st.integers(0, 1),
    st.integers(0, 2**31 - 1),
)
def test_conv_property_against_oracle(n, c_in, c_out, h, w, k, stride, pad, seed):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c_in, h, w)).astype(np.float32)
    wt = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
    b = rng.standard_normal((1, c_out, 1, 1)).astype(np.float32)
    np.testing.assert_allclose(conv2d_forward(x, wt, b, stride, pad), conv2d_naive(x, wt, b, stride, pad), atol=1e-5)
