"""Autodiff engine: forward values against loop oracles, gradients against
finite differences, plus tape-semantics edge cases."""

import numpy as np
import pytest

from istdyolo import tensor as T

from oracles import (
    batchnorm2d_ref,
    conv2d_ref,
    depthwise_conv2d_ref,
    fd_grad,
    maxpool2d_ref,
)

rng = np.random.default_rng(1234)


def randn(*shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)])
def test_conv2d_matches_loop_reference(stride, padding, k):
    x = randn(2, 3, 9, 8)
    w = randn(4, 3, k, k)
    b = randn(4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding)
    want = conv2d_ref(x, w, b, stride=stride, padding=padding)
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_conv2d_no_bias():
    x = randn(1, 2, 5, 5)
    w = randn(3, 2, 3, 3)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=1, padding=1)
    np.testing.assert_allclose(got.data, conv2d_ref(x, w, None, 1, 1), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_depthwise_conv2d_matches_loop_reference(stride, padding):
    x = randn(2, 5, 8, 7)
    w = randn(5, 1, 3, 3)
    got = T.depthwise_conv2d(T.Tensor(x), T.Tensor(w), stride=stride, padding=padding)
    want = depthwise_conv2d_ref(x, w, stride=stride, padding=padding)
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
def test_maxpool2d_matches_loop_reference(k, stride):
    x = randn(2, 3, 9, 8)
    got = T.maxpool2d(T.Tensor(x), k, stride)
    np.testing.assert_allclose(got.data, maxpool2d_ref(x, k, stride), rtol=0, atol=0)


def test_batchnorm_training_matches_reference_and_updates_running_stats():
    x = randn(4, 3, 5, 5)
    gamma, beta = randn(3), randn(3)
    rm = np.zeros(3)
    rv = np.ones(3)
    got = T.batchnorm2d(
        T.Tensor(x), T.Tensor(gamma), T.Tensor(beta), rm, rv, eps=1e-5, training=True, momentum=0.1
    )
    np.testing.assert_allclose(got.data, batchnorm2d_ref(x, gamma, beta, 1e-5), rtol=1e-10, atol=1e-10)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-12)


def test_batchnorm_eval_uses_running_stats_only():
    x = randn(2, 3, 4, 4)
    rm = randn(3)
    rv = np.abs(randn(3)) + 0.5
    gamma, beta = randn(3), randn(3)
    got = T.batchnorm2d(
        T.Tensor(x), T.Tensor(gamma), T.Tensor(beta), rm.copy(), rv.copy(), eps=1e-5, training=False
    )
    want = gamma[None, :, None, None] * (x - rm[None, :, None, None]) / np.sqrt(
        rv[None, :, None, None] + 1e-5
    ) + beta[None, :, None, None]
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_upsample_nearest2x_values_and_shape():
    x = np.arange(12.0).reshape(1, 3, 2, 2)
    got = T.upsample_nearest2x(T.Tensor(x))
    assert got.shape == (1, 3, 4, 4)
    assert got.data[0, 0, 0, 0] == got.data[0, 0, 0, 1] == got.data[0, 0, 1, 1] == x[0, 0, 0, 0]
    assert got.data[0, 2, 3, 3] == x[0, 2, 1, 1]


def test_channel_shuffle_is_fixed_permutation():
    x = np.arange(8.0).reshape(1, 8, 1, 1)
    got = T.channel_shuffle(T.Tensor(x), groups=2)
    # (g, c/g) transpose of [0..7] in 2 groups: 0,4,1,5,2,6,3,7
    np.testing.assert_array_equal(got.data[0, :, 0, 0], [0, 4, 1, 5, 2, 6, 3, 7])


def test_concat_channels_order_preserved():
    a = np.full((1, 2, 3, 3), 1.0)
    b = np.full((1, 3, 3, 3), 2.0)
    got = T.concat_channels([T.Tensor(a), T.Tensor(b)])
    assert got.shape == (1, 5, 3, 3)
    assert got.data[0, 1, 0, 0] == 1.0 and got.data[0, 2, 0, 0] == 2.0


def test_bce_with_logits_matches_naive_formula_and_is_stable():
    z = np.array([-50.0, -2.0, 0.0, 3.0, 80.0])
    y = np.array([0.0, 1.0, 0.5, 0.0, 1.0])
    got = T.bce_with_logits(T.Tensor(z), y)
    # naive form blows up at |z| = 80; evaluate it only where safe
    safe = np.abs(z) < 30
    p = 1.0 / (1.0 + np.exp(-z[safe]))
    naive = -(y[safe] * np.log(p) + (1 - y[safe]) * np.log(1 - p))
    np.testing.assert_allclose(got.data[safe], naive, rtol=1e-10)
    assert np.all(np.isfinite(got.data))
    assert got.data[0] == pytest.approx(0.0, abs=1e-20)  # z=-50, y=0
    assert got.data[4] == pytest.approx(0.0, abs=1e-20)  # z=+80, y=1


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_conv2d_gradients_match_finite_differences():
    x = randn(2, 3, 6, 6)
    w = randn(4, 3, 3, 3)
    b = randn(4)

    def loss(xv, wv, bv):
        out = conv2d_ref(xv, wv, bv, stride=2, padding=1)
        return float((out * out).sum())

    want = fd_grad(loss, [x.copy(), w.copy(), b.copy()], eps=1e-6)
    xt, wt, bt = T.Tensor(x, requires_grad=True), T.Tensor(w, requires_grad=True), T.Tensor(b, requires_grad=True)
    out = T.conv2d(xt, wt, bt, stride=2, padding=1)
    (out * out).sum().backward()
    for t, g in zip([xt, wt, bt], want):
        np.testing.assert_allclose(t.grad, g, rtol=1e-5, atol=1e-7)


def test_engine_grad_check_passes_for_composite_graph():
    x = T.Tensor(randn(2, 4, 6, 6))
    w1 = T.Tensor(randn(6, 4, 3, 3) * 0.3)
    wd = T.Tensor(randn(6, 1, 3, 3) * 0.3)
    gamma = T.Tensor(np.abs(randn(6)) + 0.5)
    beta = T.Tensor(randn(6))

    def fn(xv, w1v, wdv, gv, bv):
        h = T.conv2d(xv, w1v, stride=1, padding=1)
        h = T.batchnorm2d(h, gv, bv, np.zeros(6), np.ones(6), training=True)
        h = T.silu(h)
        h = T.depthwise_conv2d(h, wdv, stride=1, padding=1)
        h = T.maxpool2d(h, 2, 2)
        h = T.upsample_nearest2x(h)
        h = T.channel_shuffle(h, 2)
        a, b = h[:, :3], h[:, 3:]
        h = T.concat_channels([b, a])
        return (h * h).mean()

    assert T.grad_check(fn, [x, w1, wd, gamma, beta], eps=1e-6) < 1e-7


def test_grad_check_catches_broken_gradient(monkeypatch):
    """Corrupt one activation gradient; the audit must report a large error."""
    real = T._silu_grad
    monkeypatch.setattr(T, "_silu_grad", lambda x, s: real(x, s) * 1.01)
    x = T.Tensor(randn(2, 3, 4, 4))
    err = T.grad_check(lambda xv: T.silu(xv).mean(), [x], eps=1e-6)
    assert err > 1e-4


def test_elementwise_and_reduction_gradients():
    a = T.Tensor(randn(3, 4))
    b = T.Tensor(randn(3, 4))
    c = T.Tensor(randn(4))  # broadcast operand

    def fn(av, bv, cv):
        out = (av * bv + cv) / (T.exp(av) + 1.0)
        out = T.maximum(out, bv * 0.5) - T.minimum(out, 0.1 * av)
        return (out * out).mean() + T.sqrt(T.clamp_min((av * av).sum(), 1e-8))

    assert T.grad_check(fn, [a, b, c], eps=1e-6) < 1e-8


def test_sqrt_subgradient_zero_at_zero():
    x = T.Tensor(np.array([0.0, 4.0]), requires_grad=True)
    T.sqrt(x).sum().backward()
    assert x.grad[0] == 0.0
    assert x.grad[1] == pytest.approx(0.25)


def test_slice_and_take_flat_gradients_accumulate():
    x = T.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    y = T.take_flat(x, np.array([0, 0, 5, 11]))
    y.sum().backward()
    assert x.grad[0, 0] == 2.0  # duplicate index sums
    assert x.grad[1, 1] == 1.0 and x.grad[2, 3] == 1.0
    x2 = T.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    (x2[1:, :2]).sum().backward()
    assert x2.grad.sum() == 4.0 and x2.grad[0].sum() == 0.0


def test_backward_through_shared_subgraph_accumulates_once_per_use():
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    y = x * x  # reused twice below
    z = y + y
    z.sum().backward()
    assert x.grad[0] == pytest.approx(12.0)  # d/dx 2x^2


# ---------------------------------------------------------------------------
# semantics and errors
# ---------------------------------------------------------------------------


def test_backward_requires_scalar():
    x = T.Tensor(randn(2, 2), requires_grad=True)
    with pytest.raises(T.ShapeError, match="scalar"):
        (x * 2.0).backward()


def test_shape_errors_name_the_offending_dimensions():
    x = T.Tensor(randn(1, 3, 8, 8))
    w = T.Tensor(randn(4, 5, 3, 3))
    with pytest.raises(T.ShapeError, match="3 channels.*expects 5"):
        T.conv2d(x, w)
    with pytest.raises(T.ShapeError, match="does not fit"):
        T.conv2d(T.Tensor(randn(1, 3, 2, 2)), T.Tensor(randn(4, 3, 5, 5)))
    with pytest.raises(T.ShapeError, match="matching"):
        T.concat_channels([T.Tensor(randn(1, 2, 4, 4)), T.Tensor(randn(1, 2, 5, 5))])
    with pytest.raises(T.ShapeError, match="4-D"):
        T.maxpool2d(T.Tensor(randn(3, 3)), 2, 2)


def test_no_grad_suppresses_tape():
    x = T.Tensor(randn(2, 2), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert y._backward is None and y._prev == ()
    assert not y.requires_grad


def test_finite_checks_raise_with_op_name():
    x = T.Tensor(np.array([1.0, 0.0]))
    with T.finite_checks():
        with pytest.raises(FloatingPointError, match="div"):
            T.div(T.Tensor(np.array([1.0, 1.0])), x)


def test_grad_of_nonparticipating_tensor_stays_none():
    x = T.Tensor(randn(2), requires_grad=True)
    z = T.Tensor(randn(2), requires_grad=True)
    (x * x).sum().backward()
    assert z.grad is None


def test_ops_do_not_mutate_inputs():
    x = np.ones((1, 2, 4, 4))
    xt = T.Tensor(x.copy())
    T.silu(xt)
    T.maxpool2d(xt, 2, 2)
    T.conv2d(xt, T.Tensor(np.ones((2, 2, 3, 3))), padding=1)
    np.testing.assert_array_equal(xt.data, x)


def test_float32_pipeline_preserves_dtype():
    x = T.Tensor(randn(1, 3, 8, 8).astype(np.float32))
    w = T.Tensor(randn(4, 3, 3, 3).astype(np.float32), requires_grad=True)
    out = T.silu(T.conv2d(x, w, stride=1, padding=1))
    assert out.dtype == np.float32
    out.mean().backward()
    assert w.grad.dtype == np.float32
