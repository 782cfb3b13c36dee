import numpy as np
import pytest

from flexdistill.errors import DimensionError, NumericError, UsageError
from flexdistill.gradcheck import check_flexible_loss, grad_check, relative_error
from flexdistill.layers import (AvgPool2d, BatchNorm, Conv2d, Flatten, GlobalAvgPool, Linear, ReLU,
                                kaiming_uniform)
from flexdistill.losses import DistillConfig, one_hot
from flexdistill.models import EarlyExitNet
from flexdistill.params import ParamStore
from flexdistill.tensor import Rng

from oracles import batchnorm_train, conv2d_loops

SEEDS = range(20)


def test_linear_identity_and_transpose_backward():
    store = ParamStore()
    lin = Linear(store, "l", 3, 3)
    lin.weight.value[...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    y, ctx = lin.forward(x)
    assert np.array_equal(y, x)
    w = np.arange(12.0).reshape(4, 3)
    lin2 = Linear(ParamStore(), "l2", 3, 4)
    lin2.weight.value[...] = w
    _, ctx = lin2.forward(np.zeros((1, 3)))
    assert np.array_equal(lin2.backward(ctx, np.ones((1, 4))), (w.T @ np.ones(4))[None])


def test_relu_examples():
    r = ReLU()
    y, ctx = r.forward(np.array([[-1.0, 2.0]]))
    assert np.array_equal(y, [[0.0, 2.0]])
    assert np.array_equal(r.backward(ctx, np.array([[5.0, 5.0]])), [[0.0, 5.0]])


def test_conv_constant_image_interior():
    store = ParamStore()
    conv = Conv2d(store, "c", 1, 1, 3, 1, 1, bias=False)
    conv.kernel.value[...] = 1.0
    c = 2.5
    y, _ = conv.forward(np.full((1, 1, 5, 5), c))
    assert np.allclose(y[0, 0, 1:-1, 1:-1], 9 * c, rtol=0, atol=1e-12)
    assert y[0, 0, 0, 0] == pytest.approx(4 * c)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1)])
def test_conv_matches_sliding_window_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    store = ParamStore()
    conv = Conv2d(store, "c", 2, 3, k, stride, pad, rng=Rng(1))
    conv.bias.value[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 6, 5))
    y, _ = conv.forward(x)
    np.testing.assert_allclose(y, conv2d_loops(x, conv.kernel.value, conv.bias.value, stride, pad), atol=1e-12)


def test_conv_rejects_even_kernel_and_bad_input():
    with pytest.raises(DimensionError):
        Conv2d(ParamStore(), "c", 1, 1, 2)
    conv = Conv2d(ParamStore(), "c", 2, 1, 3, rng=Rng(0))
    with pytest.raises(DimensionError):
        conv.forward(np.zeros((1, 3, 4, 4)))


def _check_layer(layer, store, x, train=True, seed=0, **kw):
    """FD-check parameter and input gradients of sum(R * layer(x))."""
    rng = np.random.default_rng(seed + 1000)
    y, _ = layer.forward(x.copy(), train=train, **kw) if train is not None else layer.forward(x.copy())
    upstream = rng.standard_normal(y.shape)

    def run(inp):
        out, ctx = layer.forward(inp, train=train, **kw) if train is not None else layer.forward(inp)
        return float(np.sum(upstream * out)), ctx

    def f(s):
        val, ctx = run(x)
        layer.backward(ctx, upstream)
        return val

    worst = grad_check(f, store).max_error if len(store.trainable()) else 0.0
    # input gradient
    _, ctx = run(x)
    store.zero_grad()
    gx = layer.backward(ctx, upstream)
    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    buffers = {p.name: p.value.copy() for p in store.buffers()}
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + 1e-5
        up = run(x)[0]
        flat[i] = o - 1e-5
        dn = run(x)[0]
        flat[i] = o
        nflat[i] = (up - dn) / 2e-5
        for p in store.buffers():
            p.value[...] = buffers[p.name]
    return max(worst, float(np.max(relative_error(gx, num))))


@pytest.mark.parametrize("seed", SEEDS)
def test_every_layer_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    r = Rng(seed)
    errs = {}
    s = ParamStore()
    errs["linear"] = _check_layer(Linear(s, "l", 4, 3, rng=r), s, rng.standard_normal((5, 4)), seed=seed)
    s = ParamStore()
    lin = Linear(s, "ls", 4, 3, rng=r)
    errs["linear_sliced"] = _check_layer(lin, s, rng.standard_normal((5, 2)), seed=seed,
                                         in_features=2, out_features=2)
    s = ParamStore()
    conv = Conv2d(s, "c", 2, 3, 3, 1 + seed % 2, 1, rng=r)
    conv.bias.value[...] = rng.standard_normal(3)
    errs["conv"] = _check_layer(conv, s, rng.standard_normal((2, 2, 4, 4)), seed=seed)
    s = ParamStore()
    conv = Conv2d(s, "cs", 3, 4, 3, 1, 1, bias=False, rng=r)
    errs["conv_sliced"] = _check_layer(conv, s, rng.standard_normal((2, 2, 4, 4)), seed=seed,
                                       in_channels=2, out_channels=3)
    for shape in [(6, 3), (3, 3, 2, 2)]:
        s = ParamStore()
        bn = BatchNorm(s, "bn", 3)
        bn.gamma.value[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.value[...] = rng.standard_normal(3)
        errs[f"bn_train{len(shape)}"] = _check_layer(bn, s, rng.standard_normal(shape), seed=seed)
        bn.running_mean.value[...] = rng.standard_normal(3)
        bn.running_var.value[...] = rng.uniform(0.5, 2, 3)
        errs[f"bn_eval{len(shape)}"] = _check_layer(bn, s, rng.standard_normal(shape), train=False, seed=seed)
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    errs["relu"] = _check_layer(ReLU(), ParamStore(), x, train=None, seed=seed)
    errs["avgpool"] = _check_layer(AvgPool2d(2), ParamStore(), rng.standard_normal((2, 2, 4, 4)), train=None, seed=seed)
    errs["gap"] = _check_layer(GlobalAvgPool(), ParamStore(), rng.standard_normal((2, 3, 3, 2)), train=None, seed=seed)
    errs["flatten"] = _check_layer(Flatten(), ParamStore(), rng.standard_normal((2, 3, 2, 2)), train=None, seed=seed)
    bad = {k: v for k, v in errs.items() if not v < 1e-4}
    assert not bad, bad


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_train_output_standardized(seed):
    rng = np.random.default_rng(seed)
    # channel scales well above sqrt(eps), where var/(var+eps) is within 1e-5 of 1
    x = rng.standard_normal((16, 4, 3, 3)) * rng.uniform(2, 10, (1, 4, 1, 1)) + rng.standard_normal((1, 4, 1, 1))
    bn = BatchNorm(ParamStore(), "bn", 4)
    y, _ = bn.forward(x, train=True)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-5)
    ref, _ = batchnorm_train(x, bn.gamma.value, bn.beta.value)
    np.testing.assert_allclose(y, ref, atol=1e-12)
    assert np.all(bn.running_var.value >= 0)


def test_batchnorm_running_update_and_eval_purity():
    x = np.random.default_rng(0).standard_normal((10, 2)) + 3
    bn = BatchNorm(ParamStore(), "bn", 2, momentum=0.1)
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.running_mean.value, 0.1 * x.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(bn.running_var.value, 0.9 + 0.1 * x.var(axis=0, ddof=1), atol=1e-15)
    y1, _ = bn.forward(x, train=False)
    y2, _ = bn.forward(x, train=False)
    assert np.array_equal(y1, y2)


@pytest.mark.parametrize("make", [
    lambda s: (Linear(s, "l", 3, 2, rng=Rng(0)), np.ones((2, 3))),
    lambda s: (Conv2d(s, "c", 1, 2, 3, rng=Rng(0)), np.ones((2, 1, 3, 3))),
    lambda s: (BatchNorm(s, "b", 3), np.arange(6.0).reshape(2, 3)),
])
def test_zero_upstream_gives_zero_gradients(make):
    s = ParamStore()
    layer, x = make(s)
    y, ctx = layer.forward(x, train=True)
    gx = layer.backward(ctx, np.zeros_like(y))
    assert not np.any(gx)
    assert all(not np.any(p.grad) for p in s.trainable())


def test_backward_accumulates_and_rejects_stale_context():
    s = ParamStore()
    lin = Linear(s, "l", 2, 2, rng=Rng(0))
    x = np.ones((1, 2))
    _, c1 = lin.forward(x)
    _, c2 = lin.forward(x)
    lin.backward(c1, np.ones((1, 2)))
    once = lin.weight.grad.copy()
    lin.backward(c2, np.ones((1, 2)))
    assert np.array_equal(lin.weight.grad, 2 * once)
    with pytest.raises(UsageError):
        lin.backward(c1, np.ones((1, 2)))
    other = Linear(s, "m", 2, 2, rng=Rng(1))
    _, c3 = other.forward(x)
    with pytest.raises(UsageError):
        lin.backward(c3, np.ones((1, 2)))


def test_kaiming_uniform_bound():
    w = kaiming_uniform(Rng(0), (200, 50), 50)
    assert np.max(np.abs(w)) <= np.sqrt(6 / 50)


def test_grad_check_closed_forms():
    s = ParamStore()
    a = s.add("a", np.random.default_rng(0).standard_normal((3, 2)))

    def squares(store):
        a.grad += 2 * a.value
        return float(np.sum(a.value ** 2))

    assert grad_check(squares, s).max_error < 1e-7
    res = grad_check(lambda store: 1.0, s)
    assert res.max_error == 0.0 and res.analytic == 0.0 and res.numeric == 0.0
    with pytest.raises(NumericError):
        grad_check(lambda store: float("nan"), s)


def test_grad_check_restores_buffers():
    s = ParamStore()
    bn = BatchNorm(s, "bn", 2)

    def f(store):
        y, ctx = bn.forward(np.arange(8.0).reshape(4, 2), train=True)
        bn.backward(ctx, np.ones_like(y))
        return float(y.sum())

    before = bn.running_mean.value.copy()
    grad_check(f, s)
    assert np.array_equal(bn.running_mean.value, before)


@pytest.mark.parametrize("detach", [True, False])
def test_tam_loss_on_two_submodel_toy(detach):
    rng = np.random.default_rng(0)
    model = EarlyExitNet((3,), 3, exits=2, width=5, seed=2)
    x = rng.standard_normal((8, 3))
    y = one_hot(rng.integers(0, 3, 8), 3)
    cfg = DistillConfig(tau=2.0, lam=0.8, strategy="TAM", detach_teacher=detach)
    assert check_flexible_loss(model, x, y, cfg).max_error < 1e-4
