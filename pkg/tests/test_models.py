import numpy as np
import pytest

from flexdistill.errors import DimensionError, ParameterError
from flexdistill.layers import Conv2d, Linear
from flexdistill.losses import DistillConfig, flexible_loss, one_hot
from flexdistill.models import EarlyExitNet, SlimmableNet, WidthSpec
from flexdistill.params import ParamStore

from oracles import batchnorm_train, conv2d_loops

SEEDS = range(20)


def test_width_spec():
    ws = WidthSpec([0.25, 0.5, 0.75, 1.0])
    assert ws.channels(16) == [4, 8, 12, 16]
    assert ws.channels(3) == [1, 2, 3, 3]
    assert WidthSpec([0.1, 1.0]).channels(1) == [1, 1]
    for bad in ([0.5, 0.5, 1.0], [0.5, 0.75], [0.0, 1.0], [1.0, 0.5], [], [0.5, 1.2]):
        with pytest.raises(ParameterError):
            WidthSpec(bad)


def _plain_conv_forward(model, x, width_index, train=True):
    """The full network rebuilt from copied arrays with oracle ops only."""
    p = {n: model.store[n].value.copy() for n in model.store.names()}
    h = x
    for k in range(1, len(model.blocks) + 1):
        c_out = model.blocks[k - 1].active[width_index - 1]
        c_in = h.shape[1]
        w = p[f"block{k}.conv.kernel"][:c_out, :c_in]
        z = conv2d_loops(h, w, None, 1, 1)
        bn = f"block{k}.bn.w{width_index}"
        if train:
            z, _ = batchnorm_train(z, p[bn + ".gamma"], p[bn + ".beta"])
        else:
            mu = p[bn + ".running_mean"].reshape(1, -1, 1, 1)
            var = p[bn + ".running_var"].reshape(1, -1, 1, 1)
            z = p[bn + ".gamma"].reshape(1, -1, 1, 1) * (z - mu) / np.sqrt(var + 1e-5) + p[bn + ".beta"].reshape(1, -1, 1, 1)
        z = np.maximum(z, 0)
        n, c, hh, ww = z.shape
        h = z.reshape(n, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5))
    flat = h.reshape(h.shape[0], -1)
    return flat @ p["head.weight"][:, :flat.shape[1]].T + p["head.bias"]


@pytest.mark.parametrize("seed", range(5))
def test_full_width_equals_plain_network(seed):
    rng = np.random.default_rng(seed)
    model = SlimmableNet((2, 4, 4), 5, widths=[0.5, 1.0], channels=(3, 4), seed=seed)
    for p in model.store.trainable():
        if "bn" in p.name:
            p.value[...] = rng.uniform(0.5, 1.5, p.value.shape) if p.name.endswith("gamma") else rng.standard_normal(p.value.shape)
    x = rng.standard_normal((3, 2, 4, 4))
    out = model.forward_all(x, train=True)[-1]
    assert np.max(np.abs(out - _plain_conv_forward(model, x, 2, train=True))) <= 1e-12
    for p in model.store.buffers():
        p.value[...] = rng.uniform(0.5, 1.5, p.value.shape)
    out = model.forward_one(x, 2, train=False)
    assert np.max(np.abs(out - _plain_conv_forward(model, x, 2, train=False))) <= 1e-12


def test_dense_full_width_equals_plain_mlp():
    rng = np.random.default_rng(1)
    model = SlimmableNet((3,), 4, widths=[0.25, 1.0], channels=(8, 6), kind="dense", seed=1)
    x = rng.standard_normal((5, 3))
    p = {n: model.store[n].value for n in model.store.names()}
    h = x
    for k in (1, 2):
        z, _ = batchnorm_train(h @ p[f"block{k}.linear.weight"].T, p[f"block{k}.bn.w2.gamma"], p[f"block{k}.bn.w2.beta"])
        h = np.maximum(z, 0)
    ref = h @ p["head.weight"].T + p["head.bias"]
    assert np.max(np.abs(model.forward_all(x, train=True)[1] - ref)) <= 1e-12


def test_slicing_consistency_with_zeroed_tail_channels(monkeypatch):
    model = SlimmableNet((1, 4, 4), 3, widths=[0.5, 1.0], channels=(4, 6), seed=3)
    half = {1: 2, 2: 3}
    for k, c in half.items():
        kern = model.store[f"block{k}.conv.kernel"].value
        kern[c:] = 0.0
        if k > 1:
            kern[:, half[k - 1]:] = 0.0
    seen = []
    orig = Conv2d.forward

    def record(self, x, *a, **kw):
        y, ctx = orig(self, x, *a, **kw)
        seen.append(y)
        return y, ctx

    monkeypatch.setattr(Conv2d, "forward", record)
    x = np.random.default_rng(0).standard_normal((4, 1, 4, 4))
    model.forward_all(x, train=True)
    small, full = seen[:2], seen[2:]
    for k, c in half.items():
        assert np.max(np.abs(full[k - 1][:, :c] - small[k - 1])) <= 1e-12
        assert not np.any(full[k - 1][:, c:])


@pytest.mark.parametrize("model", [
    lambda: SlimmableNet((1, 8, 8), 4, channels=(4, 6, 8), seed=0),
    lambda: SlimmableNet((5,), 3, channels=(8, 8), kind="dense", seed=0),
    lambda: EarlyExitNet((5,), 3, exits=4, width=7, seed=0),
    lambda: EarlyExitNet((2, 6, 6), 3, exits=3, width=4, kind="conv", seed=0),
])
def test_forward_one_matches_forward_all_and_eval_is_deterministic(model):
    m = model()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, *m.input_shape))
    m.forward_all(x, train=True)  # move running stats away from init
    a = m.forward_all(x, train=False)
    b = m.forward_all(x, train=False)
    for i in range(1, m.num_submodels + 1):
        assert np.array_equal(a[i - 1], b[i - 1])
        assert np.max(np.abs(m.forward_one(x, i, train=False) - a[i - 1])) < 1e-12
    with pytest.raises(IndexError):
        m.forward_one(x, 0)
    with pytest.raises(IndexError):
        m.forward_one(x, m.num_submodels + 1)
    with pytest.raises(DimensionError):
        m.forward_all(np.zeros((2, 99)))


def test_single_exit_network_is_plain_forward():
    m = EarlyExitNet((3,), 2, exits=1, width=4, seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    (out,) = m.forward_all(x, train=False)
    assert np.array_equal(out, m.forward_one(x, 1, train=False))


def test_param_count_examples():
    s = ParamStore()
    Linear(s, "l", 4, 2)
    assert s.num_trainable() == 10
    head_only = SlimmableNet((4,), 2, widths=[1.0], channels=(), kind="dense")
    assert head_only.param_count(1) == 10
    m = SlimmableNet((8,), 3, widths=[0.5, 1.0], channels=(8,), kind="dense")
    # width 0.5: linear slice 4x8, its own BN gamma+beta (4 each), head 3x4 + 3 bias
    assert m.param_slices(1)["block1.linear.weight"] == (4, 8)
    assert m.param_count(1) == 4 * 8 + 4 + 4 + 3 * 4 + 3
    assert m.param_count(2) == 8 * 8 + 8 + 8 + 3 * 8 + 3


@pytest.mark.parametrize("model", [
    lambda: SlimmableNet((1, 8, 8), 4, channels=(4, 6, 8), seed=0),
    lambda: SlimmableNet((5,), 3, channels=(8, 8), kind="dense", seed=0),
    lambda: EarlyExitNet((5,), 3, exits=4, width=7, seed=0),
])
def test_param_count_monotone_and_full_equals_store(model):
    m = model()
    counts = [m.param_count(i) for i in range(1, m.num_submodels + 1)]
    assert counts == sorted(counts)
    n = m.num_submodels
    if isinstance(m, SlimmableNet):
        other_banks = sum(p.size for p in m.store.trainable() if ".bn.w" in p.name and not p.name.split(".bn.")[1].startswith(f"w{n}."))
        assert counts[-1] == m.store.num_trainable() - other_banks
    else:
        assert counts[-1] == m.store.num_trainable() - sum(p.size for k in range(n - 1) for p in m.heads[k].params())


def _slice_mask(shape, sl):
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(0, s) for s in sl)] = True
    return mask


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shared_affine", [False, True])
def test_parameter_nesting(seed, shared_affine):
    rng = np.random.default_rng(seed)
    m = SlimmableNet((1, 4, 4), 3, widths=[0.25, 0.5, 0.75, 1.0], channels=(4, 5), seed=seed,
                     shared_bn_affine=shared_affine)
    x = rng.standard_normal((4, 1, 4, 4))
    y = one_hot(rng.integers(0, 3, 4), 3)
    slices = [m.param_slices(i) for i in range(1, 5)]
    for i in range(3):
        for name, sl in slices[i].items():
            if ".bn.w" in name:
                continue  # private per-width banks are outside the nesting relation
            assert name in slices[i + 1]
            assert all(a <= b for a, b in zip(sl, slices[i + 1][name]))
    # behavioural check: a sub-model's loss only produces gradient inside its slices
    for i in range(1, 5):
        m.store.zero_grad()
        logits = m.forward_one(x, i, train=True)
        m.backward(flexible_loss([logits], y, DistillConfig(strategy="NONE")).grads[0])
        for p in m.store.trainable():
            if p.name in slices[i - 1]:
                assert not np.any(p.grad[~_slice_mask(p.value.shape, slices[i - 1][p.name])])
            else:
                assert not np.any(p.grad), p.name


@pytest.mark.parametrize("seed", SEEDS)
def test_bn_isolation(seed):
    rng = np.random.default_rng(seed)
    m = SlimmableNet((1, 4, 4), 3, widths=[0.25, 0.5, 0.75, 1.0], channels=(4, 8), seed=seed)
    x = rng.standard_normal((5, 1, 4, 4))
    i = int(rng.integers(1, 5))
    before = {p.name: p.value.copy() for p in m.store.buffers()}
    m.forward_one(x, i, train=True)
    for p in m.store.buffers():
        mine = f".bn.w{i}." in p.name
        assert np.array_equal(p.value, before[p.name]) != mine, p.name


def test_early_exit_causality_counter_and_poison():
    m = EarlyExitNet((3,), 4, exits=7, width=5, seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    for i in range(1, 8):
        m.block_calls = 0
        m.forward_one(x, i, train=False)
        assert m.block_calls == i
    m.block_calls = 0
    m.forward_all(x, train=False)
    assert m.block_calls == 7  # blocks are shared across exits
    ref = [m.forward_one(x, i, train=False) for i in range(1, 8)]
    for p in m.store:
        k = int(p.name.split(".")[0][-1])
        if p.name.startswith("block") and k >= 4 or p.name.startswith("exit") and k >= 4:
            p.value[...] = np.nan
    for i in range(1, 4):
        assert np.array_equal(m.forward_one(x, i, train=False), ref[i - 1])


@pytest.mark.parametrize("model", [
    lambda: SlimmableNet((1, 8, 8), 4, channels=(4, 6, 8), seed=1),
    lambda: EarlyExitNet((5,), 3, exits=4, width=7, seed=1),
    lambda: EarlyExitNet((2, 6, 6), 3, exits=3, width=4, kind="conv", seed=1),
])
def test_gradient_reaches_every_parameter(model):
    m = model()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, *m.input_shape))
    y = one_hot(rng.integers(0, m.num_classes, 16), m.num_classes)
    m.backward(flexible_loss(m.forward_all(x, train=True), y, DistillConfig(strategy="NONE")).grads)
    total = zero = 0
    for p in m.store.trainable():
        total += p.grad.size
        zero += int(np.sum(p.grad == 0))
    assert zero / total < 0.05


def test_backward_without_forward_is_usage_error():
    from flexdistill.errors import UsageError
    m = EarlyExitNet((2,), 2, exits=2, width=3)
    with pytest.raises(UsageError):
        m.backward([np.zeros((1, 2))] * 2)


def test_same_seed_same_weights():
    a = SlimmableNet((1, 8, 8), 10, seed=9)
    b = SlimmableNet((1, 8, 8), 10, seed=9)
    c = SlimmableNet((1, 8, 8), 10, seed=10)
    assert all(np.array_equal(a.store[n].value, b.store[n].value) for n in a.store.names())
    assert not np.array_equal(a.store["block1.conv.kernel"].value, c.store["block1.conv.kernel"].value)
