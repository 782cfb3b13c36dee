"""Flexible networks: a slimmable net and an early-exit chain.

Both expose ``n`` nested sub-models indexed ``1..n`` by increasing size:

* ``forward_all(x, train)`` returns the list of logits of every sub-model,
* ``forward_one(x, i, train)`` runs sub-model ``i`` alone,
* ``backward(grads)`` back-propagates logit gradients from the most recent
  forward call into ``model.store``.
"""
from __future__ import annotations

import math
import numpy as np

from .errors import DimensionError, ParameterError, UsageError
from .layers import AvgPool2d, BatchNorm, Conv2d, Flatten, GlobalAvgPool, Linear, ReLU, Tape
from .params import ParamStore
from .tensor import Rng


class WidthSpec:
    """Ascending width multipliers in (0, 1] ending at 1.0."""

    def __init__(self, multipliers):
        m = [float(w) for w in multipliers]
        if not m:
            raise ParameterError("WidthSpec needs at least one multiplier")
        if any(not 0 < w <= 1 for w in m):
            raise ParameterError(f"width multipliers must lie in (0, 1], got {m}")
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ParameterError(f"width multipliers must be strictly ascending, got {m}")
        if m[-1] != 1.0:
            raise ParameterError(f"last width multiplier must be 1.0, got {m[-1]}")
        self.multipliers = m

    def __len__(self):
        return len(self.multipliers)

    def channels(self, full: int) -> list[int]:
        # round() guards against 0.1 * 30 = 3.0000000000000004 style overshoot
        return [max(1, math.ceil(round(w * full, 9))) for w in self.multipliers]


class FlexibleModel:
    label = "sub"

    def __init__(self):
        self.store = ParamStore()
        self._pending = None

    @property
    def num_submodels(self) -> int:
        raise NotImplementedError

    @property
    def sub_model_names(self) -> list[str]:
        return [f"{self.label}{i}" for i in range(1, self.num_submodels + 1)]

    def _check_index(self, i):
        if not 1 <= i <= self.num_submodels:
            raise IndexError(f"sub-model index {i} outside 1..{self.num_submodels}")

    def _check_input(self, x):
        if x.ndim != 1 + len(self.input_shape) or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def param_slices(self, i) -> dict[str, tuple]:
        raise NotImplementedError

    def param_count(self, i) -> int:
        """Trainable scalars used by sub-model ``i``."""
        return sum(int(np.prod(ext)) for ext in self.param_slices(i).values())


class _SlimBlock:
    def __init__(self, conv, bns, active, pool):
        self.conv = conv
        self.bns = bns
        self.active = active
        self.pool = pool


class SlimmableNet(FlexibleModel):
    """Width-switchable network over shared weights.

    Sub-model ``i`` runs every layer on the leading ``ceil(w_i * K)`` channels
    of the full weights and owns a private batch-norm bank (``*.bn.w{i}``).
    ``kind="conv"`` stacks conv3x3 -> BN -> ReLU -> avgpool2 blocks;
    ``kind="dense"`` stacks linear -> BN -> ReLU blocks. A linear head maps to
    the classes. Input channels and output classes are never sliced.
    """

    label = "switch"

    def __init__(self, input_shape, num_classes, widths=(0.25, 0.5, 0.75, 1.0),
                 channels=(16, 32, 64), kind="conv", shared_bn_affine=False,
                 bn_momentum=0.1, seed=0):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.widths = widths if isinstance(widths, WidthSpec) else WidthSpec(widths)
        self.kind = kind
        self.shared_bn_affine = shared_bn_affine
        rng = Rng(seed)
        n = len(self.widths)
        self.relu = ReLU()
        self.flatten = Flatten()
        self.blocks = []
        if kind == "conv":
            if len(self.input_shape) != 3:
                raise DimensionError(f"conv SlimmableNet needs (C, H, W) input, got {self.input_shape}")
            prev, (h, w) = self.input_shape[0], self.input_shape[1:]
        elif kind == "dense":
            if len(self.input_shape) != 1:
                raise DimensionError(f"dense SlimmableNet needs (D,) input, got {self.input_shape}")
            prev, h, w = self.input_shape[0], 1, 1
        else:
            raise ParameterError(f"unknown SlimmableNet kind {kind!r}")
        self.in_active = [prev] * n
        for k, full in enumerate(channels, start=1):
            if kind == "conv":
                layer = Conv2d(self.store, f"block{k}.conv", prev, full, 3, 1, 1, bias=False, rng=rng)
            else:
                layer = Linear(self.store, f"block{k}.linear", prev, full, bias=False, rng=rng)
            active = self.widths.channels(full)
            affine = None
            if shared_bn_affine:
                affine = (self.store.add(f"block{k}.bn.gamma", np.ones(full)),
                          self.store.add(f"block{k}.bn.beta", np.zeros(full)))
            bns = [BatchNorm(self.store, f"block{k}.bn.w{i}", c, momentum=bn_momentum, affine=affine)
                   for i, c in enumerate(active, start=1)]
            pool = None
            if kind == "conv":
                pool = AvgPool2d(2)
                if h % 2 or w % 2:
                    raise DimensionError(f"block{k}: spatial size {h}x{w} cannot be pooled by 2")
                h, w = h // 2, w // 2
            self.blocks.append(_SlimBlock(layer, bns, active, pool))
            prev = full
        self.spatial = h * w
        self.head = Linear(self.store, "head", prev * self.spatial, num_classes, rng=rng)

    @property
    def num_submodels(self):
        return len(self.widths)

    def _run(self, x, i, train, tape):
        h = x
        prev = self.in_active[i - 1]
        for k, blk in enumerate(self.blocks):
            c = blk.active[i - 1]
            if self.kind == "conv":
                h = tape.run(blk.conv, h, train=train, in_channels=prev, out_channels=c, input_grad=k > 0)
            else:
                h = tape.run(blk.conv, h, train=train, in_features=prev, out_features=c, input_grad=k > 0)
            h = tape.run(blk.bns[i - 1], h, train=train)
            h = tape.run(self.relu, h)
            if blk.pool is not None:
                h = tape.run(blk.pool, h)
            prev = c
        h = tape.run(self.flatten, h)
        return tape.run(self.head, h, in_features=prev * self.spatial)

    def forward_one(self, x, i, train=False):
        self._check_index(i)
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        tape = Tape()
        out = self._run(x, i, train, tape)
        self._pending = {i: tape}
        return out

    def forward_all(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        pending, out = {}, []
        for i in range(1, self.num_submodels + 1):
            tape = Tape()
            out.append(self._run(x, i, train, tape))
            pending[i] = tape
        self._pending = pending
        return out

    def backward(self, grads):
        if not self._pending:
            raise UsageError("backward called without a preceding forward")
        pending, self._pending = self._pending, None
        if not isinstance(grads, (list, tuple)):
            (i,) = pending
            grads = {i: grads}
        else:
            grads = dict(enumerate(grads, start=1))
        for i, tape in pending.items():
            if grads.get(i) is not None:
                tape.backward(grads[i])

    def param_slices(self, i):
        self._check_index(i)
        out = {}
        prev = self.in_active[i - 1]
        for blk in self.blocks:
            c = blk.active[i - 1]
            if self.kind == "conv":
                out[blk.conv.kernel.name] = (c, prev, blk.conv.k, blk.conv.k)
            else:
                out[blk.conv.weight.name] = (c, prev)
            bn = blk.bns[i - 1]
            out[bn.gamma.name] = (c,)
            out[bn.beta.name] = (c,)
            prev = c
        out[self.head.weight.name] = (self.num_classes, prev * self.spatial)
        out[self.head.bias.name] = (self.num_classes,)
        return out


class EarlyExitNet(FlexibleModel):
    """Chain of ``exits`` blocks with a classifier after each one.

    Exit ``i`` depends only on blocks ``1..i`` and its own head.
    ``kind="dense"`` blocks are linear -> BN -> ReLU with linear heads;
    ``kind="conv"`` blocks are conv3x3 -> BN -> ReLU with global-average-pool
    + linear heads. ``block_calls`` counts block evaluations.
    """

    label = "exit"

    def __init__(self, input_shape, num_classes, exits=4, width=64, kind="dense",
                 batch_norm=True, bn_momentum=0.1, seed=0):
        super().__init__()
        if exits < 1:
            raise ParameterError(f"exits must be >= 1, got {exits}")
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.kind = kind
        self.exits = exits
        self.block_calls = 0
        rng = Rng(seed)
        self.relu = ReLU()
        self.gap = GlobalAvgPool()
        if kind == "dense":
            if len(self.input_shape) != 1:
                raise DimensionError(f"dense EarlyExitNet needs (D,) input, got {self.input_shape}")
        elif kind == "conv":
            if len(self.input_shape) != 3:
                raise DimensionError(f"conv EarlyExitNet needs (C, H, W) input, got {self.input_shape}")
        else:
            raise ParameterError(f"unknown EarlyExitNet kind {kind!r}")
        prev = self.input_shape[0]
        self.blocks = []
        self.heads = []
        for k in range(1, exits + 1):
            if kind == "dense":
                core = Linear(self.store, f"block{k}.linear", prev, width, bias=not batch_norm, rng=rng)
            else:
                core = Conv2d(self.store, f"block{k}.conv", prev, width, 3, 1, 1, bias=not batch_norm, rng=rng)
            bn = BatchNorm(self.store, f"block{k}.bn", width, momentum=bn_momentum) if batch_norm else None
            self.blocks.append((core, bn))
            self.heads.append(Linear(self.store, f"exit{k}.linear", width, num_classes, rng=rng))
            prev = width

    @property
    def num_submodels(self):
        return self.exits

    def _block(self, k, h, train, tape):
        self.block_calls += 1
        core, bn = self.blocks[k - 1]
        h = tape.run(core, h, train=train, input_grad=k > 1)
        if bn is not None:
            h = tape.run(bn, h, train=train)
        return tape.run(self.relu, h)

    def _head(self, k, h, train, tape):
        if self.kind == "conv":
            h = tape.run(self.gap, h)
        return tape.run(self.heads[k - 1], h, train=train)

    def _forward(self, x, upto, which, train):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        block_tapes, head_tapes, out = [], {}, {}
        h = x
        for k in range(1, upto + 1):
            tape = Tape()
            h = self._block(k, h, train, tape)
            block_tapes.append(tape)
            if k in which:
                tape = Tape()
                out[k] = self._head(k, h, train, tape)
                head_tapes[k] = tape
        self._pending = (block_tapes, head_tapes)
        return out

    def forward_all(self, x, train=False):
        out = self._forward(x, self.exits, set(range(1, self.exits + 1)), train)
        return [out[k] for k in range(1, self.exits + 1)]

    def forward_one(self, x, i, train=False):
        self._check_index(i)
        return self._forward(x, i, {i}, train)[i]

    def backward(self, grads):
        if not self._pending:
            raise UsageError("backward called without a preceding forward")
        (block_tapes, head_tapes), self._pending = self._pending, None
        if not isinstance(grads, (list, tuple)):
            (i,) = head_tapes
            grads = {i: grads}
        else:
            grads = dict(enumerate(grads, start=1))
        carry = None
        for k in range(len(block_tapes), 0, -1):
            g = carry
            if k in head_tapes and grads.get(k) is not None:
                gh = head_tapes[k].backward(grads[k])
                g = gh if g is None else g + gh
            if g is None:
                continue
            carry = block_tapes[k - 1].backward(g)

    def param_slices(self, i):
        self._check_index(i)
        out = {}
        for k in range(1, i + 1):
            core, bn = self.blocks[k - 1]
            for p in core.params() + (bn.params() if bn is not None else []):
                out[p.name] = p.value.shape
        for p in self.heads[i - 1].params():
            out[p.name] = p.value.shape
        return out
