"""
Anatomy of the two flexible models
==================================

A slimmable network keeps the leading channels of every layer for narrower
widths.  An early-exit network attaches a classifier after each block.
"""
import numpy as np

from flexdistill import EarlyExitNet, SlimmableNet

rng = np.random.default_rng(0)

slim = SlimmableNet((1, 8, 8), 10, widths=[0.25, 0.5, 0.75, 1.0], channels=(16, 32), seed=0)
x = rng.standard_normal((4, 1, 8, 8))
print("slimmable sub-models:", slim.sub_model_names)
for i in range(1, slim.num_submodels + 1):
    used = {k: v for k, v in slim.param_slices(i).items() if k.startswith("block1.conv")}
    print(f"  width {i}: {slim.param_count(i):6d} params, block1 kernel slice {used}")

# Every width keeps private batch-norm statistics.  Training width 2 only
# moves its own running mean.
before = {p.name: p.value.copy() for p in slim.store.buffers()}
slim.forward_one(x, 2, train=True)
moved = [p.name for p in slim.store.buffers() if not np.array_equal(p.value, before[p.name])]
print("buffers updated by a width-2 forward:", moved)

# Early exits: evaluating exit i runs exactly i blocks.
net = EarlyExitNet((2,), 3, exits=5, width=16, seed=0)
z = rng.standard_normal((6, 2))
for i in range(1, 6):
    net.block_calls = 0
    logits = net.forward_one(z, i, train=False)
    print(f"exit {i}: {net.block_calls} blocks run, {net.param_count(i)} params, logits {logits.shape}")
net.block_calls = 0
net.forward_all(z, train=False)
print("all five exits in one pass:", net.block_calls, "blocks")
