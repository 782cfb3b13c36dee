"""
Checking the hand-written backward passes
=========================================

Every parameter gradient of the joint loss is compared against central
finite differences, for each strategy and with or without a detached teacher.
"""
import numpy as np

from flexdistill import DistillConfig, EarlyExitNet, SlimmableNet, one_hot
from flexdistill.gradcheck import check_flexible_loss

rng = np.random.default_rng(1)

dense = EarlyExitNet((2,), 3, exits=3, width=6, seed=0)
x = rng.standard_normal((8, 2))
y = one_hot(rng.integers(0, 3, 8), 3)
for detach in (True, False):
    for s in ("NONE", "IPKD", "TA1", "TAM"):
        res = check_flexible_loss(dense, x, y, DistillConfig(strategy=s, tau=2.0, detach_teacher=detach))
        print(f"early-exit {s:4s} detach={detach!s:5s} max rel error {res.max_error:.2e}")

conv = SlimmableNet((1, 4, 4), 3, widths=[0.5, 1.0], channels=(4, 4), seed=0)
xi = rng.standard_normal((6, 1, 4, 4))
yi = one_hot(rng.integers(0, 3, 6), 3)
res = check_flexible_loss(conv, xi, yi, DistillConfig(strategy="TAM", divergence="CE"))
print(f"slimmable conv TAM max rel error {res.max_error:.2e} (worst parameter {res.worst_param})")
