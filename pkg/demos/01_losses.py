"""
Distillation losses by hand
===========================

Cross-entropy, the temperature-scaled KD term, and how the four training
strategies turn the outputs of several sub-models into one objective.
"""
import math

import numpy as np

from flexdistill import DistillConfig, cross_entropy, flexible_loss, kd_loss, one_hot, teacher_weights

# The two worked numbers: a confident-ish correct prediction, and a student
# that is uniform while its teacher prefers class 0 three to one.
print("CE([ln 2, 0] vs class 0) =", round(cross_entropy([[math.log(2), 0.0]], [[1, 0]]), 6))
print("KD(student [0,0], teacher [ln 3, 0], tau=1) =", round(kd_loss([[0.0, 0.0]], [[math.log(3), 0.0]], 1.0), 6))

# Raising the temperature flattens both distributions.  The tau**2 prefactor
# keeps the gradient scale roughly constant, so the loss itself shrinks slowly.
a_s, a_t = np.array([[1.0, 0.0, -1.0]]), np.array([[3.0, 0.0, -2.0]])
for tau in (1, 2, 4, 8):
    print(f"tau={tau}: KL form {kd_loss(a_s, a_t, tau):.4f}  CE form {kd_loss(a_s, a_t, tau, 'CE'):.4f}")

# Who teaches whom.  With four sub-models, IPKD has only the largest as
# teacher, TA1 chains neighbours, and TAM averages over every larger one.
for s in ("IPKD", "TA1", "TAM"):
    plan = teacher_weights(4, s)
    print(s, {i: [(j, round(w, 3)) for j, w in p] for i, p in plan.items()})

# A full objective on random logits, showing the individual summands.
rng = np.random.default_rng(0)
logits = [rng.standard_normal((8, 5)) * 2 for _ in range(3)]
y = one_hot(rng.integers(0, 5, 8), 5)
for s in ("NONE", "IPKD", "TA1", "TAM"):
    res = flexible_loss(logits, y, DistillConfig(strategy=s, tau=2.0, lam=0.8))
    terms = ", ".join(f"{k}={v:.3f}" for k, v in res.terms.items())
    print(f"{s:4s} total={res.total:.4f}  [{terms}]")
