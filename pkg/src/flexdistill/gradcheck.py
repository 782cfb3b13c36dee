"""Central-difference gradient checking against a ParamStore."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .params import ParamStore

STEP = 1e-5


@dataclass
class GradCheckResult:
    max_error: float
    worst_param: str | None = None
    worst_index: tuple | None = None
    analytic: float = 0.0
    numeric: float = 0.0

    def __float__(self):
        return self.max_error


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f, store: ParamStore, h: float = STEP, names=None) -> GradCheckResult:
    """Compare the analytic gradient of ``f`` with central finite differences.

    ``f(store)`` must return the scalar loss *and* accumulate its analytic
    gradient into the store's ``grad`` slots (i.e. run forward and backward).
    Non-trainable buffers are restored after every evaluation so that
    batch-norm running statistics do not drift during the check.

    Returns the maximum over all checked entries of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    buffers = {p.name: p.value.copy() for p in store.buffers()}

    def restore():
        for p in store.buffers():
            p.value[...] = buffers[p.name]

    def evaluate():
        store.zero_grad()
        val = float(f(store))
        restore()
        if not math.isfinite(val):
            raise NumericError(f"grad_check: loss is not finite ({val})")
        return val

    evaluate()
    params = [p for p in store.trainable() if names is None or p.name in names]
    analytic = {p.name: p.grad.copy() for p in params}

    result = GradCheckResult(0.0)
    for p in params:
        flat = p.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = evaluate()
            flat[idx] = orig - h
            down = evaluate()
            flat[idx] = orig
            num = (up - down) / (2 * h)
            ana = analytic[p.name].reshape(-1)[idx]
            err = float(relative_error(ana, num))
            if err > result.max_error or result.worst_param is None:
                result = GradCheckResult(err, p.name, np.unravel_index(idx, p.value.shape), float(ana), num)
    store.zero_grad()
    for p in params:
        p.grad[...] = analytic[p.name]
    return result


def check_flexible_loss(model, x, y_r, cfg, h: float = STEP) -> GradCheckResult:
    """Grad-check ``flexible_loss`` through every sub-model of ``model``.

    With ``cfg.detach_teacher`` the checked objective treats teacher logits
    as constants, so they are frozen at the unperturbed parameters; this is
    exactly the function whose gradient the trainer follows. Parameters and
    batch-norm buffers are left as they were found.
    """
    from .losses import flexible_loss

    saved = model.store.state()
    frozen = None
    if cfg.detach_teacher:
        frozen = [a.copy() for a in model.forward_all(x, train=True)]
        model._pending = None
        model.store.load_state(saved)

    def f(store):
        logits = model.forward_all(x, train=True)
        res = flexible_loss(logits, y_r, cfg, teacher_logits=frozen)
        model.backward(res.grads)
        return res.total

    try:
        return grad_check(f, model.store, h)
    finally:
        model.store.load_state(saved)
        model.store.zero_grad()
