"""Distillation objectives for flexible networks.

Sub-models are indexed ``1..n`` by increasing size; ``logits[i - 1]`` holds
the ``(batch, C)`` logits of sub-model ``i`` and sub-model ``n`` is the
largest. Every loss is a batch mean.

All losses come with exact gradients with respect to the logits, so a model
only has to back-propagate ``FlexLoss.grads``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError, ValidationError
from .tensor import log_softmax


class Strategy(str, enum.Enum):
    NONE = "NONE"
    IPKD = "IPKD"
    TA1 = "TA1"
    TAM = "TAM"


@dataclass(frozen=True)
class DistillConfig:
    """How the smaller sub-models learn from the larger ones.

    ``divergence`` is ``"KL"`` or ``"CE"``. ``kl_order="paper"`` computes
    KL(student || teacher); ``"classic"`` computes KL(teacher || student).
    """

    tau: float = 1.0
    lam: float = 0.8
    divergence: str = "KL"
    strategy: Strategy = Strategy.TAM
    kl_order: str = "paper"
    detach_teacher: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must be in [0, 1], got {self.lam}")
        if self.divergence not in ("KL", "CE"):
            raise ParameterError(f"divergence must be 'KL' or 'CE', got {self.divergence!r}")
        if self.kl_order not in ("paper", "classic"):
            raise ParameterError(f"kl_order must be 'paper' or 'classic', got {self.kl_order!r}")


def check_one_hot(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValidationError(f"labels must be (batch, C) one-hot, got shape {y.shape}")
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)
    if not ok:
        raise ValidationError("labels are not one-hot rows")
    return y


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels outside [0, {num_classes})")
    y = np.zeros((labels.size, num_classes))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _ce(a, y):
    batch = a.shape[0]
    logp = log_softmax(a, axis=1)
    value = -np.sum(y * logp) / batch
    grad = (np.exp(logp) - y) / batch
    return value, grad


def _kd(a_s, a_t, tau, divergence="KL", kl_order="paper"):
    """Value and gradients (student, teacher) of the temperature-scaled KD term."""
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if a_s.shape != a_t.shape:
        raise DimensionError(f"kd_loss: student {a_s.shape} vs teacher {a_t.shape}")
    batch = a_s.shape[0]
    log_p = log_softmax(a_s / tau, axis=1)  # student
    log_q = log_softmax(a_t / tau, axis=1)  # teacher
    p, q = np.exp(log_p), np.exp(log_q)
    # d(tau^2 * f(a/tau)) / da = tau * df/du, then the batch mean
    k = tau / batch
    if divergence == "CE":
        per = -np.sum(q * log_p, axis=1)
        g_s = k * (p - q)
        g_t = -k * q * (log_p + per[:, None])
    elif kl_order == "paper":
        d = log_p - log_q
        per = np.sum(p * d, axis=1)
        g_s = k * p * (d - per[:, None])
        g_t = k * (q - p)
    else:
        d = log_q - log_p
        per = np.sum(q * d, axis=1)
        g_s = k * (p - q)
        g_t = k * q * (d - per[:, None])
    value = tau * tau * np.sum(per) / batch
    return value, g_s, g_t


def cross_entropy(a_s, y_r) -> float:
    """Mean over the batch of ``-sum_c y_c log softmax(a_s)_c``."""
    a_s = np.asarray(a_s, dtype=np.float64)
    y_r = check_one_hot(y_r)
    if a_s.shape != y_r.shape:
        raise DimensionError(f"cross_entropy: logits {a_s.shape} vs labels {y_r.shape}")
    return float(_ce(a_s, y_r)[0])


def kd_loss(a_s, a_t, tau, divergence="KL", kl_order="paper") -> float:
    """``tau**2`` times the divergence between softened student and teacher outputs."""
    a_s = np.asarray(a_s, dtype=np.float64)
    a_t = np.asarray(a_t, dtype=np.float64)
    return float(_kd(a_s, a_t, tau, divergence, kl_order)[0])


def student_loss(a_s, a_t, y_r, cfg: DistillConfig) -> float:
    return (1 - cfg.lam) * cross_entropy(a_s, y_r) + cfg.lam * kd_loss(
        a_s, a_t, cfg.tau, cfg.divergence, cfg.kl_order)


def teacher_weights(n: int, strategy) -> dict[int, list[tuple[int, float]]]:
    """Map each student ``i < n`` to its ``(teacher j, weight)`` list."""
    strategy = Strategy(strategy)
    if strategy is Strategy.NONE:
        return {}
    if strategy is Strategy.IPKD:
        return {i: [(n, 1.0)] for i in range(1, n)}
    if strategy is Strategy.TA1:
        return {i: [(i + 1, 1.0)] for i in range(1, n)}
    out = {}
    for i in range(1, n):
        out[i] = [(j, 1.0 / (n - i)) for j in range(i + 1, n + 1)]
        assert abs(sum(w for _, w in out[i]) - 1.0) < 1e-12
    return out


@dataclass
class FlexLoss:
    """Total loss, its individual summands, and d(total)/d(logits[i])."""

    total: float
    terms: dict = field(default_factory=dict)
    grads: list = field(default_factory=list)


def flexible_loss(logits, y_r, cfg: DistillConfig, teacher_logits=None) -> FlexLoss:
    """Joint loss over all sub-models for ``cfg.strategy``.

    ``terms`` holds each summand exactly as it enters the total (already
    multiplied by its coefficient), keyed ``ce_exit{i}`` and ``kd_{i}from{j}``,
    so ``sum(terms.values()) == total`` up to rounding.

    ``teacher_logits`` optionally replaces the logits used on the teacher side
    of KD terms (same layout as ``logits``). With ``cfg.detach_teacher`` no
    gradient flows through the teacher side.
    """
    logits = [np.asarray(a, dtype=np.float64) for a in logits]
    n = len(logits)
    strategy = Strategy(cfg.strategy)
    if n < 1:
        raise ConfigError("flexible_loss needs at least one sub-model")
    if strategy is not Strategy.NONE and n < 2:
        raise ConfigError(f"strategy {strategy.value} needs at least 2 sub-models, got {n}")
    y_r = check_one_hot(y_r)
    for a in logits:
        if a.shape != y_r.shape:
            raise DimensionError(f"flexible_loss: logits {a.shape} vs labels {y_r.shape}")
    teachers = logits if teacher_logits is None else [np.asarray(a, dtype=np.float64) for a in teacher_logits]

    grads = [np.zeros_like(a) for a in logits]
    terms = {}
    lam = cfg.lam
    for i in range(1, n + 1):
        value, g = _ce(logits[i - 1], y_r)
        coef = 1.0 if (strategy is Strategy.NONE or i == n) else 1.0 - lam
        terms[f"ce_exit{i}"] = coef * value
        grads[i - 1] += coef * g
    for i, plan in teacher_weights(n, strategy).items():
        for j, w in plan:
            value, g_s, g_t = _kd(logits[i - 1], teachers[j - 1], cfg.tau, cfg.divergence, cfg.kl_order)
            coef = lam * w
            terms[f"kd_{i}from{j}"] = coef * value
            grads[i - 1] += coef * g_s
            if not cfg.detach_teacher:
                grads[j - 1] += coef * g_t
    total = float(sum(terms.values()))
    return FlexLoss(total, terms, grads)
