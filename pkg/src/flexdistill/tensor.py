"""Dense float64 arrays and the handful of numeric primitives the rest of the
package is written against.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The functions
here add the shape checks and error contracts the package relies on and never
mutate their inputs.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, ParameterError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a fresh C-contiguous float64 array."""
    return np.array(x, dtype=DTYPE, order="C", copy=True)


def _check_batch_compatible(a, b, op):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    # broadcasting is only allowed over a leading batch axis
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return a, b
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return a, b
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b):
    a, b = _check_batch_compatible(a, b, "add")
    return a + b


def sub(a, b):
    a, b = _check_batch_compatible(a, b, "sub")
    return a - b


def mul(a, b):
    a, b = _check_batch_compatible(a, b, "mul")
    return a * b


def scale(a, c: float):
    return np.asarray(a, dtype=DTYPE) * float(c)


def exp(a):
    return np.exp(np.asarray(a, dtype=DTYPE))


def log(a):
    a = np.asarray(a, dtype=DTYPE)
    if np.any(a <= 0):
        raise DomainError("log: argument has non-positive entries")
    return np.log(a)


def reduce_sum(a, axis=None):
    return np.sum(np.asarray(a, dtype=DTYPE), axis=axis)


def reduce_mean(a, axis=None):
    return np.mean(np.asarray(a, dtype=DTYPE), axis=axis)


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def logsumexp(x, axis=-1, keepdims=False):
    x = np.asarray(x, dtype=DTYPE)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


class Rng:
    """Explicit random state. Same seed, same stream, on every platform.

    Backed by PCG64, whose output is specified bit-for-bit independently of
    the host.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: int) -> "Rng":
        """Child stream keyed by ``keys``; independent of how much of the parent was consumed."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64([self.seed, *keys]))
        return child


def rand_normal(rng: Rng, shape, mean=0.0, stddev=1.0):
    if stddev < 0:
        raise ParameterError(f"rand_normal: stddev must be >= 0, got {stddev}")
    if stddev == 0:
        return np.full(shape, float(mean), dtype=DTYPE)
    return rng.gen.normal(mean, stddev, size=shape).astype(DTYPE)


def rand_uniform(rng: Rng, shape, low=0.0, high=1.0):
    if high < low:
        raise ParameterError(f"rand_uniform: high < low ({high} < {low})")
    return rng.gen.uniform(low, high, size=shape).astype(DTYPE)
