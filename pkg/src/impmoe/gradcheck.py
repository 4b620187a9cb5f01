"""Central finite-difference gradient checking.

The numeric side only ever calls the forward function under ``no_grad`` and
perturbs raw arrays, so it is independent of the tape's backward rules.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def numeric_grad(fn: Callable[[], T.Tensor], x: T.Tensor, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def check_gradients(fn: Callable[[], T.Tensor], inputs: Sequence[T.Tensor],
                    eps: float = 1e-6, floor: float = 1e-4) -> float:
    """Max relative error between tape gradients and finite differences.

    ``fn`` must build a scalar loss from ``inputs`` each time it is called.
    Run under 64-bit precision. ``floor`` bounds the denominator so inputs whose
    true gradient vanishes (e.g. a key bias under softmax) compare on absolute
    finite-difference noise instead of dividing by it.
    """
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    T.get_tape().clear()
    loss = fn()
    T.backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, x, eps), floor))
    return worst


def projected(fn: Callable[[], T.Tensor], shape: tuple, seed: int = 0) -> Callable[[], T.Tensor]:
    """Turn a tensor-valued ``fn`` into a scalar via a fixed random projection."""
    r = np.random.default_rng([seed, 0x5EED]).standard_normal(shape)

    def scalar():
        return T.sum(T.mul(fn(), T.Tensor(r)))
    return scalar
