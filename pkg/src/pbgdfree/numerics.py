"""Numerical kernels shared by the solvers and diagnostics.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when an iteration produces a non-finite value."""


@dataclass(frozen=True)
class GDSettings:
    step: float
    tol: float = 1e-10
    max_iters: int = 100_000

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class LLSolveResult:
    """Outcome of an inner gradient-descent solve.

    ``iterations`` counts descent steps taken; the number of gradient
    evaluations is ``iterations + 1`` because the final gradient is needed to
    test the stopping rule.
    """

    minimizer: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool

    @property
    def grad_evals(self) -> int:
        return self.iterations + 1


def gd_minimize(
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    y0,
    settings: GDSettings,
) -> LLSolveResult:
    """Fixed-step gradient descent until ``||grad|| <= tol`` or ``max_iters``.

    Non-finite gradients raise :class:`DivergenceError`. Hitting the iteration
    cap is not an error; the caller inspects ``converged``.
    """
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DivergenceError("gd_minimize: non-finite starting point")
    step, tol = settings.step, settings.tol
    converged = False
    k = 0
    while True:
        gr = gradient(y)
        gnorm = math.sqrt(float(np.dot(gr, gr)))
        if not math.isfinite(gnorm):
            raise DivergenceError(f"gd_minimize: non-finite gradient after {k} steps")
        if gnorm <= tol:
            converged = True
            break
        if k >= settings.max_iters:
            break
        y = y - step * gr
        k += 1
    value = float(objective(y))
    if not math.isfinite(value):
        raise DivergenceError(f"gd_minimize: non-finite objective after {k} steps")
    return LLSolveResult(minimizer=y, value=value, grad_norm=gnorm, iterations=k, converged=converged)


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    p = np.array(point, dtype=float)
    out = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        hi = float(fn(p + e))
        lo = float(fn(p - e))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"non-finite function value while differencing coordinate {i}")
        out[i] = (hi - lo) / (2 * h)
    return out


def log_sigmoid(z: float) -> float:
    """``log(1 / (1 + exp(-z)))`` without overflow."""
    return -float(np.logaddexp(0.0, -z))


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def stable_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()
