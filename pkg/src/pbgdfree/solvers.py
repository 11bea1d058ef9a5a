"""Penalty-based bilevel solvers.

* :func:`pbgd_free_run` steps ``x`` along ``grad_x f(x, y)`` only, where ``y``
  tracks the minimizer of ``f/gamma + g`` with a few warm-started GD steps.
* :func:`f2sa_sl_run` tracks both ``argmin g`` and ``argmin f/gamma + g`` with
  one GD step each and steps ``x`` along the full penalty gradient.
* :func:`pbgd_oracle_run` solves both lower-level problems to tolerance at
  every outer step; it is the reference for the penalty gradient.

Each run returns a list of :class:`IterateRecord`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .numerics import DivergenceError, GDSettings, LLSolveResult, gd_minimize
from .problems import BilevelProblem


class SolverDivergence(DivergenceError):
    """A solver iterate became non-finite. ``last_record`` is the last finite
    state (``None`` if the initial point itself was bad)."""

    def __init__(self, message: str, last_record: Optional["IterateRecord"] = None):
        super().__init__(message)
        self.last_record = last_record


class InnerSolveError(RuntimeError):
    """An oracle lower-level solve hit its iteration cap."""


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by all solvers.

    ``eta`` may be 0 (frozen ``x``). ``inner_k`` is the number of lower-level
    steps per outer step; for F2SA each of those steps moves both ``y``
    sequences with ``x`` held fixed. ``update_tol`` stops a run early once
    ``||x_{t+1} - x_t|| / eta`` falls to it. ``stale_y`` makes PBGD-Free use
    the ``y`` from before the current inner updates in its ``x`` step.
    ``track_gap`` fills ``IterateRecord.g_gap`` using an oracle solve.
    """

    gamma: float = 10.0
    eta: float = 0.1
    eta_gamma: float = 0.25
    eta_g: float = 0.25
    inner_k: int = 1
    outer_t: int = 1000
    x0: Optional[Sequence[float]] = None
    y0: Optional[Sequence[float]] = None
    warm_start: bool = True
    record_every: int = 1
    oracle_tol: float = 1e-10
    oracle_max_iters: int = 100_000
    update_tol: Optional[float] = None
    stale_y: bool = False
    track_gap: bool = False

    def __post_init__(self):
        for name in ("gamma", "eta_gamma", "eta_g", "oracle_tol"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"eta must be non-negative and finite, got {self.eta}")
        for name in ("inner_k", "outer_t", "record_every", "oracle_max_iters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.update_tol is not None and not self.update_tol > 0:
            raise ValueError(f"update_tol must be positive, got {self.update_tol}")

    def initial_point(self, problem: BilevelProblem) -> tuple[np.ndarray, np.ndarray]:
        x0 = np.zeros(problem.dim_x) if self.x0 is None else np.array(self.x0, dtype=float).reshape(-1)
        y0 = np.zeros(problem.dim_y) if self.y0 is None else np.array(self.y0, dtype=float).reshape(-1)
        if x0.size != problem.dim_x:
            raise ValueError(f"x0 has {x0.size} entries, problem expects {problem.dim_x}")
        if y0.size != problem.dim_y:
            raise ValueError(f"y0 has {y0.size} entries, problem expects {problem.dim_y}")
        return x0, y0


@dataclass(frozen=True)
class IterateRecord:
    """Solver state after ``t`` outer iterations.

    ``update_norm`` is ``||x_t - x_{t-1}|| / eta`` (the norm of the direction
    used for the last ``x`` step); it is ``None`` at ``t = 0``.
    """

    t: int
    x: np.ndarray
    y_gamma: np.ndarray
    y_g: Optional[np.ndarray]
    f_val: float
    g_gap: Optional[float]
    update_norm: Optional[float]
    ll_grad_evals: int
    wall_nanos: int


# ---------------------------------------------------------------------------
# oracle helpers


def ll_settings(problem: BilevelProblem, tol: float = 1e-10, max_iters: int = 100_000) -> GDSettings:
    """GD settings for ``min_y g(x, y)``: step ``1 / (2 l_g)``."""
    return GDSettings(step=0.5 / problem.smooth_g, tol=tol, max_iters=max_iters)


def penalized_settings(problem: BilevelProblem, gamma: float, tol: float = 1e-10,
                       max_iters: int = 100_000) -> GDSettings:
    """GD settings for ``min_y f/gamma + g``: step ``1 / (l_g + l_f / gamma)``."""
    return GDSettings(step=1.0 / (problem.smooth_g + problem.smooth_f / gamma), tol=tol, max_iters=max_iters)


def solve_ll(problem: BilevelProblem, x, y_start, tol: float = 1e-10, max_iters: int = 100_000) -> LLSolveResult:
    obj, grad = problem.ll_objective(np.asarray(x, dtype=float))
    res = gd_minimize(obj, grad, y_start, ll_settings(problem, tol, max_iters))
    if not res.converged:
        raise InnerSolveError(
            f"lower-level problem min_y g stalled at x={np.asarray(x).tolist()}: "
            f"grad norm {res.grad_norm:.3e} after {res.iterations} iterations"
        )
    return res


def solve_penalized(problem: BilevelProblem, x, gamma: float, y_start, tol: float = 1e-10,
                    max_iters: int = 100_000) -> LLSolveResult:
    obj, grad = problem.penalized_objective(np.asarray(x, dtype=float), gamma)
    res = gd_minimize(obj, grad, y_start, penalized_settings(problem, gamma, tol, max_iters))
    if not res.converged:
        raise InnerSolveError(
            f"penalized lower-level problem min_y f/gamma + g stalled at x={np.asarray(x).tolist()}, "
            f"gamma={gamma}: grad norm {res.grad_norm:.3e} after {res.iterations} iterations"
        )
    return res


# ---------------------------------------------------------------------------
# run bookkeeping


class _Recorder:
    def __init__(self, problem: BilevelProblem, config: SolverConfig):
        self.problem = problem
        self.config = config
        self.records: list[IterateRecord] = []
        self.start = time.monotonic_ns()
        self._gap_y: Optional[np.ndarray] = None

    def make(self, t, x, y_gamma, y_g, update_norm, ll_evals) -> IterateRecord:
        g_gap = None
        if self.config.track_gap:
            start = self._gap_y if self._gap_y is not None else y_gamma
            sol = solve_ll(self.problem, x, start, self.config.oracle_tol, self.config.oracle_max_iters)
            self._gap_y = sol.minimizer
            g_gap = self.problem.eval_g(x, y_gamma) - sol.value
        return IterateRecord(
            t=t, x=x.copy(), y_gamma=y_gamma.copy(), y_g=None if y_g is None else y_g.copy(),
            f_val=float(self.problem.eval_f(x, y_gamma)), g_gap=g_gap, update_norm=update_norm,
            ll_grad_evals=ll_evals, wall_nanos=time.monotonic_ns() - self.start,
        )

    def maybe_record(self, t, x, y_gamma, y_g, update_norm, ll_evals, force=False):
        if force or t % self.config.record_every == 0:
            self.records.append(self.make(t, x, y_gamma, y_g, update_norm, ll_evals))

    def diverged(self, what: str, t: int, last_good) -> SolverDivergence:
        last = self.make(*last_good) if last_good is not None else None
        return SolverDivergence(f"{self.problem.name}: non-finite {what} at iteration {t}", last)


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _should_stop(config: SolverConfig, update_norm: float) -> bool:
    return config.update_tol is not None and update_norm <= config.update_tol


# ---------------------------------------------------------------------------
# solvers


def pbgd_free_run(problem: BilevelProblem, config: SolverConfig) -> list[IterateRecord]:
    """Value-function-free penalty gradient descent.

    Per outer step: ``inner_k`` steps of
    ``y <- y - eta_gamma * (grad_y f(x, y) / gamma + grad_y g(x, y))``
    followed by ``x <- x - eta * grad_x f(x, y)``.
    """
    x, y0 = config.initial_point(problem)
    y = y0.copy()
    inv_gamma = 1.0 / config.gamma
    rec = _Recorder(problem, config)
    ll_evals = 0
    rec.maybe_record(0, x, y, None, None, ll_evals, force=True)
    last_good = (0, x, y, None, None, ll_evals)
    t = 0
    for t in range(1, config.outer_t + 1):
        y_before = y
        if not config.warm_start:
            y = y0.copy()
        for _ in range(config.inner_k):
            y = y - config.eta_gamma * (inv_gamma * problem.grad_f(x, y)[1] + problem.grad_g(x, y)[1])
        ll_evals += config.inner_k
        if not _finite(y):
            raise rec.diverged("lower-level iterate", t, last_good)
        direction = problem.grad_f(x, y_before if config.stale_y else y)[0]
        x = x - config.eta * direction
        if not _finite(x, direction):
            raise rec.diverged("upper-level iterate", t, last_good)
        unorm = float(np.linalg.norm(direction))
        last_good = (t, x, y, None, unorm, ll_evals)
        stop = _should_stop(config, unorm)
        rec.maybe_record(t, x, y, None, unorm, ll_evals, force=stop or t == config.outer_t)
        if stop:
            break
    return rec.records


def f2sa_sl_run(problem: BilevelProblem, config: SolverConfig) -> list[IterateRecord]:
    """Fully single-loop F2SA without momentum.

    Per outer step (``inner_k`` times with ``x`` frozen):
    ``y_g <- y_g - eta_g grad_y g(x, y_g)`` and
    ``y_gam <- y_gam - eta_gamma (grad_y f(x, y_gam)/gamma + grad_y g(x, y_gam))``;
    then ``x <- x - eta [grad_x f(x, y_gam) + gamma (grad_x g(x, y_gam) - grad_x g(x, y_g))]``.
    ``y_g`` starts at ``y0``.
    """
    x, y0 = config.initial_point(problem)
    y_gam, y_g = y0.copy(), y0.copy()
    gamma = config.gamma
    inv_gamma = 1.0 / gamma
    rec = _Recorder(problem, config)
    ll_evals = 0
    rec.maybe_record(0, x, y_gam, y_g, None, ll_evals, force=True)
    last_good = (0, x, y_gam, y_g, None, ll_evals)
    for t in range(1, config.outer_t + 1):
        for _ in range(config.inner_k):
            y_g = y_g - config.eta_g * problem.grad_g(x, y_g)[1]
            y_gam = y_gam - config.eta_gamma * (inv_gamma * problem.grad_f(x, y_gam)[1] + problem.grad_g(x, y_gam)[1])
        ll_evals += 2 * config.inner_k
        if not _finite(y_g, y_gam):
            raise rec.diverged("lower-level iterate", t, last_good)
        direction = (
            problem.grad_f(x, y_gam)[0]
            + gamma * (problem.grad_g(x, y_gam)[0] - problem.grad_g(x, y_g)[0])
        )
        x = x - config.eta * direction
        if not _finite(x, direction):
            raise rec.diverged("upper-level iterate", t, last_good)
        unorm = float(np.linalg.norm(direction))
        last_good = (t, x, y_gam, y_g, unorm, ll_evals)
        stop = _should_stop(config, unorm)
        rec.maybe_record(t, x, y_gam, y_g, unorm, ll_evals, force=stop or t == config.outer_t)
        if stop:
            break
    return rec.records


def pbgd_oracle_run(problem: BilevelProblem, config: SolverConfig) -> list[IterateRecord]:
    """Double-loop penalty gradient descent with both lower levels solved to
    ``oracle_tol`` at every outer step (warm-started from the previous
    solutions; the first penalized solve starts from the first ``y_g``)."""
    x, y0 = config.initial_point(problem)
    gamma = config.gamma
    tol, cap = config.oracle_tol, config.oracle_max_iters
    rec = _Recorder(problem, config)
    ll_evals = 0

    sol_g = solve_ll(problem, x, y0, tol, cap)
    sol_gam = solve_penalized(problem, x, gamma, sol_g.minimizer, tol, cap)
    ll_evals += sol_g.grad_evals + sol_gam.grad_evals
    rec.maybe_record(0, x, sol_gam.minimizer, sol_g.minimizer, None, ll_evals, force=True)
    last_good = (0, x, sol_gam.minimizer, sol_g.minimizer, None, ll_evals)
    for t in range(1, config.outer_t + 1):
        yg, ygam = sol_g.minimizer, sol_gam.minimizer
        direction = (
            problem.grad_f(x, ygam)[0]
            + gamma * (problem.grad_g(x, ygam)[0] - problem.grad_g(x, yg)[0])
        )
        x = x - config.eta * direction
        if not _finite(x, direction):
            raise rec.diverged("upper-level iterate", t, last_good)
        try:
            sol_g = solve_ll(problem, x, yg, tol, cap)
            sol_gam = solve_penalized(problem, x, gamma, ygam, tol, cap)
        except DivergenceError:
            raise rec.diverged("oracle solve", t, last_good) from None
        ll_evals += sol_g.grad_evals + sol_gam.grad_evals
        unorm = float(np.linalg.norm(direction))
        last_good = (t, x, sol_gam.minimizer, sol_g.minimizer, unorm, ll_evals)
        stop = _should_stop(config, unorm)
        rec.maybe_record(t, x, sol_gam.minimizer, sol_g.minimizer, unorm, ll_evals,
                         force=stop or t == config.outer_t)
        if stop:
            break
    return rec.records


SOLVERS = {
    "pbgd_free": pbgd_free_run,
    "f2sa_sl": f2sa_sl_run,
    "pbgd_oracle": pbgd_oracle_run,
}


def run_solver(name: str, problem: BilevelProblem, config: SolverConfig) -> list[IterateRecord]:
    try:
        fn = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None
    return fn(problem, config)


def with_overrides(config: SolverConfig, **kw) -> SolverConfig:
    return replace(config, **kw)
