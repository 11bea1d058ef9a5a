"""Measured quantities of the penalty reformulation.

All functions solve the two lower-level problems numerically (see
:func:`solve_pair`) rather than using closed forms, so they apply to any
:class:`~pbgdfree.problems.BilevelProblem` whose lower level has a unique
minimizer for each ``x``.

Notation: ``y_g = argmin_y g(x, y)``, ``y_gam = argmin_y f(x, y)/gamma + g(x, y)``,
``phi(x) = f(x, y_g)``, ``F_gamma(x) = f(x, y_gam) + gamma (g(x, y_gam) - g(x, y_g))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .numerics import LLSolveResult
from .problems import BilevelProblem
from .solvers import solve_ll, solve_penalized

ORACLE_TOL = 1e-10
ORACLE_SLACK = 1e-8


@dataclass(frozen=True)
class LLPair:
    x: np.ndarray
    gamma: float
    y_g: LLSolveResult
    y_gamma: LLSolveResult
    f_at_g: float
    f_at_gamma: float
    g_at_gamma: float

    @property
    def phi(self) -> float:
        return self.f_at_g

    @property
    def F_gamma(self) -> float:
        return self.f_at_gamma + self.gamma * (self.g_at_gamma - self.y_g.value)


def _require_unique(problem: BilevelProblem):
    if not problem.unique_ll:
        raise ValueError(
            f"{problem.name}: diagnostics need a unique lower-level minimizer for each x"
        )


def solve_pair(problem: BilevelProblem, x, gamma: float, oracle_tol: float = ORACLE_TOL,
               y_start=None, max_iters: int = 100_000) -> LLPair:
    """Solve ``min g`` from ``y_start`` (zeros by default), then ``min f/gamma + g``
    warm-started at that solution."""
    _require_unique(problem)
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y0 = np.zeros(problem.dim_y) if y_start is None else np.asarray(y_start, dtype=float)
    sol_g = solve_ll(problem, x, y0, oracle_tol, max_iters)
    sol_gam = solve_penalized(problem, x, gamma, sol_g.minimizer, oracle_tol, max_iters)
    return LLPair(
        x=x, gamma=float(gamma), y_g=sol_g, y_gamma=sol_gam,
        f_at_g=float(problem.eval_f(x, sol_g.minimizer)),
        f_at_gamma=float(problem.eval_f(x, sol_gam.minimizer)),
        g_at_gamma=float(problem.eval_g(x, sol_gam.minimizer)),
    )


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyGradient:
    grad: np.ndarray
    f_part: np.ndarray
    value_fn_part: np.ndarray


def penalty_gradient(problem: BilevelProblem, x, gamma: float, oracle_tol: float = ORACLE_TOL,
                     y_start=None, pair: Optional[LLPair] = None) -> PenaltyGradient:
    """``grad F_gamma(x)`` split into ``grad_x f(x, y_gam)`` and the value-function
    term ``gamma (grad_x g(x, y_gam) - grad_x g(x, y_g))`` that PBGD-Free omits."""
    pair = pair or solve_pair(problem, x, gamma, oracle_tol, y_start)
    xg, yg, ygam = pair.x, pair.y_g.minimizer, pair.y_gamma.minimizer
    f_part = problem.grad_f(xg, ygam)[0]
    vf_part = gamma * (problem.grad_g(xg, ygam)[0] - problem.grad_g(xg, yg)[0])
    return PenaltyGradient(grad=f_part + vf_part, f_part=f_part, value_fn_part=vf_part)


def flatness_delta(f_gap: float, dist: float, c: float, alpha: float) -> float:
    return max(0.0, f_gap - c * dist**alpha)


@dataclass(frozen=True)
class FlatnessPoint:
    x: np.ndarray
    y_g: np.ndarray
    y_gamma: np.ndarray
    f_gap: float
    dist: float
    delta_x: float


@dataclass(frozen=True)
class FlatnessReport:
    c: float
    alpha: float
    gamma: float
    points: tuple[FlatnessPoint, ...]

    @property
    def max_delta(self) -> float:
        return max(p.delta_x for p in self.points)


def _check_flat_params(c, alpha):
    if not c >= 0:
        raise ValueError(f"c must be non-negative, got {c}")
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")


def flatness_point(problem: BilevelProblem, x, c: float, alpha: float, gamma: float,
                   oracle_tol: float = ORACLE_TOL, y_start=None, pair: Optional[LLPair] = None) -> FlatnessPoint:
    _check_flat_params(c, alpha)
    pair = pair or solve_pair(problem, x, gamma, oracle_tol, y_start)
    yg, ygam = pair.y_g.minimizer, pair.y_gamma.minimizer
    f_gap = abs(pair.f_at_g - pair.f_at_gamma)
    dist = float(np.linalg.norm(yg - ygam))
    return FlatnessPoint(x=pair.x, y_g=yg, y_gamma=ygam, f_gap=f_gap, dist=dist,
                         delta_x=flatness_delta(f_gap, dist, c, alpha))


def compute_delta(problem: BilevelProblem, x, c: float, alpha: float, gamma: float,
                  oracle_tol: float = ORACLE_TOL, y_start=None) -> float:
    """``max(0, |f(x, y_g) - f(x, y_gam)| - c ||y_g - y_gam||^alpha)``."""
    return flatness_point(problem, x, c, alpha, gamma, oracle_tol, y_start).delta_x


def flatness_report(problem: BilevelProblem, xs: Iterable, c: float, alpha: float, gamma: float,
                    oracle_tol: float = ORACLE_TOL) -> FlatnessReport:
    """δ(x) over a sequence of points, warm-starting each ``y_g`` solve from the
    previous one."""
    points = []
    y_start = None
    for x in xs:
        pt = flatness_point(problem, x, c, alpha, gamma, oracle_tol, y_start)
        y_start = pt.y_g
        points.append(pt)
    return FlatnessReport(c=c, alpha=alpha, gamma=gamma, points=tuple(points))


# ---------------------------------------------------------------------------


def lipschitz_gap_bound(l_f0: float, mu: float, gamma: float) -> float:
    """``l_f0^2 / (2 mu gamma)``: value-gap bound under a Lipschitz upper level."""
    return l_f0**2 / (2.0 * mu * gamma)


def flatness_gap_bound(c: float, alpha: float, delta: float, mu: float, gamma: float) -> float:
    """``c^(2/(2-a)) (2a)^(a/(2-a)) (1 - a/2) (mu gamma)^(-a/(2-a)) + delta``."""
    p = alpha / (2.0 - alpha)
    return c ** (2.0 / (2.0 - alpha)) * (2.0 * alpha) ** p * (1.0 - alpha / 2.0) * (mu * gamma) ** (-p) + delta


@dataclass(frozen=True)
class GapReport:
    gamma: float
    phi: float
    F_gamma: float
    value_gap: float
    y_dist: float
    lip_bound: float
    flat_bound: float


def approx_gap(problem: BilevelProblem, x, gamma: float, oracle_tol: float = ORACLE_TOL, *,
               l_f0: float, mu: float, c: float, alpha: float, delta: float, y_start=None) -> GapReport:
    if not (mu > 0 and l_f0 >= 0):
        raise ValueError("need mu > 0 and l_f0 >= 0")
    _check_flat_params(c, alpha)
    if alpha >= 2:
        raise ValueError("flatness bound needs alpha < 2")
    pair = solve_pair(problem, x, gamma, oracle_tol, y_start)
    return GapReport(
        gamma=float(gamma), phi=pair.phi, F_gamma=pair.F_gamma,
        value_gap=abs(pair.phi - pair.F_gamma),
        y_dist=float(np.linalg.norm(pair.y_g.minimizer - pair.y_gamma.minimizer)),
        lip_bound=lipschitz_gap_bound(l_f0, mu, gamma),
        flat_bound=flatness_gap_bound(c, alpha, delta, mu, gamma),
    )


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KKTResidual:
    r_x: float
    r_y: float
    r_feas: float
    w_norm: float


def kkt_residual(problem: BilevelProblem, x, gamma: float, oracle_tol: float = ORACLE_TOL,
                 y_start=None) -> KKTResidual:
    """Residuals of the gradient-constrained reformulation at ``(x, y_gam)``
    with multiplier ``w = gamma (y_gam - y_g)``.

    ``r_x`` and ``r_y`` are the norms of the x- and y-blocks of
    ``grad f(x, y_gam) + gamma (grad g(x, y_gam) - grad g(x, y_g))``;
    ``r_feas = ||grad_y g(x, y_gam)||^2``.
    """
    pair = solve_pair(problem, x, gamma, oracle_tol, y_start)
    xg, yg, ygam = pair.x, pair.y_g.minimizer, pair.y_gamma.minimizer
    fx, fy = problem.grad_f(xg, ygam)
    gx_gam, gy_gam = problem.grad_g(xg, ygam)
    gx_g, gy_g = problem.grad_g(xg, yg)
    r_x = float(np.linalg.norm(fx + gamma * (gx_gam - gx_g)))
    r_y = float(np.linalg.norm(fy + gamma * (gy_gam - gy_g)))
    return KKTResidual(r_x=r_x, r_y=r_y, r_feas=float(gy_gam @ gy_gam),
                       w_norm=float(gamma * np.linalg.norm(ygam - yg)))


@dataclass(frozen=True)
class DeltaProbe:
    dist_x: float
    delta_diff: float
    ratio: float


def delta_lipschitz_probe(problem: BilevelProblem, x_pairs: Sequence, c: float, alpha: float,
                          gamma: float, oracle_tol: float = ORACLE_TOL) -> list[DeltaProbe]:
    """Difference quotients ``|δ(x) - δ(x')| / ||x - x'||`` (0 for identical points)."""
    out = []
    for a, b in x_pairs:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        da = compute_delta(problem, a, c, alpha, gamma, oracle_tol)
        db = compute_delta(problem, b, c, alpha, gamma, oracle_tol)
        dist = float(np.linalg.norm(a - b))
        diff = abs(da - db)
        out.append(DeltaProbe(dist_x=dist, delta_diff=diff, ratio=diff / dist if dist > 0 else 0.0))
    return out


def grad_y_f_at_ll(problem: BilevelProblem, x, oracle_tol: float = ORACLE_TOL, y_start=None) -> float:
    """``||grad_y f(x, y_g*(x))||``, the local Lipschitz constant the flatness
    condition replaces."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y0 = np.zeros(problem.dim_y) if y_start is None else y_start
    sol = solve_ll(problem, x, y0, oracle_tol)
    return float(np.linalg.norm(problem.grad_f(x, sol.minimizer)[1]))


def penalty_value(problem: BilevelProblem, x, gamma: float, oracle_tol: float = ORACLE_TOL,
                  y_start=None) -> float:
    """``F_gamma(x)`` via the oracle."""
    return solve_pair(problem, x, gamma, oracle_tol, y_start).F_gamma
