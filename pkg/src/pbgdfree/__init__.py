"""Penalty-based bilevel optimization: PBGD-Free, single-loop F2SA, and
diagnostics for the flatness condition and penalty-approximation bounds."""

from .numerics import DivergenceError, GDSettings, LLSolveResult, finite_diff_grad, gd_minimize, log_sigmoid, stable_softmax
from .problems import (
    BilevelProblem,
    ClosedForm,
    DpoPair,
    ToyPeftSpec,
    conv_softmax_forward,
    default_toy_spec,
    load_toy_spec,
    make_example1,
    make_example3,
    make_toy_peft,
)
from .solvers import (
    InnerSolveError,
    IterateRecord,
    SolverConfig,
    SolverDivergence,
    f2sa_sl_run,
    pbgd_free_run,
    pbgd_oracle_run,
)
from .diagnostics import (
    FlatnessReport,
    GapReport,
    KKTResidual,
    approx_gap,
    compute_delta,
    delta_lipschitz_probe,
    kkt_residual,
    penalty_gradient,
)

__version__ = "0.1.0"
