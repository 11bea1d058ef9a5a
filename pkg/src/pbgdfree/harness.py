"""Experiment configuration, CSV emission, ``run`` and ``sweep``.

Config files are flat ``section.key = value`` text; ``#`` starts a comment.
Recognized keys are listed in :data:`KEYS`. Unset solver keys take
per-problem defaults (:func:`solver_defaults`).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import diagnostics as diag
from .numerics import DivergenceError
from .problems import BilevelProblem, load_toy_spec, make_example1, make_example3, make_toy_peft
from .solvers import (
    SOLVERS,
    InnerSolveError,
    IterateRecord,
    SolverConfig,
    penalized_settings,
    run_solver,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ASSERTION = 4
EXIT_IO = 5


class ConfigError(ValueError):
    """Bad config content. ``key`` names the offending key when known."""

    def __init__(self, message: str, key: Optional[str] = None, lineno: Optional[int] = None):
        where = []
        if lineno is not None:
            where.append(f"line {lineno}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.lineno = lineno


# ---------------------------------------------------------------------------
# value parsers


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _int(s: str) -> int:
    v = float(s)
    if not v.is_integer():
        raise ValueError(f"expected an integer, got {s!r}")
    return int(v)


def _floats(s: str) -> tuple[float, ...]:
    parts = [p for p in (q.strip() for q in s.split(",")) if p]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(_float(p) for p in parts)


def _str(s: str) -> str:
    if not s.strip():
        raise ValueError("empty value")
    return s.strip()


KEYS: dict[str, Callable[[str], Any]] = {
    "problem.name": _str,
    "problem.lf0": _float,
    "problem.dataset": _str,
    "problem.include_alt_sft": _bool,
    "problem.beta": _float,
    "problem.reg_weight": _float,
    "problem.ref_x": _float,
    "problem.ref_y": _float,
    "solver.name": _str,
    "solver.gamma": _float,
    "solver.eta": _float,
    "solver.eta_gamma": _float,
    "solver.eta_g": _float,
    "solver.inner_k": _int,
    "solver.outer_t": _int,
    "solver.x0": _floats,
    "solver.y0": _floats,
    "solver.warm_start": _bool,
    "solver.record_every": _int,
    "solver.oracle_tol": _float,
    "solver.oracle_max_iters": _int,
    "solver.update_tol": _float,
    "solver.stale_y": _bool,
    "solver.track_gap": _bool,
    "diagnostics.flatness_c": _float,
    "diagnostics.flatness_alpha": _float,
    "diagnostics.gap_gammas": _floats,
    "diagnostics.gap_l_f0": _float,
    "diagnostics.gap_mu": _float,
    "diagnostics.gap_c": _float,
    "diagnostics.gap_alpha": _float,
    "diagnostics.gap_delta": _float,
    "diagnostics.kkt": _bool,
    "output.dir": _str,
}

NUMERIC_KEYS = frozenset(k for k, p in KEYS.items() if p in (_float, _int))

PROBLEMS = ("example1", "example3", "toy_peft")


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``section.key = value`` lines into a dict of typed values."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", lineno=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError("unknown key", key=key, lineno=lineno)
        if key in out:
            raise ConfigError("key given twice", key=key, lineno=lineno)
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(str(exc), key=key, lineno=lineno) from None
    return out


def read_config(path: str) -> dict[str, Any]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# experiment config


@dataclass(frozen=True)
class GapSpec:
    gammas: tuple[float, ...]
    l_f0: float
    mu: float
    c: float
    alpha: float
    delta: float


@dataclass(frozen=True)
class ExperimentConfig:
    problem_name: str
    problem_params: dict = field(compare=False)
    solver_name: str
    solver: SolverConfig
    flatness: Optional[tuple[float, float]] = None
    gaps: Optional[GapSpec] = None
    kkt: bool = False
    output_dir: Optional[str] = None


def solver_defaults(problem_name: str, problem: BilevelProblem, gamma: float, params: dict) -> dict:
    """Per-problem solver defaults applied beneath the config file.

    * example1: :class:`SolverConfig` defaults (γ=10, η=0.1, η^γ=η^g=0.25, K=1).
    * example3: η=1e-3 and η^γ set to the oracle's stable penalized step for γ.
    * toy_peft: γ=15, T=5000, η=η^γ=η^g=0.01, started at the reference weights.
    """
    if problem_name == "example3":
        return {"eta": 1e-3, "eta_gamma": penalized_settings(problem, gamma).step}
    if problem_name == "toy_peft":
        return {
            "eta": 0.01, "eta_gamma": 0.01, "eta_g": 0.01, "outer_t": 5000,
            "x0": (params.get("ref_x", -5.34),), "y0": (params.get("ref_y", -9.94),),
        }
    return {}


def _toy_spec(params: dict):
    overrides = {}
    if "beta" in params:
        overrides["beta"] = params["beta"]
    if "reg_weight" in params:
        overrides["reg_weight"] = params["reg_weight"]
    if "ref_x" in params or "ref_y" in params:
        overrides["ref_params"] = (params.get("ref_x", -5.34), params.get("ref_y", -9.94))
    return load_toy_spec(params.get("dataset"), include_alt_sft=params.get("include_alt_sft", False), **overrides)


def build_problem(name: str, params: dict) -> BilevelProblem:
    if name == "example1":
        return make_example1(params.get("lf0", 10.0))
    if name == "example3":
        return make_example3()
    if name == "toy_peft":
        return make_toy_peft(_toy_spec(params))
    raise ConfigError(f"unknown problem {name!r}; choose from {list(PROBLEMS)}", key="problem.name")


_PROBLEM_KEYS = {
    "example1": {"lf0"},
    "example3": set(),
    "toy_peft": {"dataset", "include_alt_sft", "beta", "reg_weight", "ref_x", "ref_y"},
}

_DIAG_GAP_DEFAULTS = {"gap_l_f0": 10.0, "gap_mu": 2.0, "gap_c": 5.0, "gap_alpha": 1.1, "gap_delta": 0.0}


def build_experiment(values: dict[str, Any], base_dir: str = ".") -> tuple[ExperimentConfig, BilevelProblem]:
    """Validate parsed config values and build the problem they describe."""
    pname = values.get("problem.name")
    if pname is None:
        raise ConfigError("missing required key", key="problem.name")
    if pname not in PROBLEMS:
        raise ConfigError(f"unknown problem {pname!r}; choose from {list(PROBLEMS)}", key="problem.name")
    params = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("problem.") and k != "problem.name"}
    for k in params:
        if k not in _PROBLEM_KEYS[pname]:
            raise ConfigError(f"not a parameter of {pname}", key=f"problem.{k}")
    if "dataset" in params:
        path = params["dataset"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.isfile(path):
            raise ConfigError(f"dataset file {path} does not exist", key="problem.dataset")
        params["dataset"] = path

    try:
        problem = build_problem(pname, params)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), key="problem.dataset" if "dataset" in params else "problem.name") from None

    sname = values.get("solver.name", "pbgd_free")
    if sname not in SOLVERS:
        raise ConfigError(f"unknown solver {sname!r}; choose from {sorted(SOLVERS)}", key="solver.name")

    solver_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("solver.") and k != "solver.name"}
    gamma = solver_kw.get("gamma", 15.0 if pname == "toy_peft" else SolverConfig.gamma)
    merged = {"gamma": gamma, **solver_defaults(pname, problem, gamma, params), **solver_kw}
    try:
        scfg = SolverConfig(**merged)
        scfg.initial_point(problem)
    except ValueError as exc:
        msg = str(exc)
        bad = next((f.name for f in fields(SolverConfig) if msg.startswith(f.name)), None)
        raise ConfigError(msg, key=f"solver.{bad}" if bad else None) from None

    flat = None
    if "diagnostics.flatness_c" in values or "diagnostics.flatness_alpha" in values:
        c = values.get("diagnostics.flatness_c")
        a = values.get("diagnostics.flatness_alpha")
        if c is None or a is None:
            missing = "diagnostics.flatness_c" if c is None else "diagnostics.flatness_alpha"
            raise ConfigError("flatness diagnostics need both c and alpha", key=missing)
        if c < 0:
            raise ConfigError("must be non-negative", key="diagnostics.flatness_c")
        if a <= 1:
            raise ConfigError("must exceed 1", key="diagnostics.flatness_alpha")
        flat = (c, a)

    gaps = None
    if "diagnostics.gap_gammas" in values:
        if pname == "toy_peft":
            raise ConfigError("gap bounds need known constants; not available for toy_peft",
                              key="diagnostics.gap_gammas")
        g = {k: values.get(f"diagnostics.{k}", d) for k, d in _DIAG_GAP_DEFAULTS.items()}
        if any(v <= 0 for v in values["diagnostics.gap_gammas"]):
            raise ConfigError("gammas must be positive", key="diagnostics.gap_gammas")
        if g["gap_mu"] <= 0:
            raise ConfigError("must be positive", key="diagnostics.gap_mu")
        if not 1 < g["gap_alpha"] < 2:
            raise ConfigError("must lie in (1, 2)", key="diagnostics.gap_alpha")
        for k in ("gap_l_f0", "gap_c", "gap_delta"):
            if g[k] < 0:
                raise ConfigError("must be non-negative", key=f"diagnostics.{k}")
        gaps = GapSpec(values["diagnostics.gap_gammas"], g["gap_l_f0"], g["gap_mu"], g["gap_c"],
                       g["gap_alpha"], g["gap_delta"])
    else:
        for k in _DIAG_GAP_DEFAULTS:
            if f"diagnostics.{k}" in values:
                raise ConfigError("set diagnostics.gap_gammas to enable gap sweeps", key=f"diagnostics.{k}")

    cfg = ExperimentConfig(
        problem_name=pname, problem_params=params, solver_name=sname, solver=scfg,
        flatness=flat, gaps=gaps, kkt=values.get("diagnostics.kkt", False),
        output_dir=values.get("output.dir"),
    )
    return cfg, problem


# ---------------------------------------------------------------------------
# CSV output


def fmt(v) -> str:
    """17-significant-digit text for floats; ``''`` for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def _names(prefix: str, n: int) -> list[str]:
    return [prefix] if n == 1 else [f"{prefix}{i}" for i in range(n)]


def trajectory_header(problem: BilevelProblem) -> list[str]:
    return (["t"] + _names("x", problem.dim_x) + _names("y_gamma", problem.dim_y) + _names("y_g", problem.dim_y)
            + ["f_val", "g_gap", "update_norm", "ll_grad_evals", "wall_nanos"])


def trajectory_rows(problem: BilevelProblem, records: Sequence[IterateRecord]):
    blank_y = [None] * problem.dim_y
    for r in records:
        yg = list(r.y_g) if r.y_g is not None else blank_y
        yield [r.t, *r.x, *r.y_gamma, *yg, r.f_val, r.g_gap, r.update_norm, r.ll_grad_evals, r.wall_nanos]


def write_trajectory(path: str, problem: BilevelProblem, records: Sequence[IterateRecord]) -> None:
    write_csv(path, trajectory_header(problem), trajectory_rows(problem, records))


GAP_HEADER = ["gamma", "phi", "F_gamma", "value_gap", "y_dist", "lip_bound", "flat_bound"]
KKT_HEADER = ["gamma", "r_x", "r_y", "r_feas", "w_norm"]


def gap_rows(reports: Sequence[diag.GapReport]):
    for g in reports:
        yield [g.gamma, g.phi, g.F_gamma, g.value_gap, g.y_dist, g.lip_bound, g.flat_bound]


def flatness_header(dim_x: int) -> list[str]:
    return _names("x", dim_x) + ["delta_x", "f_gap", "dist"]


def flatness_rows(points: Sequence[diag.FlatnessPoint]):
    for p in points:
        yield [*p.x, p.delta_x, p.f_gap, p.dist]


# ---------------------------------------------------------------------------
# run


@dataclass
class RunResult:
    records: list[IterateRecord]
    output_dir: str
    wall_seconds: float
    summary: dict[str, str]


def _final_gradients(problem: BilevelProblem, cfg: ExperimentConfig, last: IterateRecord) -> dict[str, str]:
    x, y = last.x, last.y_gamma
    fx, fy = problem.grad_f(x, y)
    _, gy = problem.grad_g(x, y)
    out = {
        "final_grad_x_f": fmt(float(np.linalg.norm(fx))),
        "final_grad_y_penalized": fmt(float(np.linalg.norm(fy / cfg.solver.gamma + gy))),
    }
    try:
        pg = diag.penalty_gradient(problem, x, cfg.solver.gamma, cfg.solver.oracle_tol, y_start=last.y_g)
        out["final_grad_F_gamma_oracle"] = fmt(float(np.linalg.norm(pg.grad)))
    except (InnerSolveError, DivergenceError, ValueError) as exc:
        out["final_grad_F_gamma_oracle"] = f"unavailable ({exc})"
    return out


def write_summary(path: str, summary: dict[str, str], provenance: Sequence[str] = ()) -> None:
    with open(path, "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k} = {v}\n")
        for row in provenance:
            fh.write(f"dataset.row = {row}\n")


def run_experiment(cfg: ExperimentConfig, problem: BilevelProblem, output_dir: str) -> RunResult:
    """Run the configured solver and write outputs into ``output_dir``.

    Writes ``trajectory.csv``, ``summary`` and, when requested,
    ``flatness.csv`` (δ at each recorded iterate), ``gaps.csv`` (at the final
    iterate) and ``kkt.csv`` (at the final iterate).
    """
    os.makedirs(output_dir, exist_ok=True)
    t0 = time.monotonic()
    records = run_solver(cfg.solver_name, problem, cfg.solver)
    wall = time.monotonic() - t0
    write_trajectory(os.path.join(output_dir, "trajectory.csv"), problem, records)
    last = records[-1]
    gamma = cfg.solver.gamma

    if cfg.flatness is not None:
        c, a = cfg.flatness
        rep = diag.flatness_report(problem, [r.x for r in records], c, a, gamma, cfg.solver.oracle_tol)
        write_csv(os.path.join(output_dir, "flatness.csv"), flatness_header(problem.dim_x), flatness_rows(rep.points))
    if cfg.gaps is not None:
        gs = cfg.gaps
        reports = [diag.approx_gap(problem, last.x, g, cfg.solver.oracle_tol, l_f0=gs.l_f0, mu=gs.mu,
                                   c=gs.c, alpha=gs.alpha, delta=gs.delta) for g in gs.gammas]
        write_csv(os.path.join(output_dir, "gaps.csv"), GAP_HEADER, gap_rows(reports))
    if cfg.kkt:
        k = diag.kkt_residual(problem, last.x, gamma, cfg.solver.oracle_tol)
        write_csv(os.path.join(output_dir, "kkt.csv"), KKT_HEADER, [[gamma, k.r_x, k.r_y, k.r_feas, k.w_norm]])

    summary = {
        "problem": cfg.problem_name,
        "solver": cfg.solver_name,
        "final_t": str(last.t),
        "final_x": " ".join(fmt(v) for v in last.x),
        "final_y_gamma": " ".join(fmt(v) for v in last.y_gamma),
        "final_f": fmt(last.f_val),
        "final_g": fmt(float(problem.eval_g(last.x, last.y_gamma))),
        **_final_gradients(problem, cfg, last),
        "ll_grad_evals": str(last.ll_grad_evals),
        "wall_seconds": fmt(wall),
    }
    write_summary(os.path.join(output_dir, "summary"), summary, problem.provenance)
    return RunResult(records=records, output_dir=output_dir, wall_seconds=wall, summary=summary)


def classify_error(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DivergenceError, InnerSolveError)):
        return EXIT_DIVERGED
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    raise exc


def run_config_file(config_path: str, out: Optional[str] = None) -> RunResult:
    values = read_config(config_path)
    cfg, problem = build_experiment(values, base_dir=os.path.dirname(os.path.abspath(config_path)))
    out_dir = out or cfg.output_dir or "out"
    return run_experiment(cfg, problem, out_dir)


# ---------------------------------------------------------------------------
# sweep


SWEEP_HEADER = ["value", "status", "exit_code", "final_t", "final_f", "final_g", "ll_grad_evals", "message"]


def normalize_param(name: str) -> str:
    key = name if "." in name else f"solver.{name}"
    if key not in KEYS:
        raise ConfigError("unknown sweep parameter", key=name)
    if key not in NUMERIC_KEYS:
        raise ConfigError("sweep parameter must be a numeric key", key=name)
    return key


def sweep(config_path: str, param: str, values: Sequence[str], out: Optional[str] = None) -> tuple[int, str]:
    """One run per value in ``<out>/<key>=<value>/``; writes ``sweep_summary.csv``.

    Returns ``(exit_code, summary_path)``. Individual failures are recorded in
    the summary and do not stop the sweep.
    """
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = normalize_param(param)
    base = read_config(config_path)
    parser = KEYS[key]
    parsed = []
    for v in values:
        try:
            parsed.append((v, parser(v)))
        except ValueError as exc:
            raise ConfigError(f"bad sweep value: {exc}", key=key) from None

    out_dir = out or base.get("output.dir") or "out"
    os.makedirs(out_dir, exist_ok=True)
    base_dir = os.path.dirname(os.path.abspath(config_path))
    rows = []
    worst = EXIT_OK
    for text, value in parsed:
        sub = os.path.join(out_dir, f"{key.split('.', 1)[1]}={text.strip()}")
        try:
            cfg, problem = build_experiment({**base, key: value}, base_dir=base_dir)
            res = run_experiment(cfg, problem, sub)
            last = res.records[-1]
            rows.append([text.strip(), "ok", EXIT_OK, last.t, last.f_val, float(problem.eval_g(last.x, last.y_gamma)),
                         last.ll_grad_evals, ""])
        except Exception as exc:  # recorded per run; the sweep continues
            code = classify_error(exc)
            status = "diverged" if code == EXIT_DIVERGED else "failed"
            logger.warning("sweep %s=%s %s: %s", key, text, status, exc)
            rows.append([text.strip(), status, code, None, None, None, None, str(exc).replace("\n", " ")])
            worst = worst or code
    path = os.path.join(out_dir, "sweep_summary.csv")
    write_csv(path, SWEEP_HEADER, rows)
    return worst, path
