"""Bilevel problem interface and the built-in analytic problems.

A problem bundles an upper-level objective ``f(x, y)`` and a lower-level
objective ``g(x, y)`` together with hand-derived gradients. ``grad_f`` and
``grad_g`` return the pair ``(d/dx, d/dy)``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .numerics import log_sigmoid, sigmoid, stable_softmax

logger = logging.getLogger(__name__)

Vec = np.ndarray
GradPair = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class ClosedForm:
    y_g_star: Callable[[Vec], Vec]
    y_gamma_star: Optional[Callable[[Vec, float], Vec]] = None
    grad_F_gamma: Optional[Callable[[Vec, float], Vec]] = None


@dataclass(frozen=True)
class BilevelProblem:
    """Evaluation/gradient bundle for a bilevel problem.

    ``smooth_f`` and ``smooth_g`` bound the curvature of ``f(x, .)`` and
    ``g(x, .)`` in ``y``; they set the default inner step sizes. ``unique_ll``
    records that ``argmin_y g(x, y)`` is a singleton for every ``x``, which the
    diagnostics rely on to evaluate ``phi(x) = f(x, y_g*(x))``.
    """

    name: str
    dim_x: int
    dim_y: int
    eval_f: Callable[[Vec, Vec], float]
    eval_g: Callable[[Vec, Vec], float]
    grad_f: Callable[[Vec, Vec], GradPair]
    grad_g: Callable[[Vec, Vec], GradPair]
    smooth_f: float
    smooth_g: float
    closed_form: Optional[ClosedForm] = None
    unique_ll: bool = True
    # values echoed into run summaries (dataset rows etc.)
    provenance: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_y < 1:
            raise ValueError("problem dimensions must be >= 1")

    def ll_objective(self, x: Vec):
        """``g(x, .)`` and its y-gradient as closures over a fixed ``x``."""

        def obj(y):
            return self.eval_g(x, y)

        def grad(y):
            return self.grad_g(x, y)[1]

        return obj, grad

    def penalized_objective(self, x: Vec, gamma: float):
        """``f(x, .) / gamma + g(x, .)`` and its y-gradient."""
        inv = 1.0 / gamma

        def obj(y):
            return inv * self.eval_f(x, y) + self.eval_g(x, y)

        def grad(y):
            return inv * self.grad_f(x, y)[1] + self.grad_g(x, y)[1]

        return obj, grad


def _vec(a) -> Vec:
    return np.atleast_1d(np.asarray(a, dtype=float))


# ---------------------------------------------------------------------------
# Example 1: f = x^2 + 10 y, g = (y - x + 1)^2


def make_example1(lf0: float = 10.0) -> BilevelProblem:
    """Linear-in-y upper level where dropping the value-function term flips the
    descent direction on ``(-5, 0)``."""

    def f(x, y):
        return float(x[0] ** 2 + lf0 * y[0])

    def g(x, y):
        return float((y[0] - x[0] + 1.0) ** 2)

    def df(x, y):
        return np.array([2.0 * x[0]]), np.array([lf0])

    def dg(x, y):
        r = 2.0 * (y[0] - x[0] + 1.0)
        return np.array([-r]), np.array([r])

    cf = ClosedForm(
        y_g_star=lambda x: _vec(x) - 1.0,
        y_gamma_star=lambda x, gamma: _vec(x) - 1.0 - lf0 / (2.0 * gamma),
        grad_F_gamma=lambda x, gamma: 2.0 * _vec(x) + lf0,
    )
    return BilevelProblem(
        name="example1", dim_x=1, dim_y=1, eval_f=f, eval_g=g, grad_f=df, grad_g=dg,
        smooth_f=0.0, smooth_g=2.0, closed_form=cf,
    )


# ---------------------------------------------------------------------------
# Example 3: narrow oscillating bump around y = x

_BUMP_WIDTH = 0.005
_BUMP_AMP = 10.0
_BUMP_FREQ = 100.0


def _ex3_f(u: float) -> float:
    bump = math.exp(-u * u / (2 * _BUMP_WIDTH**2))
    return (math.sin(u) + 2.0) * u * u + _BUMP_AMP * bump * math.sin(_BUMP_FREQ * u)


def _ex3_df(u: float) -> float:
    bump = math.exp(-u * u / (2 * _BUMP_WIDTH**2))
    smooth = math.cos(u) * u * u + 2.0 * u * (math.sin(u) + 2.0)
    osc = -u / _BUMP_WIDTH**2 * math.sin(_BUMP_FREQ * u) + _BUMP_FREQ * math.cos(_BUMP_FREQ * u)
    return smooth + _BUMP_AMP * bump * osc


def make_example3() -> BilevelProblem:
    """Upper level with a steep bump at the lower-level solution ``y = x``.

    Both objectives depend on ``(x, y)`` only through ``u = y - x``.
    """

    def f(x, y):
        return _ex3_f(y[0] - x[0])

    def g(x, y):
        return float((y[0] - x[0]) ** 2)

    def df(x, y):
        d = _ex3_df(y[0] - x[0])
        return np.array([-d]), np.array([d])

    def dg(x, y):
        r = 2.0 * (y[0] - x[0])
        return np.array([-r]), np.array([r])

    # max |f''| over the bump is about 2.88e5
    return BilevelProblem(
        name="example3", dim_x=1, dim_y=1, eval_f=f, eval_g=g, grad_f=df, grad_g=dg,
        smooth_f=3.0e5, smooth_g=2.0, closed_form=ClosedForm(y_g_star=_vec),
    )


# ---------------------------------------------------------------------------
# Toy PEFT: conv(kernel 2, stride 2) + softmax, DPO upper level, SFT lower level

SFT_X1 = (1.0, 1.0, 0.5, 0.5)
SFT_X1_ALT = (1.0, 0.5, 0.0, 0.5)
DPO_X2_PREFERRED = (1.0, 0.5, 0.5, 0.5)
DPO_X2_REJECTED = (0.5, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class DpoPair:
    preferred: tuple[float, ...]
    rejected: tuple[float, ...]
    preferred_label: int = 1
    rejected_label: int = 0


@dataclass(frozen=True)
class ToyPeftSpec:
    sft_dataset: tuple[tuple[tuple[float, ...], int], ...]
    dpo_dataset: tuple[DpoPair, ...]
    beta: float = 1.0
    reg_weight: float = 0.01
    ref_params: tuple[float, float] = (-5.34, -9.94)

    def __post_init__(self):
        if not self.sft_dataset:
            raise ValueError("SFT dataset is empty")
        if not self.dpo_dataset:
            raise ValueError("DPO dataset is empty")
        for feats, label in self.sft_dataset:
            _check_features(feats)
            if label not in (0, 1):
                raise ValueError(f"SFT label must be 0 or 1, got {label}")
        for pair in self.dpo_dataset:
            _check_features(pair.preferred)
            _check_features(pair.rejected)
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.reg_weight >= 0:
            raise ValueError(f"reg_weight must be non-negative, got {self.reg_weight}")


def _check_features(feats):
    if len(feats) != 4:
        raise ValueError(f"feature vectors must have length 4, got {len(feats)}")
    if not all(math.isfinite(v) for v in feats):
        raise ValueError("feature vectors must be finite")


def default_toy_spec(include_alt_sft: bool = False) -> ToyPeftSpec:
    """Built-in datasets: one SFT record and one DPO triple.

    ``include_alt_sft`` adds the second ``X1`` row (label 1) to the SFT set.
    """
    sft = [(SFT_X1, 0)]
    if include_alt_sft:
        sft.append((SFT_X1_ALT, 1))
    return ToyPeftSpec(sft_dataset=tuple(sft), dpo_dataset=(DpoPair(DPO_X2_PREFERRED, DPO_X2_REJECTED),))


def load_toy_spec(path: Optional[str] = None, *, include_alt_sft: bool = False, **overrides) -> ToyPeftSpec:
    """Read a toy dataset file, falling back to the built-in defaults.

    Format, one record per line (``#`` starts a comment)::

        sft,f1,f2,f3,f4,label
        dpo,w1,w2,w3,w4,l1,l2,l3,l4

    DPO records take the preferred label 1 and rejected label 0. ``overrides``
    are passed through to :class:`ToyPeftSpec` (``beta``, ``reg_weight``,
    ``ref_params``).
    """
    if path is None or not os.path.exists(path):
        if path is not None:
            logger.warning("toy dataset %s not found; using built-in defaults", path)
        base = default_toy_spec(include_alt_sft)
        return ToyPeftSpec(base.sft_dataset, base.dpo_dataset, **overrides)

    sft, dpo = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            kind, vals = parts[0].lower(), parts[1:]
            try:
                if kind == "sft":
                    if len(vals) != 5:
                        raise ValueError("expected 4 features and a label")
                    label = int(float(vals[4]))
                    sft.append((tuple(float(v) for v in vals[:4]), label))
                elif kind == "dpo":
                    if len(vals) != 8:
                        raise ValueError("expected 8 feature values")
                    nums = [float(v) for v in vals]
                    dpo.append(DpoPair(tuple(nums[:4]), tuple(nums[4:])))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return ToyPeftSpec(tuple(sft), tuple(dpo), **overrides)


def conv_softmax_forward(theta, features) -> tuple[float, float]:
    """Class probabilities of the two-weight conv model.

    The kernel ``(w0, w1)`` slides over the 4 features with stride 2, giving
    logits ``w0*z1 + w1*z2`` and ``w0*z3 + w1*z4``.
    """
    w0, w1 = float(theta[0]), float(theta[1])
    z = features
    p = stable_softmax([w0 * z[0] + w1 * z[1], w0 * z[2] + w1 * z[3]])
    return float(p[0]), float(p[1])


class _ConvBatch:
    """Vectorized log-probabilities for a fixed batch of (features, label)."""

    def __init__(self, feats: Sequence[Sequence[float]], labels: Sequence[int]):
        z = np.asarray(feats, dtype=float)
        self.a0 = z[:, :2]  # d logit0 / d theta
        self.a1 = z[:, 2:]  # d logit1 / d theta
        self.labels = np.asarray(labels, dtype=int)
        self.a_lab = np.where(self.labels[:, None] == 0, self.a0, self.a1)

    def logp(self, theta: np.ndarray) -> np.ndarray:
        l0, l1 = self.a0 @ theta, self.a1 @ theta
        lab = np.where(self.labels == 0, l0, l1)
        return lab - np.logaddexp(l0, l1)

    def logp_and_grad(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        l0, l1 = self.a0 @ theta, self.a1 @ theta
        lse = np.logaddexp(l0, l1)
        p0 = np.exp(l0 - lse)
        p1 = np.exp(l1 - lse)
        lab = np.where(self.labels == 0, l0, l1)
        grad = self.a_lab - p0[:, None] * self.a0 - p1[:, None] * self.a1
        return lab - lse, grad

    @property
    def dy(self) -> np.ndarray:
        """Per-sample ``d(logit0 - logit1)/dy``; bounds |d log p / dy|."""
        return self.a0[:, 1] - self.a1[:, 1]


def make_toy_peft(spec: Optional[ToyPeftSpec] = None) -> BilevelProblem:
    """Two-parameter PEFT problem: ``x`` and ``y`` are the two kernel weights.

    ``f`` is the mean DPO loss plus ``reg_weight * ||theta||^2``; ``g`` is the
    mean SFT negative log-likelihood plus the same regularizer. Each DPO
    response is scored by running the model on that response's feature row.
    """
    spec = spec or default_toy_spec()
    beta, reg = spec.beta, spec.reg_weight
    sft = _ConvBatch([s[0] for s in spec.sft_dataset], [s[1] for s in spec.sft_dataset])
    win = _ConvBatch([p.preferred for p in spec.dpo_dataset], [p.preferred_label for p in spec.dpo_dataset])
    lose = _ConvBatch([p.rejected for p in spec.dpo_dataset], [p.rejected_label for p in spec.dpo_dataset])
    ref = np.asarray(spec.ref_params, dtype=float)
    ref_margin = win.logp(ref) - lose.logp(ref)

    def theta_of(x, y):
        return np.array([x[0], y[0]], dtype=float)

    def margin(theta):
        return beta * (win.logp(theta) - lose.logp(theta) - ref_margin)

    def f(x, y):
        th = theta_of(x, y)
        q = margin(th)
        dpo = -np.mean([log_sigmoid(v) for v in q])
        return float(dpo + reg * th @ th)

    def df(x, y):
        th = theta_of(x, y)
        lw, gw = win.logp_and_grad(th)
        ll, gl = lose.logp_and_grad(th)
        q = beta * (lw - ll - ref_margin)
        weight = np.array([1.0 - sigmoid(v) for v in q])
        grad = -(weight[:, None] * beta * (gw - gl)).mean(axis=0) + 2.0 * reg * th
        return grad[:1], grad[1:]

    def g(x, y):
        th = theta_of(x, y)
        return float(-sft.logp(th).mean() + reg * th @ th)

    def dg(x, y):
        th = theta_of(x, y)
        _, gr = sft.logp_and_grad(th)
        grad = -gr.mean(axis=0) + 2.0 * reg * th
        return grad[:1], grad[1:]

    # |d^2 log p / dy^2| <= dy^2 / 4 and |dq/dy| <= beta (|dy_w| + |dy_l|)
    dw, dl = np.abs(win.dy), np.abs(lose.dy)
    smooth_f = float(np.mean(0.25 * beta**2 * (dw + dl) ** 2 + 0.25 * beta * (dw**2 + dl**2))) + 2 * reg
    smooth_g = float(np.mean(0.25 * sft.dy**2)) + 2 * reg

    rows = [f"sft,{','.join(repr(v) for v in s[0])},{s[1]}" for s in spec.sft_dataset]
    rows += [f"dpo,{','.join(repr(v) for v in p.preferred + p.rejected)}" for p in spec.dpo_dataset]
    return BilevelProblem(
        name="toy_peft", dim_x=1, dim_y=1, eval_f=f, eval_g=g, grad_f=df, grad_g=dg,
        smooth_f=smooth_f, smooth_g=max(smooth_g, 1e-12), provenance=tuple(rows),
    )


def sft_nll(theta, spec: ToyPeftSpec) -> float:
    """Unregularized mean SFT negative log-likelihood (for inspection)."""
    total = 0.0
    for feats, label in spec.sft_dataset:
        total -= math.log(conv_softmax_forward(theta, feats)[label])
    return total / len(spec.sft_dataset)


def dpo_loss(theta, spec: ToyPeftSpec) -> float:
    """Unregularized mean DPO loss computed through ``conv_softmax_forward``."""
    total = 0.0
    for pair in spec.dpo_dataset:
        lw = math.log(conv_softmax_forward(theta, pair.preferred)[pair.preferred_label])
        ll = math.log(conv_softmax_forward(theta, pair.rejected)[pair.rejected_label])
        rw = math.log(conv_softmax_forward(spec.ref_params, pair.preferred)[pair.preferred_label])
        rl = math.log(conv_softmax_forward(spec.ref_params, pair.rejected)[pair.rejected_label])
        total -= log_sigmoid(spec.beta * ((lw - rw) - (ll - rl)))
    return total / len(spec.dpo_dataset)


BUILTIN = {
    "example1": make_example1,
    "example3": make_example3,
    "toy_peft": make_toy_peft,
}
