import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pbgdfree.numerics import GDSettings, finite_diff_grad, gd_minimize
from pbgdfree.problems import (
    BUILTIN,
    DPO_X2_PREFERRED,
    DPO_X2_REJECTED,
    SFT_X1,
    DpoPair,
    ToyPeftSpec,
    conv_softmax_forward,
    default_toy_spec,
    dpo_loss,
    load_toy_spec,
    make_example1,
    make_example3,
    make_toy_peft,
    sft_nll,
)

LN2 = math.log(2)


def grads_match(analytic, numeric):
    for a, n in zip(analytic, numeric):
        if abs(n) < 1e-2:
            if abs(a - n) > 1e-7:
                return False
        elif abs(a - n) > 1e-5 * abs(n):
            return False
    return True


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_gradients_match_finite_differences(name):
    p = BUILTIN[name]()
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.uniform(-10, 10, p.dim_x)
        y = rng.uniform(-10, 10, p.dim_y)
        for ev, gr in ((p.eval_f, p.grad_f), (p.eval_g, p.grad_g)):
            gx, gy = gr(x, y)
            fx = finite_diff_grad(lambda z: ev(z, y), x)
            fy = finite_diff_grad(lambda z: ev(x, z), y)
            assert grads_match(np.r_[gx, gy], np.r_[fx, fy]), (name, x, y)


# -- Example 1 ---------------------------------------------------------------

def test_example1_closed_forms():
    p = make_example1()
    cf = p.closed_form
    assert cf.grad_F_gamma(np.array([0.0]), 10.0)[0] == 10.0
    yg = cf.y_gamma_star(np.array([0.0]), 10.0)
    assert yg[0] == -1.5
    assert p.eval_f(np.array([0.0]), yg) == -15.0
    assert p.grad_f(np.array([0.0]), yg)[0][0] == 0.0


@pytest.mark.parametrize("gamma", [1.0, 10.0, 100.0])
def test_example1_numeric_inner_solves_match(gamma):
    p = make_example1()
    for xv in (-3.0, 0.0, 2.5):
        x = np.array([xv])
        obj, grad = p.ll_objective(x)
        r = gd_minimize(obj, grad, [0.0], GDSettings(0.25, 1e-12))
        assert abs(r.minimizer[0] - p.closed_form.y_g_star(x)[0]) <= 1e-8
        obj, grad = p.penalized_objective(x, gamma)
        r = gd_minimize(obj, grad, [0.0], GDSettings(0.25, 1e-12))
        assert abs(r.minimizer[0] - p.closed_form.y_gamma_star(x, gamma)[0]) <= 1e-8


@pytest.mark.parametrize("name", ["example1", "example3"])
def test_closed_form_is_global_ll_minimizer(name):
    p = BUILTIN[name]()
    rng = np.random.default_rng(1)
    for x in rng.uniform(-10, 10, 20):
        x = np.array([x])
        ys = p.closed_form.y_g_star(x)
        best = p.eval_g(x, ys)
        for y in rng.uniform(-20, 20, 50):
            assert best <= p.eval_g(x, np.array([y]))


# -- Example 3 ---------------------------------------------------------------

def test_example3_values():
    p = make_example3()
    assert p.grad_f(np.array([0.0]), np.array([0.0]))[1][0] == pytest.approx(1000.0)
    assert p.eval_g(np.array([3.0]), np.array([3.0])) == 0.0
    assert p.closed_form.y_g_star(np.array([3.0]))[0] == 3.0
    assert p.eval_f(np.array([0.0]), np.array([1.0])) == pytest.approx(math.sin(1) + 2, rel=1e-12)


def test_example3_smoothness_constant_covers_curvature():
    p = make_example3()
    u = np.linspace(-0.05, 0.05, 20001)
    d = np.array([p.grad_f(np.array([0.0]), np.array([v]))[1][0] for v in u])
    curv = np.max(np.abs(np.diff(d) / np.diff(u)))
    assert 2.5e5 < curv <= p.smooth_f


# -- toy PEFT ----------------------------------------------------------------

def test_conv_softmax_examples():
    assert conv_softmax_forward((0, 0), (3, 1, 4, 1)) == (0.5, 0.5)
    p0, p1 = conv_softmax_forward((1, 1), SFT_X1)
    assert (p0, p1) == pytest.approx((0.731059, 0.268941), abs=1e-6)
    p0, p1 = conv_softmax_forward((1, -1), (1.0, 0.5, 0.0, 0.5))
    assert (p0, p1) == pytest.approx((0.731059, 0.268941), abs=1e-6)
    # direct arithmetic oracle
    assert p0 == pytest.approx(1 / (1 + math.exp(-1.0)), abs=1e-15)


@settings(max_examples=100)
@given(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_conv_softmax_normalized(theta, feats):
    p0, p1 = conv_softmax_forward(theta, feats)
    assert abs(p0 + p1 - 1) <= 1e-12
    assert 0 <= p0 <= 1 and 0 <= p1 <= 1


def test_default_spec_is_table3():
    s = default_toy_spec()
    assert s.sft_dataset == ((SFT_X1, 0),)
    assert s.dpo_dataset == (DpoPair(DPO_X2_PREFERRED, DPO_X2_REJECTED),)
    assert (s.beta, s.reg_weight, s.ref_params) == (1.0, 0.01, (-5.34, -9.94))
    assert len(default_toy_spec(include_alt_sft=True).sft_dataset) == 2


def test_toy_losses_at_reference_and_origin():
    s = default_toy_spec()
    p = make_toy_peft(s)
    ref = np.array(s.ref_params)
    assert dpo_loss(ref, s) == pytest.approx(LN2, abs=1e-12)
    assert sft_nll((0.0, 0.0), s) == pytest.approx(0.693147, abs=1e-6)
    reg = s.reg_weight * float(ref @ ref)
    assert p.eval_f(ref[:1], ref[1:]) == pytest.approx(LN2 + reg, abs=1e-12)
    assert p.eval_g(np.zeros(1), np.zeros(1)) == pytest.approx(LN2, abs=1e-12)


def test_toy_problem_matches_loop_oracles():
    s = load_toy_spec(None, include_alt_sft=True, beta=0.7)
    p = make_toy_peft(s)
    rng = np.random.default_rng(3)
    for th in rng.uniform(-10, 10, (20, 2)):
        reg = s.reg_weight * float(th @ th)
        assert p.eval_f(th[:1], th[1:]) == pytest.approx(dpo_loss(th, s) + reg, rel=1e-12, abs=1e-12)
        assert p.eval_g(th[:1], th[1:]) == pytest.approx(sft_nll(th, s) + reg, rel=1e-12, abs=1e-12)


def test_toy_losses_nonnegative():
    s = ToyPeftSpec(sft_dataset=((SFT_X1, 1), ((0.3, -1, 2, 0.5), 0)),
                    dpo_dataset=(DpoPair((1, 2, 0, 1), (0, 1, 1, 0)),), reg_weight=0.0)
    rng = np.random.default_rng(4)
    for th in rng.uniform(-20, 20, (50, 2)):
        assert sft_nll(th, s) >= 0 and dpo_loss(th, s) >= 0


@pytest.mark.parametrize("kw, msg", [
    (dict(sft_dataset=()), "SFT dataset is empty"),
    (dict(dpo_dataset=()), "DPO dataset is empty"),
    (dict(sft_dataset=(((1, 2, 3), 0),)), "length 4"),
    (dict(sft_dataset=((SFT_X1, 2),)), "label"),
    (dict(beta=0.0), "beta"),
    (dict(reg_weight=-1.0), "reg_weight"),
])
def test_spec_validation(kw, msg):
    base = dict(sft_dataset=((SFT_X1, 0),), dpo_dataset=(DpoPair(DPO_X2_PREFERRED, DPO_X2_REJECTED),))
    base.update(kw)
    with pytest.raises(ValueError, match=msg):
        ToyPeftSpec(**base)


def test_load_toy_spec_file(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("# comment\nsft,1,1,0.5,0.5,0\n\nsft,1,0.5,0,0.5,1  # alt\ndpo,1,0.5,0.5,0.5,0.5,1,1,1\n")
    s = load_toy_spec(str(f))
    assert len(s.sft_dataset) == 2 and s.sft_dataset[1] == ((1.0, 0.5, 0.0, 0.5), 1)
    assert make_toy_peft(s).provenance[0] == "sft,1.0,1.0,0.5,0.5,0"


def test_load_toy_spec_errors(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("sft,1,1,0.5,0.5,0\nfoo,1,2\n")
    with pytest.raises(ValueError, match=r"d.txt:2"):
        load_toy_spec(str(f))
    f.write_text("sft,1,1,0.5,0\n")
    with pytest.raises(ValueError, match=r"d.txt:1"):
        load_toy_spec(str(f))


def test_missing_dataset_falls_back(tmp_path, caplog):
    s = load_toy_spec(str(tmp_path / "nope.txt"))
    assert s == default_toy_spec()
    assert "not found" in caplog.text
