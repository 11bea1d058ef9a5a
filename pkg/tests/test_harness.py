import csv
import os

import pytest
from hypothesis import given, strategies as st

from pbgdfree import harness
from pbgdfree.cli import main
from pbgdfree.harness import ConfigError, build_experiment, fmt, parse_config_text

EX1 = "problem.name = example1\nsolver.name = pbgd_free\n"


def write(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_parse_types_and_comments():
    v = parse_config_text("# header\nproblem.name = example1  # trailing\nsolver.x0 = 1, 2\n"
                          "solver.inner_k = 3\nsolver.warm_start = no\n\n")
    assert v == {"problem.name": "example1", "solver.x0": (1.0, 2.0), "solver.inner_k": 3, "solver.warm_start": False}


@pytest.mark.parametrize("text, key", [
    ("solver.eta = fast", "solver.eta"),
    ("solver.inner_k = 1.5", "solver.inner_k"),
    ("solver.bogus = 1", "solver.bogus"),
    ("solver.eta = nan", "solver.eta"),
    ("solver.eta = 1\nsolver.eta = 2", "solver.eta"),
])
def test_parse_errors_name_key(text, key):
    with pytest.raises(ConfigError) as ei:
        parse_config_text(text)
    assert key in str(ei.value) and ei.value.key == key


def test_parse_error_names_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("problem.name = example1\nno equals sign\n")


def test_build_errors():
    with pytest.raises(ConfigError, match="problem.name"):
        build_experiment({})
    with pytest.raises(ConfigError, match="solver.name"):
        build_experiment({"problem.name": "example1", "solver.name": "sgd"})
    with pytest.raises(ConfigError, match="solver.gamma"):
        build_experiment({"problem.name": "example1", "solver.gamma": -1.0})
    with pytest.raises(ConfigError, match="problem.beta"):
        build_experiment({"problem.name": "example1", "problem.beta": 1.0})
    with pytest.raises(ConfigError, match="problem.dataset"):
        build_experiment({"problem.name": "toy_peft", "problem.dataset": "/nonexistent/file.txt"})
    with pytest.raises(ConfigError, match="flatness_alpha"):
        build_experiment({"problem.name": "example1", "diagnostics.flatness_c": 1.0})
    with pytest.raises(ConfigError, match="gap_gammas"):
        build_experiment({"problem.name": "toy_peft", "diagnostics.gap_gammas": (1.0,)})


def test_problem_defaults():
    cfg, _ = build_experiment({"problem.name": "toy_peft"})
    s = cfg.solver
    assert (s.gamma, s.eta, s.eta_gamma, s.outer_t, s.x0, s.y0) == (15.0, 0.01, 0.01, 5000, (-5.34,), (-9.94,))
    cfg, _ = build_experiment({"problem.name": "example1"})
    assert (cfg.solver.gamma, cfg.solver.eta, cfg.solver.eta_gamma, cfg.solver.inner_k) == (10.0, 0.1, 0.25, 1)
    cfg, p = build_experiment({"problem.name": "example3", "solver.gamma": 15.0})
    assert cfg.solver.eta_gamma == pytest.approx(1 / (2 + p.smooth_f / 15))


def test_fmt():
    assert fmt(None) == "" and fmt(3) == "3" and fmt(0.1) == "0.10000000000000001"
    assert fmt(True) == "1"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(v):
    assert float(fmt(v)) == v


def test_run_minimal_example1(tmp_path):
    cfg = write(tmp_path, EX1 + "solver.outer_t = 100\nsolver.record_every = 10\n")
    out = tmp_path / "o"
    assert main(["--out", str(out), "run", cfg]) == 0
    r = rows(out / "trajectory.csv")
    assert r[0] == ["t", "x", "y_gamma", "y_g", "f_val", "g_gap", "update_norm", "ll_grad_evals", "wall_nanos"]
    assert len(r) - 1 == 100 // 10 + 1
    assert r[1][3] == "" and r[1][6] == ""
    summary = (out / "summary").read_text()
    for key in ("final_x", "final_grad_x_f", "final_grad_y_penalized", "ll_grad_evals", "wall_seconds"):
        assert key in summary


def test_run_with_diagnostics(tmp_path):
    cfg = write(tmp_path, EX1 + "solver.outer_t = 20\nsolver.x0 = 2\ndiagnostics.kkt = true\n"
                "diagnostics.flatness_c = 1\ndiagnostics.flatness_alpha = 1.5\ndiagnostics.gap_gammas = 5, 10\n"
                f"output.dir = {tmp_path / 'o'}\n")
    assert main(["run", cfg]) == 0
    assert rows(tmp_path / "o" / "gaps.csv")[0] == harness.GAP_HEADER
    assert len(rows(tmp_path / "o" / "gaps.csv")) == 3
    assert rows(tmp_path / "o" / "flatness.csv")[0] == ["x", "delta_x", "f_gap", "dist"]
    assert rows(tmp_path / "o" / "kkt.csv")[0] == harness.KKT_HEADER


def test_run_toy_with_dataset_echoes_rows(tmp_path):
    (tmp_path / "d.txt").write_text("sft,1,1,0.5,0.5,0\nsft,1,0.5,0,0.5,1\ndpo,1,0.5,0.5,0.5,0.5,1,1,1\n")
    cfg = write(tmp_path, "problem.name = toy_peft\nproblem.dataset = d.txt\nsolver.outer_t = 10\n")
    assert main(["--out", str(tmp_path / "o"), "run", cfg]) == 0
    summary = (tmp_path / "o" / "summary").read_text()
    assert "dataset.row = sft,1.0,0.5,0.0,0.5,1" in summary
    assert summary.count("dataset.row") == 3


def test_run_malformed_number(tmp_path, capsys):
    cfg = write(tmp_path, EX1 + "solver.eta = 0.1.2\n")
    assert main(["--out", str(tmp_path / "o"), "run", cfg]) == 2
    assert "solver.eta" in capsys.readouterr().err


def test_run_missing_config(tmp_path):
    assert main(["run", str(tmp_path / "nope.cfg")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_divergence_exit(tmp_path, capsys):
    cfg = write(tmp_path, EX1 + "solver.eta = 5\nsolver.x0 = 2\nsolver.outer_t = 5000\n")
    assert main(["--out", str(tmp_path / "o"), "run", cfg]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_run_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write(tmp_path, EX1 + "solver.outer_t = 5\n")
    assert main(["--out", str(blocker / "sub"), "run", cfg]) == 5


def test_sweep_gamma_toy(tmp_path):
    cfg = write(tmp_path, "problem.name = toy_peft\nsolver.outer_t = 50\n")
    out = tmp_path / "sw"
    assert main(["--out", str(out), "sweep", cfg, "--param", "gamma", "--values", "1,5,10,15,30"]) == 0
    subdirs = sorted(d for d in os.listdir(out) if os.path.isdir(out / d))
    assert len(subdirs) == 5
    r = rows(out / "sweep_summary.csv")
    assert r[0] == harness.SWEEP_HEADER and len(r) == 6
    assert all(row[1] == "ok" and row[4] and row[5] for row in r[1:])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_isolates_divergent_run(tmp_path):
    cfg = write(tmp_path, EX1 + "solver.x0 = 2\nsolver.outer_t = 3000\nsolver.record_every = 100\n")
    out = tmp_path / "sw"
    assert main(["--out", str(out), "sweep", cfg, "--param", "solver.eta", "--values", "0.1,5,0.01"]) == 3
    r = {row[0]: row for row in rows(out / "sweep_summary.csv")[1:]}
    assert r["5"][1] == "diverged" and r["0.1"][1] == "ok" and r["0.01"][1] == "ok"
    assert (out / "eta=0.01" / "trajectory.csv").exists()


def test_sweep_empty_values(tmp_path):
    cfg = write(tmp_path, EX1)
    out = tmp_path / "sw"
    assert main(["--out", str(out), "sweep", cfg, "--param", "gamma", "--values", ","]) == 2
    assert not out.exists()
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "gamma", [], str(out))


def test_sweep_rejects_non_numeric_key(tmp_path):
    cfg = write(tmp_path, EX1)
    assert main(["--out", str(tmp_path / "sw"), "sweep", cfg, "--param", "problem.name", "--values", "a"]) == 2
    assert main(["--out", str(tmp_path / "sw"), "sweep", cfg, "--param", "warm_start", "--values", "1"]) == 2


def test_seedless_flag():
    with pytest.raises(SystemExit) as ei:
        main(["--seedless=1", "reproduce", "example1"])
    assert ei.value.code == 2


def test_reproduce_example1_cli(tmp_path, capsys):
    assert main(["--seedless", "--out", str(tmp_path), "reproduce", "example1"]) == 0
    lines = (tmp_path / "example1" / "assertions").read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["criterion_1", "criterion_2"]
    d = rows(tmp_path / "example1" / "directions.csv")
    assert d[0] == ["x", "grad_F_gamma", "grad_x_f", "inner_product"]
    assert all(float(row[3]) < 0 for row in d[1:])
    assert "criterion_1 PASS" in capsys.readouterr().out
