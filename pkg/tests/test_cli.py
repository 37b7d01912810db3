import csv
import json
import math
from types import SimpleNamespace

import pytest

from tndtmle.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_beta, resolve_sim_configs
from tndtmle.data import save_dataset
from tndtmle.exceptions import ConfigError
from tndtmle.simulation import SimConfig, read_metrics_csv, run_monte_carlo

from conftest import SATURATED, synthetic_dataset, table_dataset

SIM_TOML = """
[simulate]
seed = 7
reps = 3
n = 300
design = "biased_1_1"
setting = "{setting}"
beta_f = "log(0.7)"
estimators = ["TMLE", "nMLE"]
cv_folds = 3
"""


@pytest.fixture
def two_by_two(tmp_path):
    p = tmp_path / "t22.csv"
    save_dataset(table_dataset(SATURATED), p)
    return p


def _sim_args(**kw):
    base = dict(seed=None, reps=None, cross_fit=None, ci_level=None, estimators=None, setting=None,
                design=None, beta_f=None, n=None, full_grid=False)
    base.update(kw)
    return SimpleNamespace(**base)


def _simulate(tmp_path, name, setting="main_effects", extra=()):
    cfg = tmp_path / f"{name}.toml"
    cfg.write_text(SIM_TOML.format(setting=setting))
    out = tmp_path / f"{name}.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--threads", "1", *extra]) == EXIT_OK
    return out


def test_estimate_saturated(two_by_two, tmp_path):
    out = tmp_path / "r.json"
    assert main(["estimate", "--input", str(two_by_two), "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["tmle"]["beta"][0] == pytest.approx(math.log(6), abs=1e-6)
    assert rep["odds_ratios"][0]["or"] == pytest.approx(6, abs=1e-5)
    assert rep["tmle"]["converged"]


def test_estimate_with_comparators(two_by_two, capsys):
    assert main(["estimate", "--input", str(two_by_two), "--estimators", "TMLE,nMLE,nPLE"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    coefs = {c["method"]: c["coef"] for c in rep["comparators"]}
    assert coefs["nMLE"] == pytest.approx(math.log(6), abs=1e-8)
    assert coefs["nPLE"] == pytest.approx(math.log(6), abs=1e-8)


def test_estimate_null_effect(tmp_path, capsys):
    p = tmp_path / "null.csv"
    save_dataset(synthetic_dataset(n=3000, seed=3, beta=0.0, missing=0.0), p)
    cfg = tmp_path / "e.toml"
    cfg.write_text('[estimate]\ncv_folds = 5\n[basis]\nn_knots = 3\n')
    assert main(["estimate", "--input", str(p), "--config", str(cfg)]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    orr = rep["odds_ratios"][0]
    lo, hi = sorted(orr["ve_ci"])
    assert lo < 0 < hi
    assert abs(orr["ve_percent"]) < 25


def test_malformed_csv_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("delta,a,y,x1\n1,1,1,0.5\n1,1,maybe,0.2\n")
    assert main(["estimate", "--input", str(p)]) == EXIT_DATA
    assert "line 3" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["estimate"]) == EXIT_USAGE
    assert main(["estimate", "--input", str(tmp_path / "missing.csv")]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text("[simulate\nseed=")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_simulate_requires_seed_and_reps(tmp_path):
    out = tmp_path / "o.csv"
    assert main(["simulate", "--out", str(out), "--reps", "3"]) == EXIT_USAGE
    assert main(["simulate", "--out", str(out), "--seed", "1", "--reps", "0"]) == EXIT_USAGE
    assert not out.exists()


def test_parse_beta():
    assert parse_beta("log(0.7)") == pytest.approx(math.log(0.7))
    assert parse_beta("-0.25") == -0.25
    with pytest.raises(ConfigError):
        parse_beta("log(-1)")


def test_full_grid_expansion():
    configs = resolve_sim_configs(_sim_args(seed=1, full_grid=True), {})
    assert len(configs) == 108
    assert {c.n for c in configs} == {500, 1000, 2000, 3000}
    assert {c.design for c in configs} == {"biased_1_1", "biased_1_3", "all"}
    assert len({c.key for c in configs}) == 108


def test_flags_override_file():
    cfg = {"simulate": {"seed": 3, "reps": 10, "n": [2000, 3000], "setting": "splines"}}
    configs = resolve_sim_configs(_sim_args(reps=5, setting="interaction"), cfg)
    assert [c.n for c in configs] == [2000, 3000]
    assert all(c.reps == 5 and c.setting == "interaction" and c.seed == 3 for c in configs)
    with pytest.raises(ConfigError):
        resolve_sim_configs(_sim_args(seed=1), {"simulate": {"bogus": 1}})


def test_simulate_reproducible(tmp_path):
    a = _simulate(tmp_path, "a")
    b = _simulate(tmp_path, "b", extra=("--threads", "2"))
    assert a.read_bytes() == b.read_bytes()
    meta = json.loads(a.with_suffix(".json").read_text())["meta"]
    assert meta["scenarios"][0]["seed"] == 7


def test_embedded_config_reproduces(tmp_path):
    out = _simulate(tmp_path, "a")
    meta = json.loads(out.with_suffix(".json").read_text())["meta"]
    rows, _ = read_metrics_csv(out)
    for sc in meta["scenarios"]:
        sc["estimators"] = tuple(sc["estimators"])
        res = run_monte_carlo(SimConfig(**sc), workers=1)
        for r in res.metrics.rows:
            match = [x for x in rows if x["estimator"] == r.estimator]
            assert float(match[0]["bias"]) == r.bias or (math.isnan(r.bias) and match[0]["bias"] == "nan")


def test_summarize(tmp_path, capsys):
    a = _simulate(tmp_path, "a")
    b = _simulate(tmp_path, "b", setting="interaction")
    assert main(["summarize", str(a)]) == EXIT_OK
    assert capsys.readouterr().out == a.read_text()

    merged = tmp_path / "m.csv"
    assert main(["summarize", str(a), str(b), "--out", str(merged)]) == EXIT_OK
    rows, _ = read_metrics_csv(merged)
    keys = [(r["estimator"], r["setting"], r["design"], r["n"], r["beta_f"]) for r in rows]
    assert len(keys) == len(set(keys)) == 4

    assert main(["summarize", str(a), str(a)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "duplicate" in err and "TMLE" in err and "nMLE" in err


def test_summarize_schema_mismatch(tmp_path):
    a = _simulate(tmp_path, "a")
    other = tmp_path / "o.csv"
    with open(other, "w", newline="") as fh:
        csv.writer(fh).writerows([["estimator", "setting"], ["TMLE", "x"]])
    assert main(["summarize", str(a), str(other)]) == EXIT_DATA
