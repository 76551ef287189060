import csv
import json
from pathlib import Path

import numpy as np
import pytest

from overflow_ppo.cli import main
from overflow_ppo.network import init_params
from overflow_ppo.oracle import exact_policy_eval
from overflow_ppo.policy import no_overflow
from overflow_ppo.presets import load_preset

GOLDENS = json.loads((Path(__file__).parent / "goldens" / "simulate.json").read_text())


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def empty_twopool(tmp_path):
    cfg = load_preset("twopool-midnight")
    path = tmp_path / "empty.json"
    cfg.replace(arrivals=np.zeros((2, 1)), name="empty").save(path)
    return path


# -- simulate / evaluate -------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(GOLDENS))
def test_simulate_goldens(name, capsys):
    code, out, _ = run(capsys, *GOLDENS[name]["argv"])
    assert code == 0
    got = json.loads(out)
    want = GOLDENS[name]["summary"]
    assert got["policy"] == want["policy"] and got["days"] == want["days"]
    for k in ("mean_daily_cost", "ci_half_width", "overflow_rate"):
        assert got[k] == pytest.approx(want[k], rel=1e-12), k


def test_simulate_tenpool_empirical(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "tenpool", "--policy", "empirical", "--days", "2000", "--seed", "1")
    row = json.loads(out)
    assert code == 0 and row["mean_daily_cost"] == pytest.approx(390, rel=0.10)
    assert 0 < row["ci_half_width"] < 0.1 * row["mean_daily_cost"]


def test_simulate_writes_identical_files(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "simulate", "--preset", "twopool-8epoch", "--days", "30", "--seed", "4", "--out", tmp_path / d)[0] == 0
    for f in ("series.csv", "summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = read_csv(tmp_path / "a" / "series.csv")
    assert len(rows) == 30 * 8
    assert list(rows[0]) == ["day", "epoch", "x0", "x1", "q0", "q1", "overflow", "cost"]


def test_simulate_empty_arrivals(capsys, tmp_path, empty_twopool):
    code, out, _ = run(capsys, "simulate", "--config", empty_twopool, "--policy", "complete_overflow",
                       "--days", "40", "--out", tmp_path / "o")
    assert code == 0 and json.loads(out)["mean_daily_cost"] == 0.0
    rows = read_csv(tmp_path / "o" / "series.csv")
    assert all(float(r["cost"]) == 0 and int(r["x0"]) == 0 and int(r["x1"]) == 0 for r in rows)


def test_invalid_config_exit_2(capsys, tmp_path):
    d = load_preset("twopool-midnight").to_dict()
    d["servers"] = [0, 32]
    d["holding_cost"] = [-1.0, 24.0]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    code, out, err = run(capsys, "simulate", "--config", path, "--days", "30")
    assert code == 2 and out == ""
    diag = json.loads(err)
    assert diag["error"] == "config" and len(diag["violations"]) == 2
    code, _, err = run(capsys, "simulate", "--config", tmp_path / "missing.json")
    assert code == 2 and "cannot load" in err


def test_evaluate_exact_and_errors(capsys):
    code, out, _ = run(capsys, "evaluate", "--preset", "twopool-midnight", "--policy", "no_overflow", "--days", "40",
                       "--exact", "--truncation", "80")
    row = json.loads(out)
    want = exact_policy_eval(no_overflow(), load_preset("twopool-midnight"), X=80)[0]
    assert code == 0 and row["exact_cost"] == pytest.approx(want, rel=1e-9)
    assert run(capsys, "evaluate", "--preset", "tenpool", "--policy", "empirical", "--days", "40", "--exact")[0] == 2
    assert run(capsys, "evaluate", "--preset", "tenpool", "--policy", "nope.json", "--days", "40")[0] == 2
    assert run(capsys, "evaluate", "--preset", "tenpool", "--policy", "empirical", "--days", "10")[0] == 2


# -- compare -------------------------------------------------------------------------------


def test_compare_marks_minimum(capsys, tmp_path):
    code, out, _ = run(capsys, "compare", "--preset", "twopool-midnight", "--days", "100", "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert [r["policy"] for r in rows] == ["no_overflow", "complete_overflow", "midnight", "empirical"]
    costs = [float(r["mean_daily_cost"]) for r in rows]
    assert [int(r["best"]) for r in rows] == [int(c == min(costs)) for c in costs]
    assert read_csv(tmp_path / "compare.csv") == rows


def test_compare_tenpool_empirical_best(capsys):
    code, out, _ = run(capsys, "compare", "--preset", "tenpool", "--days", "2000",
                       "--policies", "complete_overflow", "midnight", "empirical")
    rows = {r["policy"]: r for r in csv.DictReader(out.splitlines())}
    assert code == 0 and list(rows) == ["complete_overflow", "midnight", "empirical"]
    assert rows["empirical"]["best"] == "1"


def test_compare_single_and_weights(capsys, tmp_path):
    cfg = load_preset("twopool-midnight")
    init_params("partially_shared", cfg.J, cfg.m, (3,)).save(tmp_path / "w.json")
    code, out, _ = run(capsys, "compare", "--preset", "twopool-midnight", "--days", "40",
                       "--policies", tmp_path / "w.json")
    rows = list(csv.DictReader(out.splitlines()))
    assert code == 0 and len(rows) == 1 and rows[0]["best"] == "1"
    assert run(capsys, "compare", "--preset", "twopool-midnight", "--policies", tmp_path / "none.json")[0] == 2


# -- train ---------------------------------------------------------------------------------


TINY = ("--days", "20", "--actors", "1", "--epochs", "1", "--eval-days", "20", "--hidden", "3", "--quiet")


def test_train_zero_iterations(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--preset", "twopool-midnight", "--iterations", "0", *TINY,
                       "--out", tmp_path)
    summary = json.loads(out)
    assert code == 0 and summary["iterations"] == 0 and "mean_daily_cost" in summary
    assert "exact_cost" in summary
    assert json.loads((tmp_path / "final.json").read_text()) == summary


def test_train_resume_matches_uninterrupted(capsys, tmp_path):
    args = ("train", "--preset", "twopool-8epoch", *TINY, "--seed", "2")
    assert run(capsys, *args, "--iterations", "2", "--out", tmp_path / "full")[0] == 0
    assert run(capsys, *args, "--iterations", "1", "--out", tmp_path / "part")[0] == 0
    assert run(capsys, *args, "--iterations", "2", "--out", tmp_path / "part", "--resume")[0] == 0
    full = (tmp_path / "full" / "policy.json").read_text()
    assert full == (tmp_path / "part" / "policy.json").read_text()
    assert (tmp_path / "full" / "final.json").read_text() == (tmp_path / "part" / "final.json").read_text()
    cfg = json.loads((tmp_path / "full" / "train_config.json").read_text())
    assert cfg["days_per_actor"] == 20 and cfg["hidden"] == [3]


def test_train_rejects_bad_settings(capsys):
    code, _, err = run(capsys, "train", "--preset", "twopool-8epoch", "--actors", "0", "--quiet")
    assert code == 2 and "actors" in err


# -- oracle --------------------------------------------------------------------------------


def test_oracle_tolerance_semantics(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle", "--truncation", "80", "--tol", "1e-9", "--out", tmp_path)
    tight = json.loads(out)["gamma"]
    assert code == 0 and tight == pytest.approx(46.941, abs=1e-3)
    loose = json.loads(run(capsys, "oracle", "--truncation", "80", "--tol", "1e-3")[1])["gamma"]
    assert abs(loose - tight) <= 1e-3
    rows = read_csv(tmp_path / "oracle_policy.csv")
    assert len(rows) == 81 * 81 and rows[0]["v"] == "0.0"


def test_oracle_errors_and_empty(capsys, empty_twopool):
    assert json.loads(run(capsys, "oracle", "--config", empty_twopool, "--truncation", "60")[1])["gamma"] == pytest.approx(0.0, abs=1e-9)
    code, _, err = run(capsys, "oracle", "--preset", "tenpool")
    assert code == 2 and json.loads(err)["error"] == "config"
    code, _, err = run(capsys, "oracle", "--truncation", "60", "--max-iter", "3")
    assert code == 3 and json.loads(err)["error"] == "numerical"


# -- inspect-policy ------------------------------------------------------------------------


def test_inspect_zero_weights_uniform(capsys, tmp_path):
    out = tmp_path / "grid.csv"
    code, _, _ = run(capsys, "inspect-policy", "--preset", "twopool-midnight", "--weights", "zero", "--out", out)
    rows = read_csv(out)
    assert code == 0 and len(rows) == 2500
    for r in rows:
        x0, x1 = int(r["x0"]), int(r["x1"])
        assert float(r["kappa_0_1"]) == (0.5 if x1 < 32 else 0.0)  # uniform over {wait, idle pool}
        assert float(r["kappa_1_0"]) == (0.5 if x0 < 28 else 0.0)


def test_inspect_full_target_column_zero(capsys, tmp_path):
    out = tmp_path / "g.csv"
    code, _, _ = run(capsys, "inspect-policy", "--preset", "tenpool", "--weights", "zero", "--epoch", "3",
                     "--axes", "0", "5", "--grid", "30:40", "0:9", "--route", "0", "5", "--out", out)
    assert code == 0
    rows = read_csv(out)
    assert len(rows) == 110 and list(rows[0]) == ["x0", "x5", "kappa_0_5"]
    N5 = load_preset("tenpool").N[5]
    # the other pools stay at N, so the target pool is full everywhere on this slice
    assert N5 > 9 or all(float(r["kappa_0_5"]) == 0.0 for r in rows if int(r["x5"]) >= N5)


def test_inspect_grid_errors(capsys):
    base = ("inspect-policy", "--preset", "twopool-midnight", "--weights", "zero")
    assert run(capsys, *base, "--grid", "0:500", "0:10")[0] == 2
    assert run(capsys, *base, "--grid", "5:1", "0:10")[0] == 2
    assert run(capsys, *base, "--axes", "0", "0")[0] == 2
    assert run(capsys, *base, "--route", "0", "0")[0] == 2
