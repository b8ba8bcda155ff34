import io
import json
import os
from fractions import Fraction

import numpy as np
import pytest

from wplab import __version__, cli
from wplab import fields as F
from wplab import harness as H
from wplab.fields import ParameterError


def test_parse_config():
    cfg = H.parse_config("alpha = 1/2  # fractional\n\nR_list = 16, 32 64\nn=2\ndata_family = chirped\n")
    assert cfg == {"alpha": 0.5, "R_list": (16.0, 32.0, 64.0), "n": 2, "data_family": "chirped"}
    sc = H.sweep_from(cfg)
    assert sc.alpha == 0.5 and sc.R_list == (16.0, 32.0, 64.0) and sc.data_family == "chirped"


@pytest.mark.parametrize("text", ["bogus = 1", "alpha = 2\nalpha = 3", "just words", "n = 2.5", "p = 1/0"])
def test_parse_config_errors(text):
    with pytest.raises(H.ConfigError):
        H.parse_config(text)


@pytest.mark.parametrize("kw", [dict(R_list=(32, 16)), dict(R_list=(16, 48)), dict(R_list=()),
                                dict(trials_per_R=0), dict(data_family="noise"), dict(alpha=1.0),
                                dict(p=1.5), dict(n=1)])
def test_sweep_config_errors(kw):
    with pytest.raises(ParameterError):
        H.SweepConfig(**kw)


SMALL = dict(R_list=(16.0, 32.0), trials_per_R=2)


@pytest.fixture(scope="module")
def small_table():
    return H.run_sweep(H.SweepConfig(**SMALL))


def test_sweep_table_shape(small_table):
    kinds = [r["kind"] for r in small_table]
    assert kinds == ["trial"] * 4 + ["max"] * 2 + ["fit"]
    for r in small_table:
        assert r["predicted_exponent"] == (r["n"] - 1) * (0.5 - 1 / r["p"])
    trials = [r for r in small_table if r["kind"] == "trial"]
    assert all(r["status"] == "ok" and r["ratio"] > 0 for r in trials)
    mx = [r for r in small_table if r["kind"] == "max"]
    for m in mx:
        assert m["ratio"] == max(r["ratio"] for r in trials if r["R"] == m["R"])
    assert small_table[-1]["slope"] == H.fit_slope([16, 32], [m["ratio"] for m in mx])


def test_sweep_deterministic_across_threads(small_table):
    cfg = H.SweepConfig(**SMALL)
    again = H.run_sweep(cfg, threads=3)
    assert H.to_csv(again, 0) == H.to_csv(small_table, 0)


def test_sweep_seed_changes_data():
    a = H.sweep_data(H.SweepConfig(seed=0), 16.0, 0)
    b = H.sweep_data(H.SweepConfig(seed=1), 16.0, 0)
    assert not np.array_equal(a.values, b.values)
    assert np.array_equal(a.values, H.sweep_data(H.SweepConfig(seed=0), 16.0, 0).values)


@pytest.mark.parametrize("fam", H.FAMILIES)
def test_sweep_families_run(fam):
    row = H.sweep_trial(H.SweepConfig(R_list=(16.0,), data_family=fam, trials_per_R=1), 16.0, 0)
    assert row["status"] == "ok" and np.isfinite(row["ratio"])


def test_sweep_skips_over_budget():
    cfg = H.SweepConfig(R_list=(1024.0,), n=3, trials_per_R=1)
    row = H.sweep_trial(cfg, 1024.0, 0)
    assert row["status"].startswith("skipped") and row["ratio"] is None
    tab = H.run_sweep(cfg)
    assert tab[-1]["status"].startswith("skipped") and np.isnan(tab[-1]["slope"])


def test_fit_slope_exact_and_scale_invariant():
    R = np.array([16.0, 32, 64, 128])
    v = 3 * R ** 0.37
    assert abs(H.fit_slope(R, v) - 0.37) <= 1e-12
    rng = np.random.default_rng(0)
    w = v * rng.uniform(0.5, 2, 4)
    for c in (1e-6, 0.3, 7.0, 1e9):
        assert abs(H.fit_slope(R, c * w) - H.fit_slope(R, w)) <= 1e-12
    assert np.isnan(H.fit_slope([16.0], [1.0]))


def test_csv_and_json_writers():
    rows = [dict(kind="trial", R=16.0, trial=0, ratio=0.1, status="ok")]
    txt = H.to_csv(rows, 5)
    lines = txt.splitlines()
    assert lines[0] == ",".join(H.COLUMNS)
    assert lines[-1] == f"# wplab-version={__version__} seed=5"
    assert "0.1" in lines[1] and lines[1].count(",") == len(H.COLUMNS) - 1
    doc = json.loads(H.to_json([dict(a=float("nan"), b=np.float64(2.5))], 5, command="x"))
    assert doc["rows"] == [{"a": None, "b": 2.5}] and doc["seed"] == 5 and doc["command"] == "x"


def test_accept_exponents_passes():
    out = io.StringIO()
    assert H.run_acceptance("exponents", out=out, log=io.StringIO()) == 0
    assert out.getvalue().startswith("[PASS] criterion 1 (exponents)")


def test_accept_mutation_fails_by_name(monkeypatch):
    good = F.critical_exponent

    def broken(params=None, **kw):
        return good(params, **kw) + Fraction(1, 100)
    monkeypatch.setattr(F, "critical_exponent", broken)
    out = io.StringIO()
    assert H.run_acceptance("exponents", out=out, log=io.StringIO()) == 1
    line = out.getvalue().strip()
    assert line.startswith("[FAIL] criterion 1 (exponents)") and "beta(2,3,4)=1/2" in line


def test_crashing_criterion_is_a_failure(monkeypatch):
    def boom(seed=0, threads=1):
        raise RuntimeError("kaput")
    monkeypatch.setitem(H.CRITERIA, 1, boom)
    res = H.run_criterion(1)
    assert not res.passed and "kaput" in res.detail


def test_suite_order_and_unknown():
    assert H.suite_criteria("all") == list(range(1, 12))
    flat = [k for s in H.SUITE_ORDER for k in H.SUITES[s]]
    assert flat == list(range(1, 12))
    assert H.suite_criteria("broad") == [6, 7]
    with pytest.raises(H.UsageError):
        H.suite_criteria("nope")


# ---------------------------------------------------------------- CLI

def test_cli_unknown_suite_exits_2(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["accept", "nope"])
    assert ei.value.code == 2
    assert "unknown suite" in capsys.readouterr().err


def test_cli_accept_exponents(capsys):
    assert cli.main(["accept", "exponents"]) == 0
    assert "[PASS] criterion 1" in capsys.readouterr().out


def test_cli_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = blue\n")
    with pytest.raises(SystemExit) as ei:
        cli.main(["--config", str(cfg), "sweep"])
    assert ei.value.code == 2


def test_cli_bad_parameter_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("R_list = 16 12\n")
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "sweep"]) == 1
    assert "strictly increasing" in capsys.readouterr().err


def test_cli_sweep_csv_identical_across_threads(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("R_list = 16 32\ntrials_per_R = 2\n")
    texts = []
    for th in (1, 2):
        out = tmp_path / f"t{th}"
        assert cli.main(["--config", str(cfg), "--seed", "3", "--out", str(out), "--threads", str(th), "sweep"]) == 0
        texts.append((out / "sweep.csv").read_bytes())
    assert texts[0] == texts[1]
    assert texts[0].decode().splitlines()[-1] == f"# wplab-version={__version__} seed=3"


@pytest.mark.parametrize("argv", [["propagate", "--times", "0,1"], ["wavepacket", "--r", "16", "--top", "3"],
                                  ["partition", "--points", "5000"], ["broad", "--npts", "16"],
                                  ["wolff", "--r", "4", "--samples", "2000"], ["pconf"]])
def test_cli_subcommands_write_tables(tmp_path, argv):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("R = 16\nR_list = 16\nD = 2\n")
    for fmt in ("csv", "json"):
        assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "--format", fmt] + argv) == 0
        path = tmp_path / f"{argv[0]}.{fmt}"
        assert path.exists()
        if fmt == "csv":
            lines = path.read_text().splitlines()
            assert lines[-1] == f"# wplab-version={__version__} seed=0" and len(lines) >= 3
        else:
            assert json.loads(path.read_text())["rows"]


def test_cli_wolff_variety_file(tmp_path):
    from wplab.tubes import sphere
    vf = tmp_path / "s.var"
    vf.write_text(sphere([0, 0, 0], 8.0).to_text())
    cfg = tmp_path / "c.cfg"
    cfg.write_text("R = 256\n")
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "wolff", "--variety", str(vf),
                     "--samples", "2000"]) == 0
    assert os.path.getsize(tmp_path / "wolff.csv") > 0
