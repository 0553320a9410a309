import json
import warnings

import pytest

from slp_smpc.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONTERMINATION, EXIT_OK, build_report, main
from slp_smpc.model import TerminalSettings, dump_scenario

from conftest import toy_scenario


def _write(tmp_path, cfg, name="toy.toml"):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return str(dump_scenario(cfg, tmp_path / name))


@pytest.fixture()
def toy_file(tmp_path):
    return _write(tmp_path, toy_scenario(rollouts=2, steps=2))


def test_design_k_verify_writes_gain(tmp_path, toy_file, capsys):
    out = tmp_path / "o"
    assert main(["design-k", toy_file, "--use-k", "0", "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "gain.json").read_text())
    assert data["mode"] == "verify" and data["margin_condition_holds"] is True
    assert data["K"] == [[0.0, 0.0]]
    assert len(data["eps"]) == 2 and all(e > 0 for e in data["eps"])


def test_design_k_margin_failure_exit_code(tmp_path, capsys):
    path = _write(tmp_path, toy_scenario(b=(0.03, 1.0), x0=(0.0, 0.0)))
    rc = main(["design-k", path, "--use-k", "0", "--out", str(tmp_path / "o")])
    assert rc == EXIT_INFEASIBLE
    assert "margin condition" in capsys.readouterr().err


def test_design_k_synthesis(tmp_path, toy_file):
    out = tmp_path / "o"
    assert main(["design-k", toy_file, "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "gain.json").read_text())
    assert data["mode"] == "synthesize" and len(data["K"]) == 1


def test_terminal_set_cache_notice(tmp_path, toy_file, isolated_cache, capsys):
    out = str(tmp_path / "o")
    assert main(["terminal-set", toy_file, "--out", out]) == EXIT_OK
    first = capsys.readouterr().out
    assert "cache hit" not in first and "nu=9 mu=9" in first
    assert main(["terminal-set", toy_file, "--out", out]) == EXIT_OK
    assert "cache hit" in capsys.readouterr().out
    data = json.loads((tmp_path / "o" / "terminal_set.json").read_text())
    assert data["nu"] == 9


def test_terminal_set_cap_exit_code(tmp_path, capsys):
    cfg = toy_scenario().replace(terminal=TerminalSettings(K=((0.0, 0.0),), nu_max=3, mu_max=3))
    path = _write(tmp_path, cfg)
    assert main(["terminal-set", path, "--no-cache", "--out", str(tmp_path / "o")]) == EXIT_NONTERMINATION


def test_simulate_zero_steps(tmp_path, toy_file, capsys):
    out = tmp_path / "o"
    rc = main(["simulate", toy_file, "--no-cache", "--rollouts", "1", "--steps", "0", "--out", str(out)])
    assert rc == EXIT_OK
    assert "min satisfaction n/a" in capsys.readouterr().out
    assert (out / "summary.json").exists()


def test_simulate_then_report(tmp_path, toy_file, capsys):
    out = tmp_path / "o"
    args = ["simulate", toy_file, "--no-cache", "--method", "rc", "--method", "policy17", "--out", str(out / "a")]
    assert main(args) == EXIT_OK
    assert main(["report", "--out", str(out)]) == EXIT_OK
    text = (out / "report.md").read_text()
    rows = [ln for ln in text.splitlines() if ln.startswith("| rc") or ln.startswith("| policy17")]
    assert len(rows) == 2


def _summary(method, cost, sat=0.8):
    return {"methods": {method: {"cost_mean": cost, "cost_std": 1.0, "min_satisfaction": sat,
                                 "solve_time_mean": 0.01, "rollouts": 5}}}


def test_report_tables(tmp_path):
    (tmp_path / "one").mkdir()
    (tmp_path / "one" / "summary.json").write_text(json.dumps(_summary("rc", -1.5)))
    text = build_report(tmp_path)
    assert "| rc | -1.50 +- 1.00 | 80.0 | 10.00 | 5 |" in text
    (tmp_path / "two").mkdir()
    (tmp_path / "two" / "summary.json").write_text(json.dumps(_summary("rc-mod", -2.0, None)))
    text = build_report(tmp_path)
    assert "| rc-mod | -2.00 +- 1.00 | n/a |" in text and "| rc |" in text
    cells = [{"p": 0.6, "method": "rc", "status": "ok", "summary": {"cost_mean": 1.0, "cost_std": 0.5}},
             {"p": 0.9, "method": "rc", "status": "infeasible", "summary": None},
             {"p": 0.6, "method": "rc-mod", "status": "ok", "summary": {"cost_mean": 0.9, "cost_std": 0.4}}]
    (tmp_path / "sweep.json").write_text(json.dumps(cells))
    text = build_report(tmp_path)
    assert "| p | rc | rc-mod |" in text
    assert "| 0.6 | 1.000 +- 0.500 | 0.900 +- 0.400 |" in text
    assert "| 0.9 | infeasible |  |" in text


def test_report_empty_directory(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["report", "--out", str(tmp_path / "missing")]) == EXIT_CONFIG


@pytest.mark.parametrize("argv", [
    [],
    ["simulate", "--method", "mpc"],
    ["simulate", "--rollouts", "many"],
    ["design-k", "--workers", "0"],
    ["frobnicate"],
])
def test_bad_arguments(argv, capsys):
    assert main(argv) == EXIT_CONFIG


def test_missing_scenario_file(tmp_path, capsys):
    assert main(["design-k", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == EXIT_CONFIG
