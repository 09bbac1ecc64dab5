import json

import numpy as np
import pytest

from clause.cli import ConfigError, main, parse_config, render_trace, run_sweep, show_trace
from clause.episode import Budgets
from clause.harness import run_episode
from clause.lcmappo import Learner, TrainConfig, parameter_checksum
from clause.policy import RandomPolicy

SMALL = ["--n-entities", "60", "--n-examples", "40", "--n-train", "30"]


def _write(tmp_path, data, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


# --- config -----------------------------------------------------------------

def test_cap_mode_with_prices_rejected(tmp_path):
    p = _write(tmp_path, {"mode": "cap", "beta_edge": 8, "beta_lat": 8, "beta_tok": 64, "lambda_tok": 0.1})
    with pytest.raises(ConfigError, match="mode/field mismatch"):
        parse_config(p)


def test_price_mode_needs_prices():
    with pytest.raises(ConfigError, match="mode/field mismatch"):
        parse_config(overrides={"mode": "price", "lambda_tok": 0.1})


def test_flag_overrides_file(tmp_path):
    p = _write(tmp_path, {"beta_edge": 8, "beta_lat": 8, "beta_tok": 64})
    assert parse_config(p, {"beta_tok": 512}).budgets == Budgets(8, 8, 512)
    ns_code = main(["eval", "--config", str(p), "--beta-tok=512", "--checkpoint", "random", "--out-dir",
                    str(tmp_path / "o"), "--eval-n", "2", *SMALL])
    assert ns_code == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["beta_tok"] == 512


def test_minimal_file_round_trips(tmp_path):
    a = parse_config(_write(tmp_path, {"command": "eval"}))
    assert a.beta_tok is not None and a.n_entities == 200
    b = parse_config(_write(tmp_path, json.loads(a.dumps()), "d.json"))
    assert a == b
    assert a.dumps() == b.dumps()


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, {"bogus": 1}))
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, {"train": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.json")


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        parse_config(overrides={"sweep_axis": "beta_tok", "sweep_values": [16.0]})
    with pytest.raises(ConfigError):
        parse_config(overrides={"sweep_axis": "beta_tok", "sweep_values": [16.0, -1.0]})
    with pytest.raises(ConfigError):
        parse_config(overrides={"sweep_axis": "gamma", "sweep_values": [1.0, 2.0]})


# --- sweeps -----------------------------------------------------------------

@pytest.fixture(scope="module")
def learner():
    return Learner.create(TrainConfig(seed=2))


def test_repeated_values_give_identical_rows(small_tasks, learner):
    cfg = parse_config(overrides={"command": "sweep", "checkpoint": "x", "sweep_axis": "beta_tok",
                                  "sweep_values": [32.0, 32.0], "eval_n": 8})
    before = parameter_checksum(learner)
    rows, summary = run_sweep(cfg, learner.actors, learner, small_tasks)
    assert len(rows) == 2
    assert {k: v for k, v in rows[0].items()} == rows[1]
    assert summary["checksum"] == before == parameter_checksum(learner)
    assert summary["slopes"][0]["slope"] == 0.0


def test_huge_token_price_selects_nothing(small_tasks):
    cfg = parse_config(overrides={"command": "sweep", "checkpoint": "x", "mode": "price", "lambda_edge": 0.0,
                                  "lambda_lat": 0.0, "lambda_tok": 0.0, "sweep_axis": "lambda_tok",
                                  "sweep_values": [0.0, 1e6], "eval_n": 10})
    rows, _ = run_sweep(cfg, RandomPolicy(), None, small_tasks)
    assert rows[0]["c_tok"] > 0.0
    assert rows[1]["c_tok"] == 0.0
    assert rows[1]["em_mean"] == 0.0


def test_sweep_needs_checkpoint():
    cfg = parse_config(overrides={"command": "sweep", "sweep_axis": "beta_tok", "sweep_values": [1.0, 2.0]})
    with pytest.raises(ConfigError):
        run_sweep(cfg)


# --- traces -----------------------------------------------------------------

def test_empty_trace_renders_no_actions(case_dataset, case_kb):
    res = run_episode(case_kb, case_dataset.examples[0], RandomPolicy(), budgets=Budgets(0, 0, 0), greedy=False)
    doc = res.trace
    doc["events"] = [e for e in doc["events"] if e["kind"] == "init"]
    doc["final"]["selected"] = []
    text = render_trace(doc)
    assert "no actions" in text


def test_case_trace_sections_and_tamper(tmp_path, case_dataset, case_kb):
    res = run_episode(case_kb, case_dataset.examples[0], RandomPolicy(), budgets=Budgets(16, 16, 512), seed=3,
                      greedy=False)
    p = tmp_path / "t.json"
    p.write_text(json.dumps(res.trace))
    text, err = show_trace(p)
    assert err is None
    assert render_trace(res.trace) == text
    assert "(1) architect" in text and "final:" in text
    doc = res.trace
    doc["final"]["counters"]["tok"] += 1
    p.write_text(json.dumps(doc))
    _, err = show_trace(p)
    assert err is not None
    assert main(["trace", "--trace", str(p)]) == 2


def test_smoke_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--out-dir", str(out), *SMALL]
    assert main(["gen-data", *common]) == 0
    assert (out / "kb.txt").exists() and (out / "eval_questions.txt").exists()
    assert main(["train", *common, "--iterations", "2", "--episodes-per-iter", "4"]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3 and (out / "training_curves.png").exists()
    ck = str(out / "checkpoint.bin")
    assert main(["eval", *common, "--checkpoint", ck, "--eval-n", "4", "--traces", "2"]) == 0
    first = (out / "eval.json").read_text()
    assert main(["eval", *common, "--checkpoint", ck, "--eval-n", "4", "--traces", "2"]) == 0
    assert (out / "eval.json").read_text() == first
    traces = sorted((out / "traces").glob("*.json"))
    assert len(traces) == 2
    assert main(["trace", "--trace", str(traces[0])]) == 0
    assert "audit: ok" in capsys.readouterr().out
    assert main(["sweep", *common, "--checkpoint", ck, "--sweep-axis", "beta_tok", "--sweep-values", "16,64",
                 "--eval-n", "4"]) == 0
    assert len((out / "frontier.csv").read_text().splitlines()) == 3
    assert (out / "frontier.png").exists()


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--mode", "cap", "--lambda-tok", "0.5", "--out-dir", str(tmp_path)])
    assert exc.value.code == 2
