import dataclasses
import json

import numpy as np
import pytest

from fedmarket.cli import main as cli_main
from fedmarket.errors import ConfigError
from fedmarket.maxclique import WeightedGraph, write_dimacs
from fedmarket.sim import (
    ScenarioConfig,
    compare_scenarios,
    config_from_dict,
    emit_metrics,
    load_config,
    recovered_gap_ratio,
    run_scenario,
)
from conftest import tiny_cfg


# ---------------------------------------------------------------- config

def test_default_config_loads():
    cfg = load_config("default")
    assert cfg.scenario == "fedcdc"
    assert cfg.rounds == 50
    assert cfg.partition.n_do == 24


def test_config_file_roundtrip(tmp_path):
    doc = {
        "scenario": "restricted",
        "rounds": 3,
        "seed": 11,
        "partition": {"n_dc": 3, "n_do": 24, "n_c": 4},
        "fl": {"local_epochs": 1},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    cfg = load_config(str(path))
    assert cfg.rounds == 3
    assert cfg.fl.local_epochs == 1
    assert cfg.partition.samples_per_do == 1000  # untouched default


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        config_from_dict({"scenrio": "fedcdc"})
    with pytest.raises(ConfigError):
        config_from_dict({"fl": {"epochs": 3}})


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(scenario="ideal")
    with pytest.raises(ConfigError):
        ScenarioConfig(rounds=0)
    with pytest.raises(ConfigError):
        ScenarioConfig(scenario="fedcdc", rounds=5, alliance_start=5)
    with pytest.raises(ConfigError):
        ScenarioConfig(mechanism="vcg")


def test_gap_ratio_undefined_when_scenarios_tie():
    assert recovered_gap_ratio(0.5, 0.5, 0.7) is None
    assert recovered_gap_ratio(0.9, 0.5, 0.7) == pytest.approx(0.5)


def test_gap_ratio_reference_values():
    # FMNIST/FedAvg reference accuracies: 82.90 / 50.67 / 79.88
    ratio = recovered_gap_ratio(0.8290, 0.5067, 0.7988)
    assert ratio == pytest.approx(0.906, abs=5e-4)


# ---------------------------------------------------------------- scenario structure

def test_restricted_recruits_eight_owners_each():
    trace = run_scenario(tiny_cfg("restricted"))
    for row in trace.rows:
        assert len(row.recruited) == 8  # 6 unique + 2 shared


def test_unrestricted_recruits_twelve_owners_each():
    trace = run_scenario(tiny_cfg("unrestricted"))
    for row in trace.rows:
        assert len(row.recruited) == 12  # 6 unique + all 6 shared


def test_contested_owner_serves_one_consumer_per_round():
    trace = run_scenario(tiny_cfg("restricted"))
    by_round: dict[int, list[int]] = {}
    for row in trace.rows:
        by_round.setdefault(row.round, []).extend(row.recruited)
    for r, owners in by_round.items():
        assert len(owners) == len(set(owners))


def test_fedcdc_forms_single_triple_alliance():
    trace = run_scenario(tiny_cfg("fedcdc"))
    assert len(trace.alliances) == 1
    rec = trace.alliances[0]
    assert rec.created_round == 2
    assert rec.participants == [0, 1, 2]
    assert rec.value == len(rec.participants) * len(rec.shared_labels) * len(rec.contested_owners)
    # after creation the alliance recruits all six shared owners
    shared = set(rec.contested_owners)
    for row in trace.rows:
        if row.round >= rec.created_round:
            assert not (set(row.recruited) & shared)


def test_trace_has_one_row_per_round_and_dc():
    cfg = tiny_cfg("restricted", rounds=4)
    trace = run_scenario(cfg)
    assert len(trace.rows) == 4 * 3
    seen = {(r.round, r.dc_id) for r in trace.rows}
    assert len(seen) == 12
    for row in trace.rows:
        assert 0.0 <= row.val_acc <= 1.0
        assert 0.0 <= row.test_acc <= 1.0


def test_run_is_deterministic():
    a = run_scenario(tiny_cfg("fedcdc"))
    b = run_scenario(tiny_cfg("fedcdc"))
    assert a.rows == b.rows
    assert a.alliances == b.alliances


def test_different_seeds_differ():
    a = run_scenario(tiny_cfg("restricted"))
    b = run_scenario(tiny_cfg("restricted", seed=6))
    assert a.rows != b.rows


# ---------------------------------------------------------------- metrics files

def test_emit_row_count(tmp_path):
    trace = run_scenario(tiny_cfg("restricted", rounds=1))
    paths = emit_metrics(trace, tmp_path)
    lines = (tmp_path / "accuracy.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3  # header + one row per DC
    assert lines[0] == "round,dc_id,val_acc,test_acc,mean_acc"


def test_emit_no_alliances_is_empty_list(tmp_path):
    trace = run_scenario(tiny_cfg("restricted", rounds=1))
    emit_metrics(trace, tmp_path)
    assert json.loads((tmp_path / "alliances.json").read_text()) == []


def test_emit_byte_identical_across_runs(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    emit_metrics(run_scenario(tiny_cfg("fedcdc")), out1)
    emit_metrics(run_scenario(tiny_cfg("fedcdc")), out2)
    for name in ("accuracy.csv", "alliances.json", "summary.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_summary_contents(tmp_path):
    trace = run_scenario(tiny_cfg("fedcdc"))
    emit_metrics(trace, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["scenario"] == "fedcdc"
    assert summary["n_alliances"] == 1
    assert 0.0 <= summary["final_mean_test_acc"] <= 1.0
    assert set(summary["per_dc"]) == {"0", "1", "2"}


# ---------------------------------------------------------------- compare

def test_compare_scenarios_structure():
    report = compare_scenarios(tiny_cfg("restricted", rounds=3))
    assert set(report["final_mean_test_acc"]) == {"unrestricted", "restricted", "fedcdc"}
    ratio = report["recovered_gap_ratio"]
    assert isinstance(ratio, float) or ratio == "undefined (zero gap)"


# ---------------------------------------------------------------- cli

def _write_tiny_config(tmp_path, scenario="restricted"):
    cfg = tiny_cfg(scenario)
    doc = {
        "scenario": cfg.scenario,
        "rounds": cfg.rounds,
        "matching_period": cfg.matching_period,
        "alliance_start": cfg.alliance_start,
        "seed": cfg.seed,
        "samples_per_test": cfg.samples_per_test,
        "blobs": dataclasses.asdict(cfg.blobs),
        "partition": dataclasses.asdict(cfg.partition),
        "fl": dataclasses.asdict(cfg.fl),
        "distill": dataclasses.asdict(cfg.distill),
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(doc))
    return path


def test_cli_run(tmp_path, capsys):
    cfg_path = _write_tiny_config(tmp_path)
    out_dir = tmp_path / "out"
    rc = cli_main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
    assert rc == 0
    assert (out_dir / "accuracy.csv").exists()
    assert (out_dir / "summary.json").exists()
    assert "final mean test acc" in capsys.readouterr().out


def test_cli_seed_override(tmp_path):
    cfg_path = _write_tiny_config(tmp_path)
    rc = cli_main(["run", "--config", str(cfg_path), "--seed", "9", "--out", str(tmp_path / "o")])
    assert rc == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["seed"] == 9


def test_cli_compare(tmp_path, capsys):
    cfg_path = _write_tiny_config(tmp_path)
    rc = cli_main(["compare", "--config", str(cfg_path), "--out", str(tmp_path / "cmp")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "restricted" in out and "fedcdc" in out
    assert (tmp_path / "cmp" / "compare.json").exists()


def test_cli_solve_mwc(tmp_path, capsys):
    adj = np.zeros((3, 3), dtype=bool)
    adj[0, 1] = adj[1, 0] = True
    g = WeightedGraph([2, 3, 4], adj)
    path = tmp_path / "g.dimacs"
    write_dimacs(g, path)
    rc = cli_main(["solve-mwc", "--graph", str(path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "weight: 5" in out
    assert "clique: 1 2" in out


def test_cli_bad_config_reports_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenario": "nope"}))
    rc = cli_main(["run", "--config", str(path)])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
