"""dislock CLI: exit codes and overrides."""

import json

from src.config import RunConfig
from src.dislock import EXIT_CONFIG, EXIT_OK, apply_overrides, main

TINY = {
    "seed": 4,
    "hier": {"enabled": False},
    "workload": {"numCns": 2, "clientsPerCn": 1, "numLocks": 4, "opsPerClient": 20, "objectArenaBytes": 1024},
}


def test_bench_then_check_round_trip(tmp_path, capsys):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY))
    trace = tmp_path / "trace.jsonl"
    csv = tmp_path / "row.csv"
    assert main(["bench", "--config", str(config), "--trace", str(trace), "--csv", str(csv), "--strict"]) == EXIT_OK
    assert trace.exists() and csv.exists()
    assert "[OK]" in capsys.readouterr().out
    assert main(["check", str(trace)]) == EXIT_OK


def test_missing_trace_is_a_config_error(tmp_path, capsys):
    assert main(["check", str(tmp_path / "nope.jsonl")]) == EXIT_CONFIG
    assert "[ERROR]" in capsys.readouterr().out


def test_invalid_config_exits_3(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"workload": {"readRatio": 2}}))
    assert main(["bench", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["sweep", "--matrix", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_flags_override_the_file():
    config = apply_overrides(RunConfig(), lock="ticket", fairness="pf", hierarchy="off", seed=9)
    assert (config.lock, config.hier.fairness, config.hier.enabled, config.seed) == ("ticket", "phasefair", False, 9)
