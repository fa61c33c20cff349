"""End-to-end runs through the benchmark harness."""

from pathlib import Path

import pandas as pd
import pytest

from src.bench import run, sweep, write_csv
from src.checker import run_checks
from src.config import ConfigError, SweepMatrix, load_run_config, parse_run_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small(lock="cql", hier=False, **workload):
    w = {"numCns": 2, "clientsPerCn": 2, "numLocks": 8, "opsPerClient": 50, "objectArenaBytes": 4096}
    w.update(workload)
    return parse_run_config({"lock": lock, "seed": 1, "hier": {"enabled": hier}, "workload": w})


def test_flat_cql_run_passes_every_check():
    result = run(small())
    m = result.metrics
    assert m.ops_completed == 4 * 50
    assert m.passed
    assert m.mutex_violations == 0 and m.stuck_waiters == 0
    assert result.horizon_hit == []
    assert m.throughput > 0
    assert m.latency_p50 <= m.latency_p99


def test_hierarchical_run_passes_every_check():
    result = run(small(hier=True, clientsPerCn=4))
    assert result.metrics.ops_completed == 8 * 50
    assert result.metrics.mutex_violations == 0
    assert not result.report.failed
    meta = result.trace.records[0]
    assert meta["kind"] == "meta" and meta["hierarchy"] is True and meta["capacity"] == 2


@pytest.mark.parametrize("lock", ["caslock", "ticket"])
def test_baseline_runs_are_mutually_exclusive(lock):
    result = run(small(lock=lock))
    assert result.metrics.ops_completed == 4 * 50
    assert result.metrics.mutex_violations == 0
    assert result.metrics.resets == 0


@pytest.mark.parametrize("config", [small(), small(hier=True), small(lock="ticket")])
def test_runs_are_deterministic(config):
    first, second = run(config), run(config)
    assert first.trace.dumps() == second.trace.dumps()
    assert first.row() == second.row()


def test_readers_only_cost_one_mn_op_per_acquisition():
    m = run(small(readRatio=1.0)).metrics
    assert m.mn_ops_per_acq == 1.0
    assert m.refetch_per_release == 0.0
    assert m.notifications_per_release == 0.0


def test_trace_file_round_trips_through_the_checker(tmp_path):
    path = tmp_path / "run.jsonl"
    result = run(small(), trace_path=path)
    assert path.exists()
    assert run_checks(path).to_dict() == result.report.to_dict()


def test_memory_that_does_not_fit_is_a_config_error():
    config = parse_run_config(
        {"hier": {"enabled": False}, "fabric": {"mnMemoryBytes": 4096}, "workload": {"numCns": 1, "clientsPerCn": 1, "numLocks": 1000}}
    )
    with pytest.raises(ConfigError):
        run(config)
    too_wide = parse_run_config({"layout": {"queueCapacity": 1024}, "workload": {"numCns": 1, "clientsPerCn": 1}})
    with pytest.raises(ConfigError):
        run(too_wide)


def test_sweep_writes_one_row_per_point(tmp_path):
    base = small().model_dump(by_alias=True)
    matrix = SweepMatrix(base=base, axes={"lock": ["cql", "ticket"], "workload.clientsPerCn": [1, 2]})
    df = sweep(matrix)
    assert len(df) == 4
    path = tmp_path / "sweep.csv"
    write_csv(df, path)
    back = pd.read_csv(path)
    for column in ("lock", "clientsPerCn", "throughput", "mnOpsPerAcq", "latencyP99", "passed"):
        assert column in back.columns
    assert sorted(back["clientsPerCn"].unique()) == [1, 2]


@pytest.mark.slow
def test_cn_failure_is_survived_by_the_other_cns():
    config = load_run_config(CONFIGS / "failover.json")
    result = run(config)
    m = result.metrics
    assert m.ops_completed >= 6 * config.workload.ops_per_client
    assert m.stuck_waiters == 0
    assert m.mutex_violations == 0
    assert any(r["kind"] == "fail" for r in result.trace.records)


@pytest.mark.slow
def test_ci_config_runs_clean():
    result = run(load_run_config(CONFIGS / "ci.json"))
    assert result.metrics.passed
    assert result.metrics.ops_completed == 16 * 200
