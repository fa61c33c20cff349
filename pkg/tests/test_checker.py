"""Trace checker on hand-built traces with planted faults."""

import json

import pytest

from src.checker import (
    check_cross_cn_order,
    check_liveness,
    check_mutual_exclusion,
    check_op_budget,
    check_resets,
    count_overtakes,
    count_phase_violations,
    grant_intervals,
    run_checks,
)


class TraceBuilder:
    def __init__(self, **meta):
        self.records = [{"t": 0.0, "kind": "meta", **meta}] if meta else []
        self._acq = 0

    def acq(self, cn, mode, req, granted=None, released=None, *, lock=0, seq=None, **grant_fields):
        acq = self._acq
        self._acq += 1
        who = {"acq": acq, "lockId": lock, "cid": 100 + acq, "cn": cn}
        self.records.append({"t": req, "kind": "request", **who, "mode": mode})
        if granted is not None:
            seq = acq if seq is None else seq
            self.records.append({"t": granted, "kind": "grant", **who, "mode": mode, "seq": seq, **grant_fields})
        if released is not None:
            self.records.append({"t": released, "kind": "release", **who})
        return acq

    def add(self, t, kind, **fields):
        self.records.append({"t": t, "kind": kind, **fields})

    def sorted(self):
        return sorted(self.records, key=lambda r: r["t"])


def test_overlapping_writers_are_flagged():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 1, 10)
    tb.acq(2, "EXCLUSIVE", 0, 5, 12)
    [v] = check_mutual_exclusion(tb.sorted())
    assert (v["acq"], v["other"]) == (1, 0)


def test_handover_at_the_same_instant_is_not_an_overlap():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 1, 5)
    tb.acq(2, "EXCLUSIVE", 0, 5, 9)
    tb.acq(1, "SHARED", 0, 9, 15)
    tb.acq(2, "SHARED", 0, 10, 12)
    assert check_mutual_exclusion(tb.sorted()) == []


def test_reader_overlapping_a_writer_is_flagged():
    tb = TraceBuilder()
    tb.acq(1, "SHARED", 0, 1, 10)
    tb.acq(2, "EXCLUSIVE", 0, 3, 4)
    tb.acq(2, "EXCLUSIVE", 0, 20, 21, lock=1)
    assert len(check_mutual_exclusion(tb.sorted())) == 1


def test_holder_on_a_failed_cn_stops_holding_at_the_failure():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 1)
    tb.add(10.0, "fail", node="CN1")
    tb.acq(2, "EXCLUSIVE", 2, 12, 15)
    records = tb.sorted()
    assert grant_intervals(records).loc[0, "t_released"] == 10.0
    assert check_mutual_exclusion(records) == []

    early = TraceBuilder()
    early.acq(1, "EXCLUSIVE", 0, 1)
    early.add(10.0, "fail", node="CN1")
    early.acq(2, "EXCLUSIVE", 2, 8, 15)
    assert len(check_mutual_exclusion(early.sorted())) == 1


def test_overtakes_treat_consecutive_readers_as_one_batch():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 1, 5)
    tb.acq(2, "SHARED", 0, 10, 20)
    tb.acq(3, "SHARED", 0, 9, 20)
    assert count_overtakes(tb.sorted()) == (0, 3)
    tb.acq(4, "EXCLUSIVE", 0, 8, 25)
    assert count_overtakes(tb.sorted()) == (1, 4)


def test_local_grants_are_left_out_of_overtake_counting():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 5, 6)
    tb.acq(1, "EXCLUSIVE", 0, 1, 2, seq=-1)
    assert count_overtakes(tb.sorted()) == (0, 1)


def test_liveness_ignores_abandoned_and_failed_clients():
    tb = TraceBuilder()
    stuck = tb.acq(1, "EXCLUSIVE", 0)
    gave_up = tb.acq(1, "EXCLUSIVE", 1)
    tb.add(50.0, "abandon", acq=gave_up, lockId=0, cid=100 + gave_up, cn=1)
    tb.acq(2, "EXCLUSIVE", 2)
    tb.add(60.0, "fail", node="CN2")
    late = tb.acq(3, "SHARED", 3, 500, 510)
    records = tb.sorted()
    assert [s["acq"] for s in check_liveness(records)] == [stuck]
    assert [s["acq"] for s in check_liveness(records, horizon=100.0)] == [stuck, late]


def test_reset_problems():
    tb = TraceBuilder()
    tb.add(1.0, "reset", lockId=0, phase="begin", cn=1)
    tb.add(9.0, "reset", lockId=0, phase="done", cn=1, clean=False)
    tb.add(10.0, "reset", lockId=1, phase="begin", cn=2)
    tb.add(11.0, "reset", lockId=2, phase="begin", cn=3)
    tb.add(12.0, "fail", node="CN3")
    tb.add(13.0, "reset", lockId=3, phase="begin", cn=1)
    tb.add(20.0, "reset", lockId=3, phase="done", cn=1, clean=True)
    problems = check_resets(tb.sorted())
    assert [(p["lockId"], p["problem"]) for p in problems] == [(0, "dirty post-state"), (1, "never finished")]


def test_op_budget():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 1, 2, faa=1, writes=0, attempts=1)
    tb.acq(1, "EXCLUSIVE", 3, 4, 5, faa=2, writes=1, attempts=1)
    tb.acq(1, "EXCLUSIVE", 6, 7, 8, faa=2, writes=2, attempts=2)
    tb.add(8.5, "released", acq=2, lockId=0, notified=8)
    tb.add(8.6, "released", acq=0, lockId=0, notified=7)
    problems = check_op_budget(tb.sorted(), capacity=8)
    assert [p["acq"] for p in problems] == [1, 2]


def test_phase_violation_when_a_reader_waits_across_two_writers():
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 0, 10)
    tb.acq(2, "SHARED", 5, 25, 30)
    tb.acq(3, "EXCLUSIVE", 6, 12, 20)
    assert count_phase_violations(tb.sorted()) == 1

    ok = TraceBuilder()
    ok.acq(1, "EXCLUSIVE", 0, 0, 10)
    ok.acq(2, "SHARED", 5, 10, 11)
    ok.acq(3, "EXCLUSIVE", 6, 12, 20)
    assert count_phase_violations(ok.sorted()) == 0


@pytest.mark.parametrize("window, expected", [(5.0, 1), (30.0, 0)])
def test_cross_cn_order_respects_the_window(window, expected):
    tb = TraceBuilder()
    tb.acq(1, "EXCLUSIVE", 0, 50, 60)
    tb.acq(2, "EXCLUSIVE", 20, 10, 15)
    tb.acq(1, "EXCLUSIVE", 21, 70, 80)
    assert check_cross_cn_order(tb.sorted(), window) == expected


def test_run_checks_asserts_overtakes_only_where_the_lock_promises_order():
    def overtaking(lock):
        tb = TraceBuilder(lock=lock, fairness="taskfair", hierarchy=False, capacity=8)
        tb.acq(1, "EXCLUSIVE", 0, 10, 15)
        tb.acq(2, "EXCLUSIVE", 1, 5, 8)
        return tb.sorted()

    ticket = run_checks(overtaking("ticket"))
    assert ticket.fairness.overtakes == 1 and ticket.failed
    cas = run_checks(overtaking("caslock"))
    assert cas.fairness.overtakes == 1 and not cas.failed
    assert cas.to_dict()["overtakesAsserted"] is False


def test_run_checks_loads_a_trace_file(tmp_path):
    tb = TraceBuilder(lock="cql", fairness="taskfair", hierarchy=False, capacity=8, window=50.0)
    tb.acq(1, "EXCLUSIVE", 0, 2, 5, faa=1, writes=0, attempts=1)
    tb.acq(2, "SHARED", 1, 5, 9, faa=1, writes=1, attempts=1)
    path = tmp_path / "trace.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in tb.sorted()))
    report = run_checks(path)
    assert not report.failed
    assert report.to_dict()["grantsChecked"] == 2
    with pytest.raises(FileNotFoundError):
        run_checks(tmp_path / "missing.jsonl")


def test_queued_cross_cn_order_only_counts_writers_already_in_the_cql_queue():
    def trace(enqueued_at, later_request=20.0):
        tb = TraceBuilder()
        fields = {} if enqueued_at is None else {"enqueuedAt": enqueued_at}
        tb.acq(1, "EXCLUSIVE", 0, 50, 60, **fields)
        tb.acq(2, "EXCLUSIVE", later_request, 10, 15, enqueuedAt=later_request + 2)
        return tb.sorted()

    assert check_cross_cn_order(trace(2.0), 5.0) == 1
    assert check_cross_cn_order(trace(2.0), 5.0, enqueued_only=True) == 1
    # entry landed after the later writer asked
    assert check_cross_cn_order(trace(25.0), 5.0, enqueued_only=True) == 0
    # still waiting on its own CN's local queue
    assert check_cross_cn_order(trace(None), 5.0, enqueued_only=True) == 0
    # inside the window once the timestamp tick is added
    assert check_cross_cn_order(trace(2.0, later_request=5.5), 5.0) == 1
    assert check_cross_cn_order(trace(2.0, later_request=5.5), 5.0, enqueued_only=True) == 0


def test_per_cn_phase_violations_ignore_readers_on_other_cns():
    remote = TraceBuilder()
    remote.acq(1, "EXCLUSIVE", 0, 0, 10)
    remote.acq(2, "SHARED", 5, 25, 30)
    remote.acq(1, "EXCLUSIVE", 6, 12, 20)
    assert count_phase_violations(remote.sorted()) == 1
    assert count_phase_violations(remote.sorted(), per_cn=True) == 0

    local = TraceBuilder()
    local.acq(1, "EXCLUSIVE", 0, 0, 10)
    local.acq(1, "SHARED", 5, 25, 30)
    local.acq(1, "EXCLUSIVE", 6, 12, 20)
    assert count_phase_violations(local.sorted(), per_cn=True) == 1


def hier_trace(fairness="taskfair", transfer_policy="timestamp", reset=False):
    tb = TraceBuilder(
        lock="cql", fairness=fairness, transferPolicy=transfer_policy, hierarchy=True, capacity=4, window=4.0
    )
    if fairness == "taskfair":
        tb.acq(1, "EXCLUSIVE", 0, 50, 60, enqueuedAt=2.0)
        tb.acq(2, "EXCLUSIVE", 20, 30, 40, enqueuedAt=22.0)
    else:
        tb.acq(1, "EXCLUSIVE", 0, 0, 10, enqueuedAt=2.0)
        tb.acq(1, "SHARED", 5, 25, 30, seq=-1)
        tb.acq(1, "EXCLUSIVE", 6, 12, 20, seq=-1)
    if reset:
        tb.add(70.0, "reset", lockId=0, phase="begin", cn=1)
        tb.add(75.0, "reset", lockId=0, phase="done", cn=1, clean=True)
    return tb.sorted()


def test_run_checks_binds_hierarchical_task_fair_runs_to_cql_queue_order():
    report = run_checks(hier_trace())
    assert report.cross_cn_asserted and report.fairness.queued_cross_cn_overtakes == 1
    assert report.failed
    assert report.to_dict()["crossCnAsserted"] is True

    for relaxed in (hier_trace(transfer_policy="local_prefer"), hier_trace(reset=True)):
        report = run_checks(relaxed)
        assert report.fairness.queued_cross_cn_overtakes == 1
        assert not report.cross_cn_asserted and not report.failed


def test_run_checks_binds_hierarchical_phase_fair_runs_per_cn():
    report = run_checks(hier_trace("phasefair"))
    assert report.phase_asserted and report.fairness.local_phase_violations == 1
    assert report.failed
    assert not run_checks(hier_trace("phasefair", reset=True)).failed
