"""Simulator and fabric: verb semantics, timing model, NIC admission, messages and failures."""

import pytest

from src.config import FabricConfig
from src.fabric import (
    MN,
    Fabric,
    FabricOp,
    HorizonExceeded,
    InvalidAddr,
    NodeId,
    OperationAborted,
    SimMutex,
    Simulator,
    Trace,
    WaitTimeout,
)

CN1, CN2 = NodeId.cn(1), NodeId.cn(2)


def make_fabric(num_cns=2, memory=4096, **kwargs):
    sim = Simulator()
    fabric = Fabric(sim, FabricConfig(**kwargs), num_cns, memory_bytes=memory, trace=Trace(record_ops=True))
    return sim, fabric


def run(sim, gen, owner=None):
    task = sim.spawn(gen, owner=owner)
    sim.run_until_quiescent()
    return task.result.value


def test_read_completes_after_one_round_trip():
    sim, fabric = make_fabric(latency_cn_mn=2.0)
    fabric.write_word(0, 42)

    def client():
        raw = yield fabric.post_op(FabricOp.read(CN1, 0))
        return int.from_bytes(raw, "little"), sim.now

    value, t = run(sim, client())
    assert value == 42
    assert t == pytest.approx(2.0, abs=0.01)


def test_atomics_return_old_value_and_apply():
    sim, fabric = make_fabric()
    fabric.write_word(8, 5)

    def client():
        old_faa = yield fabric.post_op(FabricOp.faa(CN1, 8, 3))
        failed_cas = yield fabric.post_op(FabricOp.cas(CN1, 8, 5, 100))
        ok_cas = yield fabric.post_op(FabricOp.cas(CN1, 8, 8, 100))
        neg = yield fabric.post_op(FabricOp.faa(CN1, 8, -1))
        return old_faa, failed_cas, ok_cas, neg

    assert run(sim, client()) == (5, 8, 8, 100)
    assert fabric.read_word(8) == 99


def test_faa_wraps_at_64_bits():
    sim, fabric = make_fabric()
    fabric.write_word(0, (1 << 64) - 1)

    def client():
        return (yield fabric.post_op(FabricOp.faa(CN1, 0, 2)))

    assert run(sim, client()) == (1 << 64) - 1
    assert fabric.read_word(0) == 1


def test_faa_with_piggyback_reads_after_applying():
    sim, fabric = make_fabric()
    fabric.write_word(16, 7)
    fabric.write_word(24, 9)

    def client():
        return (yield fabric.post_op(FabricOp.faa(CN1, 0, 1, piggyback=(16, 16))))

    old, raw = run(sim, client())
    assert old == 0
    assert raw == (7).to_bytes(8, "little") + (9).to_bytes(8, "little")
    assert fabric.stats.ops_by_kind["FAA"] == 1
    assert fabric.stats.ops_by_kind["READ"] == 1


def test_out_of_range_and_oversized_ops_are_rejected():
    _, fabric = make_fabric(memory=64, max_io_bytes=16)
    with pytest.raises(InvalidAddr):
        fabric.post_op(FabricOp.read(CN1, 64))
    with pytest.raises(InvalidAddr):
        fabric.post_op(FabricOp.read(CN1, 4))
    with pytest.raises(ValueError):
        fabric.post_op(FabricOp.read(CN1, 0, 32))
    with pytest.raises(MemoryError):
        fabric.alloc(128)


def test_token_bucket_paces_heavy_ops():
    # 1 weighted op per microsecond, burst 8: two CAS pass at once, then one per 4us.
    sim, fabric = make_fabric(mn_nic_iops_capacity=1e6, nic_burst=8)
    done = []

    def client(i):
        yield fabric.post_op(FabricOp.cas(CN1, 0, 0, 0))
        done.append(sim.now)

    for i in range(20):
        sim.spawn(client(i))
    sim.run_until_quiescent()
    assert len(done) == 20
    assert done[0] == pytest.approx(2.0, abs=0.01)
    assert done[1] == pytest.approx(2.0, abs=0.01)
    assert max(done) == pytest.approx(74.0, abs=0.05)
    assert fabric.stats.weighted_charge == 80


def test_service_order_follows_arrival_order():
    sim, fabric = make_fabric()
    seqs = []

    def client(delay):
        yield sim.sleep(delay)
        op = FabricOp.faa(CN1, 0, 1)
        yield fabric.post_op(op)
        seqs.append((delay, op.service_seq))

    for d in (0.3, 0.1, 0.2):
        sim.spawn(client(d))
    sim.run_until_quiescent()
    assert [s for _, s in sorted(seqs)] == [0, 1, 2]


def test_messages_arrive_in_order_after_cn_latency():
    sim, fabric = make_fabric(latency_cn_mn=2.0, cn_cn_ratio=1.5)
    got = []
    fabric.attach(CN2, lambda src, payload: got.append((sim.now, src, payload)))
    fabric.attach(CN1, lambda src, payload: None)
    for i in range(3):
        fabric.send_message(CN1, CN2, i)
    sim.run_until_quiescent()
    assert [p for _, _, p in got] == [0, 1, 2]
    assert all(t == pytest.approx(3.0) for t, _, _ in got)
    assert got[0][1] == CN1


def test_messages_to_failed_node_are_dropped():
    sim, fabric = make_fabric()
    got = []
    fabric.attach(CN2, lambda src, payload: got.append(payload))
    fabric.inject_failure(CN2, at=1.0)

    def sender():
        yield sim.sleep(0.5)
        fabric.send_message(CN1, CN2, "early")
        yield sim.sleep(1.0)
        fabric.send_message(CN1, CN2, "late")

    run(sim, sender())
    assert got == []
    assert fabric.stats.messages_dropped == 2


def test_cn_failure_kills_its_tasks():
    sim, fabric = make_fabric()
    progress = []

    def worker():
        while True:
            yield sim.sleep(1.0)
            progress.append(sim.now)

    sim.spawn(worker(), owner=CN1)
    fabric.inject_failure(CN1, at=3.5)
    sim.run_until_quiescent()
    assert progress == [1.0, 2.0, 3.0]
    assert fabric.live_cns() == [CN2]


def test_mn_failure_stalls_ops_until_recovery_aborts_them():
    sim, fabric = make_fabric()
    fabric.inject_failure(MN, at=0.5, recover_at=50.0)
    outcome = []

    def client():
        try:
            yield fabric.post_op(FabricOp.faa(CN1, 0, 1))
            outcome.append("served")
        except OperationAborted:
            outcome.append(("aborted", sim.now))
        yield fabric.post_op(FabricOp.faa(CN1, 0, 1))
        outcome.append("served")

    run(sim, client())
    assert outcome == [("aborted", 50.0), "served"]
    assert fabric.read_word(0) == 1
    assert fabric.stats.ops_aborted == 1


def test_waiting_forever_raises_horizon_exceeded():
    sim, _ = make_fabric()

    def stuck():
        yield sim.future()

    sim.spawn(stuck(), name="stuck")
    with pytest.raises(HorizonExceeded) as info:
        sim.run_until_quiescent(horizon=100.0)
    assert info.value.stuck == ["stuck"]


def test_task_exceptions_propagate():
    sim, _ = make_fabric()

    def broken():
        yield sim.sleep(1.0)
        raise KeyError("boom")

    sim.spawn(broken())
    with pytest.raises(KeyError):
        sim.run_until_quiescent()


def test_identical_runs_produce_identical_traces():
    def one_run():
        sim, fabric = make_fabric()

        def client(cn, k):
            for i in range(5):
                yield fabric.post_op(FabricOp.faa(cn, 8 * (i % 3), k))

        for k, cn in enumerate([CN1, CN2, CN1]):
            sim.spawn(client(cn, k + 1), owner=cn)
        sim.run_until_quiescent()
        return fabric.trace.dumps()

    assert one_run() == one_run()


def test_node_names_round_trip():
    assert str(NodeId.cn(3)) == "CN3"
    assert NodeId.parse("CN3") == NodeId.cn(3)
    assert NodeId.parse("MN") == MN
    with pytest.raises(ValueError):
        NodeId.parse("XN1")


def test_recovered_cn_receives_messages_again():
    sim, fabric = make_fabric()
    got = []
    fabric.attach(CN2, lambda src, payload: got.append(payload))
    fabric.inject_failure(CN2, at=1.0)
    fabric.recover(CN2, at=5.0)

    def sender():
        yield sim.sleep(2.0)
        fabric.send_message(CN1, CN2, "while down")
        yield sim.sleep(4.0)
        fabric.send_message(CN1, CN2, "after")

    run(sim, sender())
    assert got == ["after"]
    assert fabric.live_cns() == [CN1, CN2]
    assert [r["kind"] for r in fabric.trace.records if r["kind"] in ("fail", "recover")] == ["fail", "recover"]


def test_messages_only_travel_between_cns():
    _, fabric = make_fabric()
    with pytest.raises(ValueError):
        fabric.send_message(CN1, MN, "hello")
    with pytest.raises(ValueError):
        fabric.send_message(MN, CN2, "hello")
    assert sum(fabric.stats.messages_sent.values()) == 0


def test_message_counters_start_empty_and_are_not_shared():
    _, first = make_fabric()
    _, second = make_fabric()
    first.send_message(CN1, CN2, "hello", tag="notify")
    assert first.stats.messages_sent["notify"] == 1
    assert second.stats.messages_sent["notify"] == 0


def test_sim_mutex_hands_over_in_request_order():
    sim = Simulator()
    mutex = SimMutex(sim)
    order = []

    def worker(k):
        yield mutex.acquire()
        order.append((k, sim.now))
        yield sim.sleep(1.0)
        mutex.release()

    for k in range(3):
        sim.spawn(worker(k))
    sim.run_until_quiescent()
    assert order == [(0, 0.0), (1, 1.0), (2, 2.0)]
    assert not mutex.locked


def test_with_timeout_passes_early_results_and_fails_late_ones():
    sim = Simulator()
    fast, slow = sim.future(), sim.future()
    sim.schedule(1.0, fast.resolve, "fast")
    sim.schedule(5.0, slow.resolve, "slow")

    def waiter():
        got = yield sim.with_timeout(fast, 2.0)
        try:
            yield sim.with_timeout(slow, 2.0)
        except WaitTimeout:
            return got, sim.now

    assert run(sim, waiter()) == ("fast", 3.0)


def test_killing_a_task_before_its_first_step():
    sim = Simulator()
    ran = []

    def worker():
        ran.append(sim.now)
        yield sim.sleep(1.0)

    sim.spawn(worker(), owner=CN1)
    assert sim.kill_owned_by(CN1) == 1
    sim.run_until_quiescent()
    assert ran == []
    assert sim.live_task_names() == []
