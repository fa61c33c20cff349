"""Benchmark harness: build a simulated cluster for one RunConfig, drive the workload, collect metrics.

One run = one Simulator. `run` returns the metrics row, the event trace and
the inline checker report; `sweep` fans a SweepMatrix out over joblib workers.
"""

import itertools
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic.alias_generators import to_camel

from src.agent import Client, CnAgent
from src.baselines import CasLock, LockTimeout, TicketLock
from src.checker import CheckReport, run_checks
from src.config import ConfigError, RunConfig, SweepMatrix
from src.cql import CqlLock, CqlProtocol, ReleaseReport
from src.fabric import (
    MN,
    Fabric,
    FabricOp,
    HorizonExceeded,
    NodeId,
    OperationAborted,
    Simulator,
    Trace,
    WaitTimeout,
)
from src.hier import CnClock, HierarchicalLocks, TimeSync
from src.reset import ResetService, ResetState
from src.wire import WORD, HeaderLayout, LockMode, LockSpace
from src.workload import ClientStream, generate_workload, nearest_rank

logger = logging.getLogger(__name__)

CLOCK_STREAM = 0xC10C
SYSTEM_CID = 0

WORKLOAD_COLUMNS = {
    "num_cns": "numCns",
    "clients_per_cn": "clientsPerCn",
    "num_locks": "numLocks",
    "zipf_alpha": "zipfAlpha",
    "read_ratio": "readRatio",
    "critical_section_ops": "criticalSectionOps",
    "ops_per_client": "opsPerClient",
    "mode": "mode",
}


@dataclass
class RunMetrics:
    """Simulated-time results of one run. Throughput counts application ops (= acquisitions)."""

    throughput: float = 0.0
    latency_p50: float = 0.0
    latency_p99: float = 0.0
    acquire_p50: float = 0.0
    acquire_p99: float = 0.0
    mn_ops_per_acq: float = 0.0
    prefetch_per_acq: float = 0.0
    refetch_per_release: float = 0.0
    notifications_per_release: float = 0.0
    nic_utilization: float = 0.0
    retries_per_acq: float = 0.0
    reset_fraction: float = 0.0
    reset_latency_mean: float = 0.0
    ops_completed: int = 0
    timeouts: int = 0
    resets: int = 0
    mutex_violations: int = 0
    overtakes: int = 0
    cross_cn_overtakes: int = 0
    queued_cross_cn_overtakes: int = 0
    phase_violations: int = 0
    local_phase_violations: int = 0
    stuck_waiters: int = 0
    passed: bool = True
    sim_time_us: float = 0.0

    def to_row(self) -> dict[str, Any]:
        return {to_camel(k): v for k, v in asdict(self).items()}


@dataclass
class RunResult:
    config: RunConfig
    metrics: RunMetrics
    trace: Trace
    report: CheckReport
    horizon_hit: list[str] = field(default_factory=list)

    def row(self) -> dict[str, Any]:
        """CSV row: run identity, workload fields, then metrics."""
        c = self.config
        out: dict[str, Any] = {
            "lock": c.lock,
            "fairness": c.hier.fairness,
            "hierarchy": c.lock == "cql" and c.hier.enabled,
            "seed": c.seed,
        }
        for attr, column in WORKLOAD_COLUMNS.items():
            out[column] = getattr(c.workload, attr)
        out.update(self.metrics.to_row())
        return out


@dataclass
class MemoryPlan:
    lock_base: int
    lock_bytes: int
    arena_base: int
    arena_slots: int
    slot_bytes: int
    sync_addr: int
    total: int


def plan_memory(config: RunConfig, layout: HeaderLayout | None) -> MemoryPlan:
    """Place locks, the object arena and the time-sync counter; reject configs that don't fit."""
    w = config.workload
    fab = config.fabric
    lock_bytes = layout.lock_bytes if layout is not None else WORD
    if layout is not None and lock_bytes > fab.max_io_bytes:
        raise ConfigError(
            f"one lock (header + {layout.capacity} entries = {lock_bytes} bytes) exceeds maxIoBytes {fab.max_io_bytes}"
        )
    slot_bytes = -(-w.max_object_bytes // WORD) * WORD
    arena = -(-w.object_arena_bytes // WORD) * WORD
    arena_slots = arena // slot_bytes
    if arena_slots < 1:
        raise ConfigError(f"objectArenaBytes {w.object_arena_bytes} cannot hold a {slot_bytes}-byte object")
    lock_area = w.num_locks * lock_bytes
    total = lock_area + arena_slots * slot_bytes + WORD
    if total > fab.mn_memory_bytes:
        raise ConfigError(f"run needs {total} bytes of MN memory, mnMemoryBytes is {fab.mn_memory_bytes}")
    return MemoryPlan(
        lock_base=0,
        lock_bytes=lock_bytes,
        arena_base=lock_area,
        arena_slots=arena_slots,
        slot_bytes=slot_bytes,
        sync_addr=lock_area + arena_slots * slot_bytes,
        total=total,
    )


class Cluster:
    """Fabric, lock implementation and client drivers for one run."""

    def __init__(self, config: RunConfig, trace: Trace):
        self.config = config
        self.trace = trace
        self.sim = Simulator()
        w = config.workload
        self.hierarchy = config.lock == "cql" and config.hier.enabled

        self.layout = None
        if config.lock == "cql":
            try:
                self.layout = HeaderLayout.for_capacity(config.queue_capacity, config.layout.reset_id_bits)
            except ValueError as e:
                raise ConfigError(f"Invalid lock layout: {e}") from e
        self.plan = plan_memory(config, self.layout)

        rng = np.random.default_rng([config.seed, CLOCK_STREAM])
        offsets = {
            NodeId.cn(i): float(rng.uniform(0, config.fabric.clock_offset_max_us)) for i in range(1, w.num_cns + 1)
        }
        self.fabric = Fabric(
            self.sim, config.fabric, w.num_cns, memory_bytes=self.plan.total, trace=trace, clock_offsets=offsets
        )
        lock_base = self.fabric.alloc(w.num_locks * self.plan.lock_bytes)
        self.fabric.alloc(self.plan.arena_slots * self.plan.slot_bytes)
        self.fabric.alloc(WORD)

        self.cql: CqlProtocol | None = None
        self.resets: ResetService | None = None
        self.hier: HierarchicalLocks | None = None
        self.time_sync: TimeSync | None = None
        self.baseline: CasLock | TicketLock | None = None
        self.cn_of_cid = {
            cid: NodeId.cn((cid - 1) // w.clients_per_cn + 1) for cid in range(1, w.total_clients + 1)
        }

        if config.lock == "cql":
            self.space = LockSpace(lock_base, w.num_locks, self.layout)
            self.space.initialize(self.fabric.words)
            self.agents = {
                cn: CnAgent(self.fabric, cn, ResetState(config.reset.acquisition_timeout_us)) for cn in self.fabric.cns
            }
            self.resets = ResetService(self.fabric, self.space, self.agents, config.reset)
            for agent in self.agents.values():
                agent.resets = self.resets
            self.cql = CqlProtocol(self.fabric, self.space, self.agents, self.resets, config.reset, self.cn_of_cid)
            self.fabric.on_recovery(self._on_recovery)
            if self.hierarchy:
                clocks = {cn: CnClock(self.fabric, cn) for cn in self.fabric.cns}
                self.time_sync = TimeSync(self.fabric, self.plan.sync_addr, clocks, config.hier)
                self.hier = HierarchicalLocks(self.cql, clocks, config.hier)
                self.lock = self.hier
            else:
                self.lock = CqlLock(self.cql)
        elif config.lock == "caslock":
            self.baseline = CasLock(self.fabric, lock_base, w.num_locks, config.backoff)
            self.lock = self.baseline
        else:
            self.baseline = TicketLock(self.fabric, lock_base, w.num_locks, config.backoff)
            self.lock = self.baseline

        for event in config.failures:
            self.fabric.inject_failure(NodeId.parse(event.node), event.at, event.recover_at)

        self._acq_ids = itertools.count()
        self.acquisitions = 0
        self.abandoned = 0
        self.op_latencies: list[float] = []
        self.acquire_latencies: list[float] = []
        self.finished_at = 0.0

    def _on_recovery(self, node: NodeId) -> None:
        if node != MN:
            return
        live = self.fabric.live_cns()
        if not live:
            return
        system = Client(SYSTEM_CID, live[0])
        self.sim.spawn(self.resets.recover_locks(system), name=f"recover-{live[0]}", owner=live[0])

    # -- client drivers -------------------------------------------------------

    def emit_meta(self) -> None:
        c = self.config
        self.trace.emit(
            0.0,
            "meta",
            lock=c.lock,
            fairness=c.hier.fairness,
            transferPolicy=c.hier.transfer_policy,
            hierarchy=self.hierarchy,
            capacity=self.layout.capacity if self.layout is not None else 0,
            latencyCnMn=c.fabric.latency_cn_mn,
            window=c.cross_cn_window,
            seed=c.seed,
            horizon=c.horizon_us,
        )

    def start(self, streams: list[ClientStream]) -> None:
        if self.time_sync is not None:
            synced = self.time_sync.start()
            self.sim.spawn(self._start_after_sync(synced, streams), name="starter")
        else:
            self._spawn_clients(streams)

    def _start_after_sync(self, synced, streams: list[ClientStream]):
        for fut in synced:
            try:
                yield self.sim.with_timeout(fut, 2 * self.config.hier.sync_timeout_us)
            except WaitTimeout:
                logger.warning("starting clients before every CN finished its first sync round")
        self._spawn_clients(streams)

    def _spawn_clients(self, streams: list[ClientStream]) -> None:
        for stream in streams:
            cn = NodeId.cn(stream.cn)
            if self.fabric.is_failed(cn):
                continue
            client = Client(stream.cid, cn)
            self.sim.spawn(self.client_loop(client, stream), name=f"client-{client}", owner=cn)

    def client_loop(self, client: Client, stream: ClientStream):
        sim = self.sim
        trace = self.trace
        who = {"cid": client.cid, "cn": client.cn.index}
        for i in range(len(stream)):
            lock_id = int(stream.lock_ids[i])
            mode = LockMode.SHARED if stream.shared[i] else LockMode.EXCLUSIVE
            acq = next(self._acq_ids)
            t0 = sim.now
            trace.emit(t0, "request", acq=acq, lockId=lock_id, **who, mode=mode.name)
            try:
                grant = yield from self.lock.acquire(client, lock_id, mode)
            except LockTimeout as e:
                self.abandoned += 1
                logger.warning("%s", e)
                trace.emit(sim.now, "abandon", acq=acq, lockId=lock_id, **who)
                continue
            self.acquisitions += 1
            self.acquire_latencies.append(sim.now - t0)
            trace.emit(sim.now, "grant", acq=acq, lockId=lock_id, **who, mode=mode.name, **self._grant_fields(acq, grant))

            yield from self.critical_section(client, lock_id, mode, int(stream.object_bytes[i]))

            trace.emit(sim.now, "release", acq=acq, lockId=lock_id, **who)
            report = yield from self.lock.release(client, lock_id, mode, grant)
            if isinstance(report, ReleaseReport):
                trace.emit(sim.now, "released", acq=acq, lockId=lock_id, notified=report.notified)
            self.op_latencies.append(sim.now - t0)
        self.finished_at = max(self.finished_at, sim.now)

    def _grant_fields(self, acq: int, grant) -> dict[str, Any]:
        if self.config.lock == "caslock":
            return {"seq": acq, "attempts": grant.attempts}
        if self.config.lock == "ticket":
            return {"seq": grant.seq, "attempts": grant.attempts}
        if self.hierarchy:
            fields = {"seq": -1 if grant.local else grant.seq}
            if grant.enqueued_at is not None:
                fields["enqueuedAt"] = round(grant.enqueued_at, 6)
            return fields
        return {"seq": grant.seq, "attempts": grant.attempts, "faa": grant.faa, "writes": grant.writes}

    def critical_section(self, client: Client, lock_id: int, mode: LockMode, nbytes: int):
        """criticalSectionOps object accesses, each split into maxIoBytes chunks."""
        plan = self.plan
        addr = plan.arena_base + (lock_id % plan.arena_slots) * plan.slot_bytes
        max_io = self.config.fabric.max_io_bytes
        fill = bytes([client.cid & 0xFF])
        for _ in range(self.config.workload.critical_section_ops):
            for off in range(0, nbytes, max_io):
                n = min(max_io, nbytes - off)
                if mode is LockMode.SHARED:
                    op = FabricOp.read(client.cn, addr + off, n, tag="data")
                else:
                    op = FabricOp.write(client.cn, addr + off, fill * n, tag="data")
                try:
                    yield self.fabric.post_op(op)
                except OperationAborted:
                    logger.debug("%s data op on lock %d dropped by MN recovery", client, lock_id)

    # -- metrics --------------------------------------------------------------

    def metrics(self, report: CheckReport) -> RunMetrics:
        stats = self.fabric.stats
        acq = self.acquisitions

        def per_acq(x: float) -> float:
            return x / acq if acq else 0.0

        sim_time = self.finished_at or self.sim.now
        m = RunMetrics(
            latency_p50=nearest_rank(self.op_latencies, 50),
            latency_p99=nearest_rank(self.op_latencies, 99),
            acquire_p50=nearest_rank(self.acquire_latencies, 50),
            acquire_p99=nearest_rank(self.acquire_latencies, 99),
            mn_ops_per_acq=per_acq(stats.ops_by_tag["acq"]),
            prefetch_per_acq=per_acq(stats.ops_by_tag["prefetch"]),
            ops_completed=acq,
            timeouts=self.abandoned,
            sim_time_us=sim_time,
        )
        if sim_time > 0:
            m.throughput = acq / (sim_time / 1e6)
            m.nic_utilization = stats.weighted_charge / (self.config.fabric.mn_nic_iops_capacity * sim_time / 1e6)
        if self.cql is not None:
            s = self.cql.stats
            if s.releases:
                m.refetch_per_release = s.refetches / s.releases
                m.notifications_per_release = s.notifications / s.releases
            m.retries_per_acq = per_acq(s.aborted_acquires)
            m.timeouts += s.timeouts
            m.resets = self.resets.completed
            m.reset_fraction = per_acq(self.resets.completed)
            if self.resets.latencies:
                m.reset_latency_mean = float(np.mean(self.resets.latencies))
        else:
            s = self.baseline.stats
            m.retries_per_acq = per_acq(s.retries + s.polls)
        fairness = report.fairness
        m.mutex_violations = len(report.mutex_violations)
        m.overtakes = fairness.overtakes
        m.cross_cn_overtakes = fairness.cross_cn_overtakes
        m.queued_cross_cn_overtakes = fairness.queued_cross_cn_overtakes
        m.phase_violations = fairness.phase_violations
        m.local_phase_violations = fairness.local_phase_violations
        m.stuck_waiters = len(report.stuck_waiters)
        m.passed = not report.failed
        return m


def run(config: RunConfig, *, record_ops: bool = False, trace_path: str | Path | None = None) -> RunResult:
    """Build the cluster, run the workload to completion (or the horizon) and check the trace."""
    trace = Trace(record_ops=record_ops)
    cluster = Cluster(config, trace)
    cluster.emit_meta()
    streams = generate_workload(config.workload, config.seed)
    cluster.start(streams)
    horizon_hit: list[str] = []
    try:
        cluster.sim.run_until_quiescent(config.horizon_us)
    except HorizonExceeded as e:
        horizon_hit = e.stuck
        logger.warning("run hit the horizon at %.1fus with %d task(s) still live", e.horizon, len(e.stuck))
    report = run_checks(trace)
    metrics = cluster.metrics(report)
    logger.info(
        "%s: %d acquisitions in %.1fus, %.3f MN ops/acq, %d reset(s)",
        config.lock,
        metrics.ops_completed,
        metrics.sim_time_us,
        metrics.mn_ops_per_acq,
        metrics.resets,
    )
    if trace_path is not None:
        trace.write(trace_path)
    return RunResult(config=config, metrics=metrics, trace=trace, report=report, horizon_hit=horizon_hit)


def _sweep_point(point: dict[str, Any], config: RunConfig) -> dict[str, Any]:
    result = run(config)
    return {**point, **result.row()}


def sweep(matrix: SweepMatrix, n_jobs: int = 1) -> pd.DataFrame:
    """One row per matrix point; runs are independent so they fan out over joblib workers."""
    points = matrix.expand()
    rows = Parallel(n_jobs=n_jobs)(delayed(_sweep_point)(point, cfg) for point, cfg in points)
    return pd.DataFrame(rows)


def write_csv(rows: list[dict[str, Any]] | pd.DataFrame, path: str | Path) -> None:
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    df.to_csv(path, index=False)
