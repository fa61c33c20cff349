"""Timestamp-based hierarchical locking on top of CQL.

Each CN keeps a local lock record per touched lock. Local clients queue on the
record; at most one of them at a time talks to the CQL lock on the MN, and
ownership is handed over locally when the first local waiter's timestamp is
earlier than the earliest remote waiter seen by that waiter's own queue
prefetch. Until the prefetch is back, ownership goes through CQL.
"""

import logging
from collections.abc import Generator
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import simpy

from src.agent import Client
from src.config import HierConfig
from src.cql import CqlProtocol, Grant
from src.fabric import Fabric, FabricOp, Future, NodeId, OperationAborted, SimMutex
from src.wire import (  # noqa: F401  timestamp helpers re-exported
    WORD,
    LockMode,
    decode_header,
    decode_queue,
    slot_of,
    ts_earlier,
    ts_now,
)

logger = logging.getLogger(__name__)


class LocalState(str, Enum):
    FREE = "free"
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


class Fairness(str, Enum):
    TASKFAIR = "taskfair"
    PHASEFAIR = "phasefair"


class TransferPolicy(str, Enum):
    TIMESTAMP = "timestamp"
    REMOTE_PREFER = "remote_prefer"
    LOCAL_PREFER = "local_prefer"
    LOCAL_BOUND = "local_bound"


@dataclass
class LocalWaiter:
    mode: LockMode
    cid: int
    ts: int
    granted: Future
    # its own queue prefetch has come back
    prefetched: bool = False


@dataclass
class LocalLock:
    guard: SimMutex
    state: LocalState = LocalState.FREE
    holder_cnt: int = 0
    cql_held: bool = False
    cql_mode: LockMode = LockMode.SHARED
    cql_reset_count: int = 0
    wq: list[LocalWaiter] = field(default_factory=list)
    prefetched_remote_ts: int | None = None
    local_streak: int = 0


class LocalLockTable:
    """Per-CN records keyed by lock id, created on first touch."""

    def __init__(self, fabric: Fabric):
        self.sim = fabric.sim
        self._records: dict[int, LocalLock] = {}
        self.peak = 0

    def __len__(self) -> int:
        return len(self._records)

    def get(self, lock_id: int) -> LocalLock:
        rec = self._records.get(lock_id)
        if rec is None:
            rec = LocalLock(guard=SimMutex(self.sim))
            self._records[lock_id] = rec
            self.peak = max(self.peak, len(self._records))
        return rec

    def maybe_evict(self, lock_id: int) -> None:
        rec = self._records.get(lock_id)
        if (
            rec is not None
            and rec.state is LocalState.FREE
            and not rec.wq
            and not rec.cql_held
            and not rec.guard.locked
        ):
            del self._records[lock_id]


def earliest_ts(a: int | None, b: int | None) -> int | None:
    if a is None:
        return b
    if b is None:
        return a
    return b if ts_earlier(b, a) else a


def select_share_set(
    wq: list[LocalWaiter], policy: Fairness, remote_ts: int | None
) -> list[LocalWaiter]:
    """Waiting readers that may share ownership with a reader that just got it."""
    if policy is Fairness.PHASEFAIR:
        return [w for w in wq if w.mode is LockMode.SHARED]
    chosen = []
    for w in wq:
        if w.mode is LockMode.EXCLUSIVE:
            break
        if remote_ts is not None and not ts_earlier(w.ts, remote_ts):
            break
        chosen.append(w)
    return chosen


# ---------------------------------------------------------------------------
# Time synchronization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyncEpoch:
    cn: int
    round: int
    epoch_start: float
    observed_at: float
    interval: float


class CnClock:
    """A CN's local clock and its current sync epoch."""

    def __init__(self, fabric: Fabric, cn: NodeId):
        self.fabric = fabric
        self.cn = cn
        # local clock origin until the first sync round completes
        self.epoch_start = 0.0
        self.rounds = 0
        self.synced = fabric.sim.future()

    def local_now(self) -> float:
        return self.fabric.local_clock(self.cn)

    def ts(self) -> int:
        return ts_now(self.epoch_start, self.local_now())


class TimeSync:
    """Barrier on one MN counter; every CN records its local time when it reads 0."""

    def __init__(self, fabric: Fabric, counter_addr: int, clocks: dict[NodeId, CnClock], config: HierConfig):
        self.fabric = fabric
        self.sim = fabric.sim
        self.addr = counter_addr
        self.clocks = clocks
        self.config = config
        self.zeroings = 0
        self.abandoned = 0
        self.epochs: list[SyncEpoch] = []

    def sync_time(self, cn: NodeId) -> Generator[simpy.Event, Any, SyncEpoch | None]:
        clock = self.clocks[cn]
        live = self.fabric.live_cns()
        old = yield self.fabric.post_op(FabricOp.faa(cn, self.addr, 1, tag="sync"))
        if old + 1 >= len(live):
            yield self.fabric.post_op(FabricOp.write_word(cn, self.addr, 0, tag="sync"))
            self.zeroings += 1
        deadline = self.sim.now + self.config.sync_timeout_us
        while True:
            raw = yield self.fabric.post_op(FabricOp.read(cn, self.addr, tag="sync"))
            if int.from_bytes(raw, "little") == 0:
                break
            if self.sim.now >= deadline:
                self.abandoned += 1
                logger.warning("%s abandoned sync round %d; keeping previous epoch", cn, clock.rounds + 1)
                if live and cn == self.fabric.live_cns()[0]:
                    yield self.fabric.post_op(FabricOp.write_word(cn, self.addr, 0, tag="sync"))
                return None
        clock.rounds += 1
        clock.epoch_start = clock.local_now()
        epoch = SyncEpoch(
            cn=cn.index,
            round=clock.rounds,
            epoch_start=clock.epoch_start,
            observed_at=self.sim.now,
            interval=self.config.sync_interval_us,
        )
        self.epochs.append(epoch)
        return epoch

    def run(self, cn: NodeId) -> Generator[simpy.Event, Any, None]:
        clock = self.clocks[cn]
        while True:
            try:
                epoch = yield from self.sync_time(cn)
            except OperationAborted:
                epoch = None
            clock.synced.resolve(epoch)
            yield self.sim.sleep(self.config.sync_interval_us)

    def start(self) -> list[Future]:
        for cn in self.fabric.cns:
            self.sim.spawn(self.run(cn), name=f"sync-{cn}", owner=cn, daemon=True)
        return [self.clocks[cn].synced for cn in self.fabric.cns]


# ---------------------------------------------------------------------------
# Hierarchical lock
# ---------------------------------------------------------------------------


@dataclass
class HierStats:
    fast_grants: int = 0
    queued: int = 0
    local_handovers: int = 0
    cql_acquires: int = 0
    cql_releases: int = 0
    prefetches: int = 0


class HierarchicalLocks:
    def __init__(self, cql: CqlProtocol, clocks: dict[NodeId, CnClock], config: HierConfig):
        self.cql = cql
        self.fabric = cql.fabric
        self.sim = cql.sim
        self.space = cql.space
        self.clocks = clocks
        self.config = config
        self.fairness = Fairness(config.fairness)
        self.policy = TransferPolicy(config.transfer_policy)
        self.tables = {cn: LocalLockTable(self.fabric) for cn in self.fabric.cns}
        self.stats = HierStats()

    def acquire(self, client: Client, lock_id: int, mode: LockMode, ts: int | None = None):
        return (yield from self.h_acquire(client, lock_id, mode, ts))

    def release(self, client: Client, lock_id: int, mode: LockMode, grant: Grant | None = None):
        return (yield from self.h_release(client, lock_id, mode))

    def h_acquire(
        self, client: Client, lock_id: int, mode: LockMode, ts: int | None = None
    ) -> Generator[simpy.Event, Any, Grant]:
        rec = self.tables[client.cn].get(lock_id)
        if ts is None:
            ts = self.clocks[client.cn].ts()
        grant = Grant(mode=mode, seq=-1, attempts=0, local=True)
        yield rec.guard.acquire()
        if mode is LockMode.SHARED and rec.state is LocalState.SHARED and rec.cql_held:
            rec.holder_cnt += 1
            self.stats.fast_grants += 1
            rec.guard.release()
            return grant

        if rec.state is not LocalState.FREE:
            if mode is LockMode.EXCLUSIVE:
                rec.state = LocalState.EXCLUSIVE
            waiter = LocalWaiter(mode=mode, cid=client.cid, ts=ts, granted=self.sim.future())
            rec.wq.append(waiter)
            self.stats.queued += 1
            if self.policy is TransferPolicy.TIMESTAMP:
                self.sim.spawn(
                    self.prefetch_remote_ts(client, lock_id, rec, waiter),
                    name=f"prefetch-c{client.cid}-l{lock_id}",
                    owner=client.cn,
                )
            rec.guard.release()
            yield waiter.granted
            yield rec.guard.acquire()
        else:
            rec.holder_cnt = 1
            rec.state = LocalState.SHARED if mode is LockMode.SHARED else LocalState.EXCLUSIVE

        if not rec.cql_held:
            cql_grant = yield from self.cql.acquire(client, lock_id, mode, ts, guard=rec.guard)
            self.stats.cql_acquires += 1
            rec.cql_held = True
            rec.cql_mode = mode
            rec.cql_reset_count = cql_grant.reset_count
            rec.prefetched_remote_ts = earliest_ts(rec.prefetched_remote_ts, cql_grant.earliest_remote_ts)
            rec.local_streak = 0
            grant.seq = cql_grant.seq
            grant.attempts = cql_grant.attempts
            grant.faa = cql_grant.faa
            grant.writes = cql_grant.writes
            grant.reset_count = cql_grant.reset_count
            grant.earliest_remote_ts = cql_grant.earliest_remote_ts
            grant.enqueued_at = cql_grant.enqueued_at
            grant.local = False

        if mode is LockMode.SHARED:
            for w in select_share_set(rec.wq, self.fairness, rec.prefetched_remote_ts):
                rec.wq.remove(w)
                rec.holder_cnt += 1
                w.granted.resolve()
        self._settle(rec, mode)
        rec.guard.release()
        return grant

    def h_release(self, client: Client, lock_id: int, mode: LockMode) -> Generator[simpy.Event, Any, None]:
        table = self.tables[client.cn]
        rec = table.get(lock_id)
        yield rec.guard.acquire()
        if rec.holder_cnt > 1:
            rec.holder_cnt -= 1
            rec.guard.release()
            return
        rec.holder_cnt = 0
        waiter = self._select_waiter(rec, mode)
        if waiter is None:
            rec.state = LocalState.FREE
            if rec.cql_held:
                yield from self._release_cql(client, lock_id, rec)
            rec.guard.release()
            table.maybe_evict(lock_id)
            return

        if rec.cql_held and not self._transfer_locally(client, lock_id, rec, waiter):
            yield from self._release_cql(client, lock_id, rec)
        elif rec.cql_held:
            rec.local_streak += 1
            self.stats.local_handovers += 1
        rec.wq.remove(waiter)
        rec.holder_cnt = 1
        self._settle(rec, waiter.mode)
        waiter.granted.resolve()
        rec.guard.release()

    def _select_waiter(self, rec: LocalLock, releasing: LockMode) -> LocalWaiter | None:
        if not rec.wq:
            return None
        if self.fairness is Fairness.PHASEFAIR and releasing is LockMode.EXCLUSIVE:
            for w in rec.wq:
                if w.mode is LockMode.SHARED:
                    return w
        return rec.wq[0]

    def _transfer_locally(self, client: Client, lock_id: int, rec: LocalLock, waiter: LocalWaiter) -> bool:
        if waiter.mode is not rec.cql_mode:
            return False
        if self.cql.agents[client.cn].reset_pending(lock_id):
            return False
        if self.policy is TransferPolicy.REMOTE_PREFER:
            return False
        if self.policy is TransferPolicy.LOCAL_PREFER:
            return True
        if self.policy is TransferPolicy.LOCAL_BOUND:
            return rec.local_streak < self.config.local_bound
        if not waiter.prefetched:
            # remote waiters that enqueued after the lock came here are still unknown
            return False
        remote = rec.prefetched_remote_ts
        return remote is None or ts_earlier(waiter.ts, remote)

    def _release_cql(self, client: Client, lock_id: int, rec: LocalLock) -> Generator[simpy.Event, Any, None]:
        yield from self.cql.release(client, lock_id, rec.cql_mode, rec.cql_reset_count)
        self.stats.cql_releases += 1
        rec.cql_held = False
        rec.prefetched_remote_ts = None
        rec.local_streak = 0

    @staticmethod
    def _settle(rec: LocalLock, owner_mode: LockMode) -> None:
        if owner_mode is LockMode.EXCLUSIVE or any(w.mode is LockMode.EXCLUSIVE for w in rec.wq):
            rec.state = LocalState.EXCLUSIVE
        else:
            rec.state = LocalState.SHARED

    def prefetch_remote_ts(
        self, client: Client, lock_id: int, rec: LocalLock, waiter: LocalWaiter | None = None
    ) -> Generator[simpy.Event, Any, None]:
        """One READ of header + queue; keep the earliest valid remote waiter timestamp."""
        layout = self.space.layout
        try:
            raw = yield self.fabric.post_op(
                FabricOp.read(client.cn, self.space.header_addr(lock_id), layout.lock_bytes, tag="prefetch")
            )
        except OperationAborted:
            return
        self.stats.prefetches += 1
        header = decode_header(int.from_bytes(raw[:WORD], "little"), layout)
        entries = decode_queue(raw[WORD:])
        earliest = None
        for offset in range(min(header.qsize, layout.capacity)):
            slot, version = slot_of(header.qhead, offset, layout)
            entry = entries[slot]
            if entry.version != version:
                continue
            if self.cql.cn_of_cid.get(entry.cid) == client.cn:
                continue
            if earliest is None or ts_earlier(entry.ts, earliest):
                earliest = entry.ts
        rec.prefetched_remote_ts = earliest_ts(rec.prefetched_remote_ts, earliest)
        if waiter is not None:
            waiter.prefetched = True
