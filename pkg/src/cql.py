"""CQL lock protocol: atomic enqueue on the MN header, handover by CN-to-CN notification.

Acquire is one FAA on the header; a client that cannot hold immediately WRITEs
its queue entry and waits for a notification. Release is one FAA with the whole
queue piggybacked, after which the releaser identifies and notifies the next
owner(s). The codec lives in src.wire and is re-exported here.
"""

import logging
from collections.abc import Generator
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Any

import simpy

from src.agent import AcquireAborted, Client, CnAgent
from src.config import ResetConfig
from src.fabric import Fabric, FabricOp, Future, NodeId, OperationAborted, WaitTimeout
from src.reset import ResetOccasion, ResetRequired, ResetService, detect_reset_occasion
from src.wire import (  # noqa: F401  re-exported codec
    Action,
    HeaderLayout,
    LockHeader,
    LockMode,
    LockSpace,
    Notification,
    QueueEntry,
    acquire_action,
    decode_header,
    decode_queue,
    encode_header,
    faa_delta,
    release_action,
    slot_of,
    traversal_of,
    ts_earlier,
)

logger = logging.getLogger(__name__)


class AcquireTimeout(TimeoutError):
    """A waiter saw no notification within the acquisition timeout."""


class OutcomeKind(str, Enum):
    HOLDER = "holder"
    WAITER = "waiter"
    ABORTED = "aborted"


@dataclass
class AcquireOutcome:
    kind: OutcomeKind
    old: LockHeader
    seq: int
    slot: int | None = None
    version: int | None = None
    wait: Future | None = None
    # when the queue entry WRITE landed at the MN
    enqueued_at: float | None = None


@dataclass
class Grant:
    """A completed acquisition, as seen by the caller."""

    mode: LockMode
    seq: int
    attempts: int = 1
    faa: int = 0
    writes: int = 0
    reset_count: int = 0
    earliest_remote_ts: int | None = None
    local: bool = False
    enqueued_at: float | None = None


@dataclass
class SlotView:
    offset: int
    slot: int
    version: int
    entry: QueueEntry

    @property
    def valid(self) -> bool:
        return self.entry.version == self.version


@dataclass
class QueueView:
    old: LockHeader
    slots: list[SlotView]
    targets: list[SlotView] = field(default_factory=list)
    refetches: int = 0


@dataclass
class ReleaseReport:
    aborted: bool = False
    notified: int = 0
    refetches: int = 0
    reset: ResetOccasion = ResetOccasion.NONE


@dataclass
class CqlStats:
    enqueues: int = 0
    holders: int = 0
    waiters: int = 0
    aborted_acquires: int = 0
    timeouts: int = 0
    releases: int = 0
    aborted_releases: int = 0
    refetches: int = 0
    notifications: int = 0
    release_resets: int = 0


class CqlProtocol:
    def __init__(
        self,
        fabric: Fabric,
        space: LockSpace,
        agents: dict[NodeId, CnAgent],
        resets: ResetService,
        config: ResetConfig,
        cn_of_cid: dict[int, NodeId],
    ):
        self.fabric = fabric
        self.sim = fabric.sim
        self.space = space
        self.layout = space.layout
        self.agents = agents
        self.resets = resets
        self.config = config
        self.cn_of_cid = cn_of_cid
        self.stats = CqlStats()

    # -- acquire --------------------------------------------------------------

    def enqueue(
        self, client: Client, lock_id: int, mode: LockMode, ts: int = 0
    ) -> Generator[simpy.Event, Any, AcquireOutcome]:
        """One FAA, plus one WRITE of the queue entry when the client must wait."""
        agent = self.agents[client.cn]
        agent.begin_op(lock_id)
        try:
            op = FabricOp.faa(
                client.cn,
                self.space.header_addr(lock_id),
                faa_delta(acquire_action(mode), self.layout),
                tag="acq",
            )
            word = yield self.fabric.post_op(op)
            self.stats.enqueues += 1
            old = decode_header(word, self.layout)
            if old.reset_id:
                return AcquireOutcome(OutcomeKind.ABORTED, old, op.service_seq)
            if (mode is LockMode.SHARED and old.wcnt == 0) or old.qsize == 0:
                agent.note_granted(lock_id)
                self.stats.holders += 1
                return AcquireOutcome(OutcomeKind.HOLDER, old, op.service_seq)

            slot, version = slot_of(old.qhead, old.qsize, self.layout)
            wait = agent.expect_notification(lock_id, client.cid)
            entry = QueueEntry(version=version, ts=ts, cid=client.cid, mode=mode)
            write = FabricOp.write(client.cn, self.space.entry_addr(lock_id, slot), entry.to_bytes(), tag="acq")
            yield self.fabric.post_op(write)
            self.stats.waiters += 1
            return AcquireOutcome(OutcomeKind.WAITER, old, op.service_seq, slot, version, wait, write.served_at)
        finally:
            agent.end_op(lock_id)

    def acquire(
        self,
        client: Client,
        lock_id: int,
        mode: LockMode,
        ts: int = 0,
        guard=None,
    ) -> Generator[simpy.Event, Any, Grant]:
        """Acquire, retrying after aborts, resets and stalled-op aborts.

        `guard` (a held SimMutex) is released while waiting out a reset and
        re-taken before the next attempt.
        """
        agent = self.agents[client.cn]
        grant = Grant(mode=mode, seq=-1, attempts=0)
        while True:
            try:
                outcome = yield from self.enqueue(client, lock_id, mode, ts)
                grant.faa += 1
                grant.attempts = grant.faa
                if outcome.kind is OutcomeKind.HOLDER:
                    grant.seq = outcome.seq
                    grant.reset_count = agent.reset_state.count(lock_id)
                    return grant
                if outcome.kind is OutcomeKind.WAITER:
                    grant.writes += 1
                    n = yield from self._await_grant(client, lock_id, outcome)
                    grant.seq = outcome.seq
                    grant.reset_count = max(n.reset_count, agent.reset_state.count(lock_id))
                    grant.earliest_remote_ts = n.earliest_remote_ts
                    grant.enqueued_at = outcome.enqueued_at
                    return grant
                self.stats.aborted_acquires += 1
                recover = partial(self.resets.wait_reset_done, client, lock_id)
            except AcquireAborted:
                self.stats.aborted_acquires += 1
                recover = partial(self.resets.wait_reset_done, client, lock_id)
            except AcquireTimeout:
                self.stats.timeouts += 1
                logger.warning("%s timed out waiting for lock %d", client, lock_id)
                self.fabric.trace.emit(
                    self.sim.now, "timeout", lockId=lock_id, cid=client.cid, cn=client.cn.index
                )
                recover = partial(self.resets.reset, client, lock_id, ResetOccasion.TIMEOUT)
            except OperationAborted:
                recover = None
            yield from self._recover(guard, recover)

    def _await_grant(
        self, client: Client, lock_id: int, outcome: AcquireOutcome
    ) -> Generator[simpy.Event, Any, Notification]:
        timeout = self.config.acquisition_timeout_us
        try:
            return (yield self.sim.with_timeout(outcome.wait, timeout))
        except WaitTimeout:
            self.agents[client.cn].cancel_wait(lock_id, client.cid)
            raise AcquireTimeout(f"{client} got no notification for lock {lock_id} in {timeout}us") from None

    def _recover(self, guard, make_body) -> Generator[simpy.Event, Any, None]:
        """Run a retry step with `guard` released; stalled-op aborts just back off."""
        if guard is not None:
            guard.release()
        while True:
            try:
                if make_body is not None:
                    yield from make_body()
                else:
                    yield self.sim.sleep(self.config.retry_backoff_us)
                break
            except OperationAborted:
                yield self.sim.sleep(self.config.retry_backoff_us)
        if guard is not None:
            yield guard.acquire()

    # -- release --------------------------------------------------------------

    def release(
        self, client: Client, lock_id: int, mode: LockMode, reset_count: int = 0
    ) -> Generator[simpy.Event, Any, ReleaseReport]:
        """Dequeue with one FAA (+ piggybacked queue READ) and notify successors.

        `reset_count` is the CN's reset counter when the lock was granted; it
        stamps the notifications so ones that straddle a reset are dropped.
        """
        agent = self.agents[client.cn]
        report = ReleaseReport()
        released = False
        try:
            op = FabricOp.faa(
                client.cn,
                self.space.header_addr(lock_id),
                faa_delta(release_action(mode), self.layout),
                tag="rel",
                piggyback=(self.space.queue_addr(lock_id), self.layout.capacity * 8),
            )
            try:
                word, raw = yield self.fabric.post_op(op)
            except OperationAborted:
                report.aborted = True
                return report
            self.stats.releases += 1
            old = decode_header(word, self.layout)
            if old.reset_id:
                self.stats.aborted_releases += 1
                report.aborted = True
                return report

            try:
                view = yield from self.resolve_queue(client, lock_id, raw, old, mode)
            except ResetRequired as e:
                self.stats.release_resets += 1
                report.reset = e.occasion
                logger.info("%s release of lock %d needs reset: %s", client, lock_id, e)
                agent.note_released(lock_id)
                released = True
                yield from self._reset_retrying(client, lock_id, e.occasion)
                return report
            except OperationAborted:
                report.aborted = True
                return report

            report.refetches = view.refetches
            grant_mode = LockMode.EXCLUSIVE
            for target in view.targets:
                grant_mode = target.entry.mode
                self._notify(client, lock_id, target, view, grant_mode, reset_count)
            report.notified = len(view.targets)
            return report
        finally:
            if not released:
                agent.note_released(lock_id)

    def _reset_retrying(self, client: Client, lock_id: int, occasion: ResetOccasion) -> Generator[simpy.Event, Any, None]:
        while True:
            try:
                yield from self.resets.reset(client, lock_id, occasion)
                return
            except OperationAborted:
                yield self.sim.sleep(self.config.retry_backoff_us)

    def resolve_queue(
        self,
        client: Client,
        lock_id: int,
        raw: bytes,
        old: LockHeader,
        releasing_mode: LockMode,
    ) -> Generator[simpy.Event, Any, QueueView]:
        """Classify queue entries behind the releaser and pick whom to notify.

        Raises ResetRequired on overwrite, version overflow or when refetching
        exceeds its time budget.
        """
        layout = self.layout
        capacity = layout.capacity
        _, next_version = slot_of(old.qhead, 1, layout)
        if detect_reset_occasion(computed_version=next_version) is ResetOccasion.VERSION_OVERFLOW:
            raise ResetRequired(ResetOccasion.VERSION_OVERFLOW, f"lock {lock_id} at traversal {next_version}")
        if old.qsize > capacity:
            raise ResetRequired(ResetOccasion.OVERWRITE, f"qsize {old.qsize} exceeds capacity {capacity}")
        view = QueueView(old=old, slots=[])
        if old.qsize <= 1:
            return view

        entries = decode_queue(raw)
        for offset in range(1, old.qsize):
            slot, version = slot_of(old.qhead, offset, layout)
            if detect_reset_occasion(computed_version=version) is ResetOccasion.VERSION_OVERFLOW:
                raise ResetRequired(ResetOccasion.VERSION_OVERFLOW, f"lock {lock_id} offset {offset}")
            view.slots.append(SlotView(offset, slot, version, entries[slot]))
        self._check_overwrite(lock_id, view)

        deadline = self.sim.now + self.config.refetch_budget
        if releasing_mode is LockMode.EXCLUSIVE:
            yield from self._resolve_after_writer(client, lock_id, view, deadline)
        else:
            yield from self._resolve_after_reader(client, lock_id, view, deadline)
        return view

    def _check_overwrite(self, lock_id: int, view: QueueView) -> None:
        for s in view.slots:
            occasion = detect_reset_occasion(fetched_version=s.entry.version, expected_version=s.version)
            if occasion is ResetOccasion.OVERWRITE:
                raise ResetRequired(occasion, f"lock {lock_id} slot {s.slot} v{s.entry.version} > v{s.version}")

    def _refetch_slot(self, client: Client, lock_id: int, s: SlotView, view: QueueView, deadline: float):
        while not s.valid:
            if self.sim.now > deadline:
                raise ResetRequired(ResetOccasion.TIMEOUT, f"lock {lock_id} slot {s.slot} never became valid")
            raw = yield self.fabric.post_op(
                FabricOp.read(client.cn, self.space.entry_addr(lock_id, s.slot), tag="refetch")
            )
            view.refetches += 1
            self.stats.refetches += 1
            s.entry = QueueEntry.decode(int.from_bytes(raw, "little"))
            self._check_overwrite(lock_id, view)

    def _resolve_after_writer(self, client, lock_id, view: QueueView, deadline: float):
        # Successor plus every adjacent reader behind it.
        for s in view.slots:
            yield from self._refetch_slot(client, lock_id, s, view, deadline)
            if s.entry.mode is LockMode.EXCLUSIVE:
                if not view.targets:
                    view.targets.append(s)
                return
            view.targets.append(s)

    def _resolve_after_reader(self, client, lock_id, view: QueueView, deadline: float):
        expected_writers = view.old.wcnt
        while True:
            writers = sum(1 for s in view.slots if s.valid and s.entry.mode is LockMode.EXCLUSIVE)
            if writers >= expected_writers:
                break
            if self.sim.now > deadline:
                raise ResetRequired(ResetOccasion.TIMEOUT, f"lock {lock_id}: {writers}/{expected_writers} writers visible")
            raw = yield self.fabric.post_op(
                FabricOp.read(
                    client.cn, self.space.queue_addr(lock_id), self.layout.capacity * 8, tag="refetch"
                )
            )
            view.refetches += 1
            self.stats.refetches += 1
            entries = decode_queue(raw)
            for s in view.slots:
                s.entry = entries[s.slot]
            self._check_overwrite(lock_id, view)
        successor = view.slots[0]
        if successor.valid and successor.entry.mode is LockMode.EXCLUSIVE:
            view.targets.append(successor)

    def _notify(
        self,
        client: Client,
        lock_id: int,
        target: SlotView,
        view: QueueView,
        grant_mode: LockMode,
        reset_count: int,
    ) -> None:
        target_cn = self.cn_of_cid[target.entry.cid]
        chosen = {id(t) for t in view.targets}
        earliest = None
        for s in view.slots:
            if id(s) in chosen or not s.valid:
                continue
            if self.cn_of_cid.get(s.entry.cid) == target_cn:
                continue
            if earliest is None or ts_earlier(s.entry.ts, earliest):
                earliest = s.entry.ts
        n = Notification(
            lock_id=lock_id,
            grant_mode=grant_mode,
            reset_count=reset_count,
            earliest_remote_ts=earliest,
            target_cid=target.entry.cid,
            sender_cid=client.cid,
        )
        self.stats.notifications += 1
        logger.debug("%s notifies c%d on lock %d", client, target.entry.cid, lock_id)
        if target_cn == client.cn:
            self.sim.call_soon(self.agents[target_cn].deliver, n)
        else:
            self.fabric.send_message(client.cn, target_cn, n, tag="notify")


class CqlLock:
    """Flat (non-hierarchical) CQL lock: every client talks to the MN directly."""

    def __init__(self, protocol: CqlProtocol):
        self.protocol = protocol

    def acquire(self, client: Client, lock_id: int, mode: LockMode, ts: int = 0):
        return (yield from self.protocol.acquire(client, lock_id, mode, ts))

    def release(self, client: Client, lock_id: int, mode: LockMode, grant: Grant):
        return (yield from self.protocol.release(client, lock_id, mode, grant.reset_count))
