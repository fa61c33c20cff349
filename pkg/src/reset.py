"""Stuck-lock detection and the three-step lock reset.

Step 1: CAS the header's resetId to the initiator's CN id (one winner).
Step 2: broadcast a reset signal to every live CN and wait for their acks;
        a CN acks once none of its clients holds or is mid-enqueue on the lock.
Step 3: WRITE all queue entries back to the initial version, then WRITE the
        header to 0.
"""

import itertools
import logging
from collections.abc import Generator
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any

import simpy

from src.config import ResetConfig
from src.fabric import Fabric, FabricOp, Future, NodeId, OperationAborted
from src.wire import (
    EMPTY_ENTRY_WORD,
    INITIAL_VERSION,
    WORD,
    LockSpace,
    Notification,
    ResetAck,
    ResetSignal,
    decode_header,
    encode_header,
    version_newer,
)

if TYPE_CHECKING:
    from src.agent import Client, CnAgent

logger = logging.getLogger(__name__)


class ResetOccasion(str, Enum):
    NONE = "none"
    OVERWRITE = "overwrite"
    VERSION_OVERFLOW = "version_overflow"
    TIMEOUT = "timeout"
    RECOVERY = "recovery"


class ResetOutcome(str, Enum):
    WON = "won"
    LOST = "lost"


class Verdict(str, Enum):
    DELIVER = "deliver"
    DROP = "drop"


class ResetRequired(Exception):
    """Raised inside the release path when the queue cannot be resolved."""

    def __init__(self, occasion: ResetOccasion, detail: str = ""):
        self.occasion = occasion
        super().__init__(f"{occasion.value}: {detail}" if detail else occasion.value)


def detect_reset_occasion(
    *,
    fetched_version: int | None = None,
    expected_version: int | None = None,
    computed_version: int | None = None,
    waited_us: float | None = None,
    timeout_us: float | None = None,
) -> ResetOccasion:
    """Classify one observation.

    "Newer" uses the half-window wraparound compare shared with timestamps.
    The initial version marks an entry that was never written and is not an
    overwrite.
    """
    if computed_version is not None and computed_version == INITIAL_VERSION:
        return ResetOccasion.VERSION_OVERFLOW
    if (
        fetched_version is not None
        and expected_version is not None
        and fetched_version != INITIAL_VERSION
        and version_newer(fetched_version, expected_version)
    ):
        return ResetOccasion.OVERWRITE
    if waited_us is not None and timeout_us is not None and waited_us > timeout_us:
        return ResetOccasion.TIMEOUT
    return ResetOccasion.NONE


@dataclass
class ResetState:
    """Per-CN reset counters, one per lock. Monotone."""

    acquisition_timeout_us: float = 10_000.0
    counters: dict[int, int] = field(default_factory=dict)

    def count(self, lock_id: int) -> int:
        return self.counters.get(lock_id, 0)

    def synchronize(self, lock_id: int, value: int) -> None:
        if value > self.count(lock_id):
            self.counters[lock_id] = value


def filter_notification(n: Notification, state: ResetState) -> Verdict:
    if n.reset_count < state.count(n.lock_id):
        return Verdict.DROP
    return Verdict.DELIVER


@dataclass
class _AckBarrier:
    done: Future
    waiting: set[int]

    def discard(self, cn_index: int) -> None:
        self.waiting.discard(cn_index)
        if not self.waiting:
            self.done.resolve()


class ResetService:
    def __init__(
        self,
        fabric: Fabric,
        space: LockSpace,
        agents: dict[NodeId, "CnAgent"],
        config: ResetConfig,
    ):
        self.fabric = fabric
        self.sim = fabric.sim
        self.space = space
        self.agents = agents
        self.config = config
        self._keys = itertools.count(1)
        self._barriers: dict[int, _AckBarrier] = {}
        self.completed = 0
        self.lost = 0
        self.takeovers = 0
        self.unclean = 0
        self.latencies: list[float] = []
        self.by_occasion: dict[str, int] = {}
        fabric.on_failure(self._on_node_failed)

    # -- step 1 ---------------------------------------------------------------

    def try_begin_reset(
        self, client: "Client", lock_id: int, observed: int | None = None
    ) -> Generator[simpy.Event, Any, ResetOutcome]:
        layout = self.space.layout
        addr = self.space.header_addr(lock_id)
        if observed is None:
            observed = yield self.fabric.post_op(FabricOp.read(client.cn, addr, tag="reset"))
            observed = int.from_bytes(observed, "little")
        while True:
            header = decode_header(observed, layout)
            if header.reset_id:
                owner = NodeId.cn(header.reset_id)
                if not self.fabric.is_failed(owner):
                    self.lost += 1
                    return ResetOutcome.LOST
                self.takeovers += 1
                logger.info("CN%d taking over reset of lock %d from failed %s", client.cn.index, lock_id, owner)
            claim = encode_header(replace(header, reset_id=client.cn.index), layout)
            old = yield self.fabric.post_op(FabricOp.cas(client.cn, addr, observed, claim, tag="reset"))
            if old == observed:
                self.fabric.trace.emit(self.sim.now, "reset", lockId=lock_id, phase="begin", cn=client.cn.index)
                return ResetOutcome.WON
            observed = old

    # -- steps 2 and 3 --------------------------------------------------------

    def execute_reset(
        self, client: "Client", lock_id: int, occasion: ResetOccasion = ResetOccasion.TIMEOUT
    ) -> Generator[simpy.Event, Any, None]:
        own = client.cn
        started = self.sim.now
        count = self.agents[own].reset_state.count(lock_id) + 1
        key = next(self._keys)
        live = self.fabric.live_cns()
        barrier = _AckBarrier(self.sim.future(), {cn.index for cn in live})
        self._barriers[key] = barrier
        trace = self.fabric.trace
        trace.emit(self.sim.now, "reset", lockId=lock_id, phase="signal", cn=own.index, occasion=occasion.value)
        signal = ResetSignal(lock_id=lock_id, reset_count=count, initiator_cn=own.index, key=key)
        for cn in live:
            if cn == own:
                self.agents[cn].on_reset_signal(signal)
            else:
                self.fabric.send_message(own, cn, signal, tag="reset")
        try:
            yield barrier.done
        finally:
            self._barriers.pop(key, None)
        trace.emit(self.sim.now, "reset", lockId=lock_id, phase="ack", cn=own.index)

        capacity = self.space.layout.capacity
        chunk = max(1, self.fabric.config.max_io_bytes // WORD)
        for first in range(0, capacity, chunk):
            n = min(chunk, capacity - first)
            payload = EMPTY_ENTRY_WORD.to_bytes(WORD, "little") * n
            addr = self.space.entry_addr(lock_id, first)
            yield self.fabric.post_op(FabricOp.write(own, addr, payload, tag="reset"))

        verdict = {}

        def _verify(op: FabricOp) -> None:
            verdict["clean"] = self.space.is_clean(self.fabric.words, lock_id)

        header_op = FabricOp.write_word(own, self.space.header_addr(lock_id), 0, tag="reset")
        header_op.on_service = _verify
        yield self.fabric.post_op(header_op)

        clean = verdict.get("clean", False)
        if not clean:
            self.unclean += 1
            logger.warning("reset of lock %d left a dirty post-state", lock_id)
        self.completed += 1
        self.by_occasion[occasion.value] = self.by_occasion.get(occasion.value, 0) + 1
        self.latencies.append(self.sim.now - started)
        trace.emit(self.sim.now, "reset", lockId=lock_id, phase="done", cn=own.index, clean=clean)
        logger.info("lock %d reset by CN%d (%s) in %.2fus", lock_id, own.index, occasion.value, self.sim.now - started)

    def reset(
        self,
        client: "Client",
        lock_id: int,
        occasion: ResetOccasion,
        observed: int | None = None,
    ) -> Generator[simpy.Event, Any, ResetOutcome]:
        """Try to run a full reset; losers wait for the winner to finish."""
        outcome = yield from self.try_begin_reset(client, lock_id, observed)
        if outcome is ResetOutcome.WON:
            yield from self.execute_reset(client, lock_id, occasion)
        else:
            yield from self.wait_reset_done(client, lock_id)
        return outcome

    def wait_reset_done(self, client: "Client", lock_id: int) -> Generator[simpy.Event, Any, None]:
        """Poll the header until resetId is 0, taking over if its owner failed."""
        addr = self.space.header_addr(lock_id)
        delay = self.config.retry_backoff_us
        while True:
            raw = yield self.fabric.post_op(FabricOp.read(client.cn, addr, tag="reset"))
            word = int.from_bytes(raw, "little")
            header = decode_header(word, self.space.layout)
            if not header.reset_id:
                return
            if self.fabric.is_failed(NodeId.cn(header.reset_id)):
                outcome = yield from self.try_begin_reset(client, lock_id, word)
                if outcome is ResetOutcome.WON:
                    yield from self.execute_reset(client, lock_id, ResetOccasion.TIMEOUT)
                    return
            yield self.sim.sleep(delay)
            delay = min(delay * 2, self.config.retry_backoff_cap_us)

    # -- acks and failures ----------------------------------------------------

    def on_ack(self, ack: ResetAck) -> None:
        barrier = self._barriers.get(ack.key)
        if barrier is not None:
            barrier.discard(ack.cn)

    def _on_node_failed(self, node: NodeId) -> None:
        for barrier in list(self._barriers.values()):
            barrier.discard(node.index)

    # -- MN recovery ----------------------------------------------------------

    def recover_locks(self, client: "Client") -> Generator[simpy.Event, Any, int]:
        """Reset every lock left non-free when the MN failed."""
        dirty = self.space.dirty_locks(self.fabric.words)
        logger.info("MN recovery: CN%d resetting %d lock(s)", client.cn.index, len(dirty))
        for lock_id in dirty:
            while True:
                try:
                    yield from self.reset(client, lock_id, ResetOccasion.RECOVERY)
                    break
                except OperationAborted:
                    yield self.sim.sleep(self.config.retry_backoff_us)
        return len(dirty)
