"""Comparison locks: a reader-writer CAS spinlock and a ticket lock with truncated exponential backoff.

Both keep one 8-byte word per lock on the MN and have no reset procedure.
"""

import logging
from collections.abc import Generator
from dataclasses import dataclass
from typing import Any

import simpy

from src.agent import Client
from src.config import BackoffConfig
from src.fabric import Fabric, FabricOp, OperationAborted
from src.wire import MASK64, WORD, LockMode

logger = logging.getLogger(__name__)

WRITER_SHIFT = 48
READER_MASK = (1 << WRITER_SHIFT) - 1

RT_SHIFT, WT_SHIFT, RS_SHIFT, WS_SHIFT = 0, 16, 32, 48
COUNTER_MASK = 0xFFFF
WRAP_THRESHOLD = 0x8000


class LockTimeout(TimeoutError):
    """A spinning acquisition exceeded its bound. Reported, never reset."""


def truncated_backoff(attempt: int, base: float, cap: float) -> float:
    return min(base * (2**attempt), cap)


@dataclass(frozen=True)
class RwSpinWord:
    writer: int = 0
    readers: int = 0

    def encode(self) -> int:
        return (self.writer << WRITER_SHIFT) | (self.readers & READER_MASK)

    @classmethod
    def decode(cls, word: int) -> "RwSpinWord":
        return cls(writer=word >> WRITER_SHIFT, readers=word & READER_MASK)


@dataclass(frozen=True)
class TicketWord:
    read_ticket: int = 0
    write_ticket: int = 0
    read_served: int = 0
    write_served: int = 0

    def encode(self) -> int:
        return (
            (self.read_ticket << RT_SHIFT)
            | (self.write_ticket << WT_SHIFT)
            | (self.read_served << RS_SHIFT)
            | (self.write_served << WS_SHIFT)
        )

    @classmethod
    def decode(cls, word: int) -> "TicketWord":
        return cls(
            read_ticket=(word >> RT_SHIFT) & COUNTER_MASK,
            write_ticket=(word >> WT_SHIFT) & COUNTER_MASK,
            read_served=(word >> RS_SHIFT) & COUNTER_MASK,
            write_served=(word >> WS_SHIFT) & COUNTER_MASK,
        )

    @property
    def overflowed(self) -> bool:
        return self.read_ticket >= WRAP_THRESHOLD or self.write_ticket >= WRAP_THRESHOLD


@dataclass
class BaselineGrant:
    mode: LockMode
    seq: int = -1
    attempts: int = 0
    retries: int = 0
    draw: TicketWord | None = None
    wrap_resetter: bool = False


@dataclass
class BaselineStats:
    acquisitions: int = 0
    retries: int = 0
    polls: int = 0
    timeouts: int = 0
    wrap_resets: int = 0


class _WordLocks:
    def __init__(self, fabric: Fabric, base: int, num_locks: int, backoff: BackoffConfig):
        self.fabric = fabric
        self.sim = fabric.sim
        self.base = base
        self.num_locks = num_locks
        self.backoff = backoff
        self.stats = BaselineStats()

    def addr(self, lock_id: int) -> int:
        if not 0 <= lock_id < self.num_locks:
            raise IndexError(f"lock {lock_id} outside [0, {self.num_locks})")
        return self.base + lock_id * WORD

    def _post_retrying(self, op_factory) -> Generator[simpy.Event, Any, Any]:
        """Re-issue an op that was dropped by MN recovery; it never took effect."""
        while True:
            try:
                return (yield self.fabric.post_op(op_factory()))
            except OperationAborted:
                yield self.sim.sleep(self.backoff.base_us)


class CasLock(_WordLocks):
    """Word = writer cid in bits 48..63, reader count below. Free iff 0."""

    def acquire(self, client: Client, lock_id: int, mode: LockMode, ts: int = 0):
        return (yield from self.cas_acquire(client, lock_id, mode))

    def release(self, client: Client, lock_id: int, mode: LockMode, grant: BaselineGrant):
        return (yield from self.cas_release(client, lock_id, mode))

    def cas_acquire(self, client: Client, lock_id: int, mode: LockMode) -> Generator[simpy.Event, Any, BaselineGrant]:
        addr = self.addr(lock_id)
        deadline = self.sim.now + self.backoff.spin_timeout_us
        grant = BaselineGrant(mode=mode)
        expected = 0
        while True:
            if mode is LockMode.EXCLUSIVE:
                expected, swap = 0, RwSpinWord(writer=client.cid).encode()
            else:
                swap = expected + 1
            op = FabricOp.cas(client.cn, addr, expected, swap, tag="acq")
            try:
                old = yield self.fabric.post_op(op)
            except OperationAborted:
                continue
            grant.attempts += 1
            if old == expected:
                grant.retries = grant.attempts - 1
                grant.seq = op.service_seq
                self.stats.acquisitions += 1
                self.stats.retries += grant.retries
                return grant
            if mode is LockMode.SHARED:
                expected = old & READER_MASK
            if self.sim.now > deadline:
                self.stats.timeouts += 1
                raise LockTimeout(f"{client} spun {grant.attempts} CAS on lock {lock_id}")

    def cas_release(self, client: Client, lock_id: int, mode: LockMode) -> Generator[simpy.Event, Any, None]:
        addr = self.addr(lock_id)
        if mode is LockMode.EXCLUSIVE:
            yield from self._post_retrying(lambda: FabricOp.write_word(client.cn, addr, 0, tag="rel"))
        else:
            yield from self._post_retrying(lambda: FabricOp.faa(client.cn, addr, -1 & MASK64, tag="rel"))


class TicketLock(_WordLocks):
    """Bakery tickets for readers and writers in four 16-bit counters of one word."""

    def acquire(self, client: Client, lock_id: int, mode: LockMode, ts: int = 0):
        return (yield from self.ticket_acquire(client, lock_id, mode))

    def release(self, client: Client, lock_id: int, mode: LockMode, grant: BaselineGrant):
        return (yield from self.ticket_release(client, lock_id, mode, grant))

    def _read(self, client: Client, addr: int, tag: str) -> Generator[simpy.Event, Any, TicketWord]:
        raw = yield from self._post_retrying(lambda: FabricOp.read(client.cn, addr, tag=tag))
        return TicketWord.decode(int.from_bytes(raw, "little"))

    def ticket_acquire(self, client: Client, lock_id: int, mode: LockMode) -> Generator[simpy.Event, Any, BaselineGrant]:
        addr = self.addr(lock_id)
        deadline = self.sim.now + self.backoff.spin_timeout_us
        shift = RT_SHIFT if mode is LockMode.SHARED else WT_SHIFT
        grant = BaselineGrant(mode=mode)
        while True:
            op = FabricOp.faa(client.cn, addr, 1 << shift, tag="acq")
            try:
                prev = yield self.fabric.post_op(op)
            except OperationAborted:
                continue
            grant.attempts += 1
            draw = TicketWord.decode(prev)
            if not draw.overflowed:
                break
            # Past the wrap threshold: wait for the resetter to zero the word.
            attempt = 0
            while True:
                yield self.sim.sleep(truncated_backoff(attempt, self.backoff.base_us, self.backoff.cap_us))
                attempt += 1
                current = yield from self._read(client, addr, "acq")
                if not current.overflowed:
                    break

        mine = draw.read_ticket if mode is LockMode.SHARED else draw.write_ticket
        grant.draw = draw
        grant.seq = op.service_seq
        grant.wrap_resetter = mine + 1 == WRAP_THRESHOLD
        current = draw
        attempt = 0
        while not self._ready(current, draw, mode):
            if self.sim.now > deadline:
                self.stats.timeouts += 1
                raise LockTimeout(f"{client} polled {attempt} times on lock {lock_id}")
            yield self.sim.sleep(truncated_backoff(attempt, self.backoff.base_us, self.backoff.cap_us))
            attempt += 1
            current = yield from self._read(client, addr, "acq")
        grant.retries = attempt
        self.stats.acquisitions += 1
        self.stats.polls += attempt
        return grant

    @staticmethod
    def _ready(current: TicketWord, draw: TicketWord, mode: LockMode) -> bool:
        if current.write_served != draw.write_ticket:
            return False
        return mode is LockMode.SHARED or current.read_served == draw.read_ticket

    def ticket_release(
        self, client: Client, lock_id: int, mode: LockMode, grant: BaselineGrant
    ) -> Generator[simpy.Event, Any, None]:
        addr = self.addr(lock_id)
        if grant.wrap_resetter:
            yield from self._wrap_reset(client, lock_id, mode, grant)
            return
        shift = RS_SHIFT if mode is LockMode.SHARED else WS_SHIFT
        yield from self._post_retrying(lambda: FabricOp.faa(client.cn, addr, 1 << shift, tag="rel"))

    def _wrap_reset(
        self, client: Client, lock_id: int, mode: LockMode, grant: BaselineGrant
    ) -> Generator[simpy.Event, Any, None]:
        """Last valid ticket holder: wait for earlier holders to leave, then zero the word."""
        addr = self.addr(lock_id)
        draw = grant.draw
        attempt = 0
        while True:
            current = yield from self._read(client, addr, "rel")
            if current.read_served == draw.read_ticket and current.write_served == draw.write_ticket:
                break
            yield self.sim.sleep(truncated_backoff(attempt, self.backoff.base_us, self.backoff.cap_us))
            attempt += 1
        yield from self._post_retrying(lambda: FabricOp.write_word(client.cn, addr, 0, tag="rel"))
        self.stats.wrap_resets += 1
        logger.info("ticket lock %d wrapped by %s", lock_id, client)
