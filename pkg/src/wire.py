"""Bit-exact lock memory formats and CN-to-CN message types.

MN layout of one CQL lock: an 8-byte header followed by C 8-byte queue entries,
contiguous, little-endian.

Header, from the least significant bit:
    resetId [0, K) | wcnt [K, K+N) | qsize [K+N, K+2N) | qhead [K+2N, 64)
with C = 2**(N-1). qhead is a free-running counter; its top bits above the
slot index are the traversal count that versions the entries.

Queue entry:
    version [0, 16) | ts [16, 32) | cid [32, 48) | mode [48, 56) | reserved [56, 64)
"""

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

WORD = 8
MASK64 = (1 << 64) - 1
VERSION_BITS = 16
VERSION_MASK = (1 << VERSION_BITS) - 1
INITIAL_VERSION = VERSION_MASK
TS_MASK = 0xFFFF


class FieldOverflow(ValueError):
    pass


class LockMode(IntEnum):
    SHARED = 0
    EXCLUSIVE = 1

    @property
    def short(self) -> str:
        return "S" if self is LockMode.SHARED else "X"


class Action(Enum):
    ACQ_SHARED = "AcqShared"
    ACQ_EXCLUSIVE = "AcqExclusive"
    REL_READER = "RelReader"
    REL_WRITER = "RelWriter"


@dataclass(frozen=True)
class HeaderLayout:
    reset_id_bits: int = 8
    size_bits: int = 4

    def __post_init__(self):
        if self.reset_id_bits < 1 or self.size_bits < 2:
            raise ValueError(f"bad header layout K={self.reset_id_bits} N={self.size_bits}")
        if self.extra_bits < VERSION_BITS:
            raise ValueError(
                f"layout K={self.reset_id_bits} N={self.size_bits} leaves {self.extra_bits} "
                f"traversal bits, need {VERSION_BITS}"
            )

    @classmethod
    def for_capacity(cls, capacity: int, reset_id_bits: int = 8) -> "HeaderLayout":
        if capacity < 2 or capacity & (capacity - 1):
            raise ValueError(f"queue capacity must be a power of two >= 2, got {capacity}")
        return cls(reset_id_bits=reset_id_bits, size_bits=capacity.bit_length())

    @property
    def capacity(self) -> int:
        return 1 << (self.size_bits - 1)

    @property
    def wcnt_shift(self) -> int:
        return self.reset_id_bits

    @property
    def qsize_shift(self) -> int:
        return self.reset_id_bits + self.size_bits

    @property
    def qhead_shift(self) -> int:
        return self.reset_id_bits + 2 * self.size_bits

    @property
    def qhead_bits(self) -> int:
        return 64 - self.qhead_shift

    @property
    def extra_bits(self) -> int:
        return self.qhead_bits - (self.size_bits - 1)

    @property
    def lock_bytes(self) -> int:
        return WORD * (1 + self.capacity)


@dataclass(frozen=True)
class LockHeader:
    qhead: int = 0
    qsize: int = 0
    wcnt: int = 0
    reset_id: int = 0


def encode_header(h: LockHeader, layout: HeaderLayout) -> int:
    widths = {
        "reset_id": layout.reset_id_bits,
        "wcnt": layout.size_bits,
        "qsize": layout.size_bits,
        "qhead": layout.qhead_bits,
    }
    for name, bits in widths.items():
        value = getattr(h, name)
        if not 0 <= value < (1 << bits):
            raise FieldOverflow(f"{name}={value} does not fit in {bits} bits")
    return (
        h.reset_id
        | (h.wcnt << layout.wcnt_shift)
        | (h.qsize << layout.qsize_shift)
        | (h.qhead << layout.qhead_shift)
    )


def decode_header(word: int, layout: HeaderLayout) -> LockHeader:
    size_mask = (1 << layout.size_bits) - 1
    return LockHeader(
        qhead=(word & MASK64) >> layout.qhead_shift,
        qsize=(word >> layout.qsize_shift) & size_mask,
        wcnt=(word >> layout.wcnt_shift) & size_mask,
        reset_id=word & ((1 << layout.reset_id_bits) - 1),
    )


def faa_delta(action: Action, layout: HeaderLayout) -> int:
    """64-bit wrapping addend that applies `action` to a header in one FAA."""
    one_qsize = 1 << layout.qsize_shift
    one_wcnt = 1 << layout.wcnt_shift
    one_qhead = 1 << layout.qhead_shift
    if action is Action.ACQ_SHARED:
        delta = one_qsize
    elif action is Action.ACQ_EXCLUSIVE:
        delta = one_qsize + one_wcnt
    elif action is Action.REL_READER:
        delta = one_qhead - one_qsize
    else:
        delta = one_qhead - one_qsize - one_wcnt
    return delta & MASK64


def acquire_action(mode: LockMode) -> Action:
    return Action.ACQ_SHARED if mode is LockMode.SHARED else Action.ACQ_EXCLUSIVE


def release_action(mode: LockMode) -> Action:
    return Action.REL_READER if mode is LockMode.SHARED else Action.REL_WRITER


def traversal_of(qhead: int, offset: int, layout: HeaderLayout) -> int:
    """Raw (unwrapped) traversal count of queue position qhead + offset."""
    return (qhead + offset) // layout.capacity


def slot_of(qhead: int, offset: int, layout: HeaderLayout) -> tuple[int, int]:
    absolute = qhead + offset
    return absolute % layout.capacity, (absolute // layout.capacity) & VERSION_MASK


@dataclass(frozen=True)
class QueueEntry:
    version: int = INITIAL_VERSION
    ts: int = 0
    cid: int = 0
    mode: LockMode = LockMode.SHARED

    def encode(self) -> int:
        return (
            (self.version & VERSION_MASK)
            | ((self.ts & TS_MASK) << 16)
            | ((self.cid & 0xFFFF) << 32)
            | (int(self.mode) << 48)
        )

    @classmethod
    def decode(cls, word: int) -> "QueueEntry":
        return cls(
            version=word & VERSION_MASK,
            ts=(word >> 16) & TS_MASK,
            cid=(word >> 32) & 0xFFFF,
            mode=LockMode((word >> 48) & 0x1),
        )

    def to_bytes(self) -> bytes:
        return self.encode().to_bytes(WORD, "little")


EMPTY_ENTRY_WORD = QueueEntry().encode()


def decode_queue(raw: bytes) -> list[QueueEntry]:
    words = np.frombuffer(raw, dtype="<u8")
    return [QueueEntry.decode(int(w)) for w in words]


@dataclass(frozen=True)
class LockSpace:
    """Placement of `num_locks` CQL locks at `base` in MN memory."""

    base: int
    num_locks: int
    layout: HeaderLayout

    @property
    def nbytes(self) -> int:
        return self.num_locks * self.layout.lock_bytes

    def header_addr(self, lock_id: int) -> int:
        if not 0 <= lock_id < self.num_locks:
            raise IndexError(f"lock {lock_id} outside [0, {self.num_locks})")
        return self.base + lock_id * self.layout.lock_bytes

    def queue_addr(self, lock_id: int) -> int:
        return self.header_addr(lock_id) + WORD

    def entry_addr(self, lock_id: int, slot: int) -> int:
        return self.queue_addr(lock_id) + slot * WORD

    def _table(self, words: np.ndarray) -> np.ndarray:
        start = self.base // WORD
        rows = words[start : start + self.num_locks * (1 + self.layout.capacity)]
        return rows.reshape(self.num_locks, 1 + self.layout.capacity)

    def initialize(self, words: np.ndarray) -> None:
        """Zero every header and set every entry to the initial version."""
        table = self._table(words)
        table[:, 0] = 0
        table[:, 1:] = EMPTY_ENTRY_WORD

    def dirty_locks(self, words: np.ndarray) -> list[int]:
        return [int(i) for i in np.flatnonzero(self._table(words)[:, 0])]

    def is_clean(self, words: np.ndarray, lock_id: int) -> bool:
        row = self._table(words)[lock_id]
        return bool(row[0] == 0 and np.all(row[1:] == EMPTY_ENTRY_WORD))


# -- CN-to-CN messages -------------------------------------------------------


@dataclass(frozen=True)
class Notification:
    lock_id: int
    grant_mode: LockMode
    reset_count: int
    earliest_remote_ts: int | None
    target_cid: int
    sender_cid: int


@dataclass(frozen=True)
class ResetSignal:
    lock_id: int
    reset_count: int
    initiator_cn: int
    key: int


@dataclass(frozen=True)
class ResetAck:
    lock_id: int
    key: int
    cn: int


# -- 16-bit synchronized timestamps -------------------------------------------

TS_HALF = 1 << 15


def ts_now(epoch_start: float, local_now: float) -> int:
    """Microseconds since the CN's sync epoch, modulo 2**16."""
    return int(local_now - epoch_start) & TS_MASK


def ts_earlier(a: int, b: int) -> bool:
    """True iff timestamp a precedes b under 16-bit wraparound.

    Within half the range the smaller value is earlier; beyond it the larger
    one is. Two stamps exactly half the range apart are unordered: neither
    is earlier than the other.
    """
    diff = (b - a) & TS_MASK
    return diff != 0 and diff < TS_HALF


def version_newer(a: int, b: int) -> bool:
    """True iff 16-bit entry version a was written after b.

    Versions wrap like timestamps, so this is the same half-window compare.
    """
    return ts_earlier(b & VERSION_MASK, a & VERSION_MASK)
