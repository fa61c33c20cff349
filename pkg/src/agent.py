"""Per-CN runtime shared by all clients on one compute node.

Routes notifications to waiting clients, keeps the CN's reset counters, and
defers reset acks until no local client holds or is mid-enqueue on the lock.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from src.fabric import Fabric, Future, NodeId
from src.reset import ResetState, Verdict, filter_notification
from src.wire import Notification, ResetAck, ResetSignal

if TYPE_CHECKING:
    from src.reset import ResetService

logger = logging.getLogger(__name__)


class AcquireAborted(RuntimeError):
    """The lock was reset while this client was waiting; retry the acquisition."""


@dataclass(frozen=True)
class Client:
    cid: int
    cn: NodeId

    def __str__(self) -> str:
        return f"c{self.cid}@{self.cn}"


class CnAgent:
    def __init__(self, fabric: Fabric, cn: NodeId, reset_state: ResetState):
        self.fabric = fabric
        self.sim = fabric.sim
        self.cn = cn
        self.reset_state = reset_state
        self.resets: "ResetService | None" = None
        self._waits: dict[tuple[int, int], Future] = {}
        self._holding: Counter = Counter()
        self._inflight: Counter = Counter()
        self._pending: dict[int, list[ResetSignal]] = {}
        self.delivered = 0
        self.dropped_expired = 0
        self.dropped_orphan = 0
        fabric.attach(cn, self.on_message)

    # -- bookkeeping used by the protocol layer -------------------------------

    def begin_op(self, lock_id: int) -> None:
        self._inflight[lock_id] += 1

    def end_op(self, lock_id: int) -> None:
        self._inflight[lock_id] -= 1
        self._maybe_ack(lock_id)

    def note_granted(self, lock_id: int) -> None:
        self._holding[lock_id] += 1

    def note_released(self, lock_id: int) -> None:
        self._holding[lock_id] -= 1
        self._maybe_ack(lock_id)

    def holding(self, lock_id: int) -> int:
        return self._holding[lock_id]

    def reset_pending(self, lock_id: int) -> bool:
        return bool(self._pending.get(lock_id))

    def expect_notification(self, lock_id: int, cid: int) -> Future:
        fut = self.sim.future()
        self._waits[(lock_id, cid)] = fut
        return fut

    def cancel_wait(self, lock_id: int, cid: int) -> None:
        self._waits.pop((lock_id, cid), None)

    # -- inbound --------------------------------------------------------------

    def on_message(self, src: NodeId, payload: Any) -> None:
        if isinstance(payload, Notification):
            self.deliver(payload)
        elif isinstance(payload, ResetSignal):
            self.on_reset_signal(payload)
        elif isinstance(payload, ResetAck):
            if self.resets is not None:
                self.resets.on_ack(payload)
        else:
            raise TypeError(f"{self.cn} got unexpected message {payload!r} from {src}")

    def deliver(self, n: Notification) -> None:
        if filter_notification(n, self.reset_state) is Verdict.DROP:
            self.dropped_expired += 1
            logger.debug("%s dropped expired notification %s", self.cn, n)
            return
        fut = self._waits.pop((n.lock_id, n.target_cid), None)
        if fut is None:
            self.dropped_orphan += 1
            logger.debug("%s has no waiter for %s", self.cn, n)
            return
        self.delivered += 1
        self._holding[n.lock_id] += 1
        fut.resolve(n)

    def on_reset_signal(self, signal: ResetSignal) -> None:
        self.reset_state.synchronize(signal.lock_id, signal.reset_count)
        self._pending.setdefault(signal.lock_id, []).append(signal)
        aborted = [key for key in self._waits if key[0] == signal.lock_id]
        for key in aborted:
            self._waits.pop(key).fail(AcquireAborted(f"lock {signal.lock_id} is being reset"))
        self._maybe_ack(signal.lock_id)

    def _maybe_ack(self, lock_id: int) -> None:
        if self._holding[lock_id] > 0 or self._inflight[lock_id] > 0:
            return
        signals = self._pending.pop(lock_id, None)
        if not signals:
            return
        for signal in signals:
            ack = ResetAck(lock_id=lock_id, key=signal.key, cn=self.cn.index)
            initiator = NodeId.cn(signal.initiator_cn)
            if initiator == self.cn:
                if self.resets is not None:
                    self.sim.call_soon(self.resets.on_ack, ack)
            else:
                self.fabric.send_message(self.cn, initiator, ack, tag="reset")
