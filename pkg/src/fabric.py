"""Deterministic discrete-event fabric.

One MN holding all lock memory, N CNs issuing one-sided verbs (READ, WRITE, CAS,
FAA) through a token-bucket MN-NIC, plus reliable in-order CN-to-CN messages.
Simulated processes are generators run as simpy processes; they yield simpy
events (Futures, timeouts, mutex requests). All times are microseconds. simpy
orders same-instant events by insertion, so two runs with the same inputs
produce identical traces.
"""

import itertools
import json
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Callable, Generator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import simpy

from src.config import FabricConfig

logger = logging.getLogger(__name__)

WORD = 8
MASK64 = (1 << 64) - 1


class DestinationFailed(RuntimeError):
    pass


class InvalidAddr(ValueError):
    pass


class OperationAborted(RuntimeError):
    """A verb stalled at a failed MN was dropped when the MN recovered."""


class WaitTimeout(TimeoutError):
    pass


class HorizonExceeded(RuntimeError):
    def __init__(self, horizon: float, stuck: list[str]):
        self.horizon = horizon
        self.stuck = stuck
        shown = ", ".join(stuck[:8]) + (" ..." if len(stuck) > 8 else "")
        super().__init__(f"{len(stuck)} task(s) still running at horizon {horizon}us: {shown}")


# ---------------------------------------------------------------------------
# Simulator core
# ---------------------------------------------------------------------------


class Future(simpy.Event):
    """One-shot result. Resolving twice is a no-op and an unawaited failure is dropped."""

    @property
    def done(self) -> bool:
        return self.triggered

    def resolve(self, value: Any = None) -> None:
        if not self.triggered:
            self.succeed(value)

    def fail(self, error: BaseException) -> None:
        if self.triggered:
            return
        self.defused = True
        super().fail(error)


SimGen = Generator[simpy.Event, Any, Any]


class Task:
    """A simpy process, optionally owned by a node. Killing it interrupts the process."""

    def __init__(self, sim: "Simulator", gen: SimGen, name: str, owner: Any, daemon: bool, tid: int):
        self.sim = sim
        self.tid = tid
        self.name = name
        self.owner = owner
        self.daemon = daemon
        self.alive = True
        self.result = sim.env.process(self._run(gen))

    def __repr__(self) -> str:
        return f"Task({self.name})"

    def _run(self, gen: SimGen) -> SimGen:
        try:
            return (yield from gen)
        except simpy.Interrupt:
            return None
        finally:
            self.sim._retire(self)

    def kill(self) -> None:
        if not self.alive:
            return
        self.sim._retire(self)
        # A process killed before its first step fails with the Interrupt itself.
        self.result.defused = True
        self.result.interrupt("node failed")


class SimMutex:
    """FIFO mutex over a one-slot simpy Resource. acquire() returns a request to yield on."""

    def __init__(self, sim: "Simulator"):
        self._resource = simpy.Resource(sim.env, capacity=1)

    @property
    def locked(self) -> bool:
        # A released slot is handed to the next request one event later.
        return self._resource.count > 0 or bool(self._resource.queue)

    def acquire(self) -> simpy.Event:
        return self._resource.request()

    def release(self) -> None:
        self._resource.release(self._resource.users[0])


class Timer:
    __slots__ = ("fn", "args", "cancelled")

    def __init__(self, fn: Callable[..., None], args: tuple):
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def fire(self, _event: simpy.Event) -> None:
        if not self.cancelled:
            self.fn(*self.args)


class Simulator:
    """Thin layer over simpy.Environment: node-owned tasks, cancellable timers, horizon checks."""

    def __init__(self):
        self.env = simpy.Environment()
        self._task_ids = itertools.count()
        self._tasks: dict[int, Task] = {}
        self._live = 0
        self._daemons = 0

    @property
    def now(self) -> float:
        return self.env.now

    def at(self, t: float, fn: Callable[..., None], *args: Any) -> Timer:
        timer = Timer(fn, args)
        self.env.timeout(max(t - self.env.now, 0.0)).callbacks.append(timer.fire)
        return timer

    def schedule(self, delay: float, fn: Callable[..., None], *args: Any) -> Timer:
        return self.at(self.env.now + delay, fn, *args)

    def call_soon(self, fn: Callable[..., None], *args: Any) -> Timer:
        return self.at(self.env.now, fn, *args)

    def future(self) -> Future:
        return Future(self.env)

    def sleep(self, delay: float) -> simpy.Timeout:
        return self.env.timeout(delay)

    def with_timeout(self, fut: simpy.Event, timeout: float) -> Future:
        """Mirror `fut`, failing with WaitTimeout if it is not done within `timeout`."""
        out = Future(self.env)

        def _mirror(done: simpy.Event) -> None:
            timer.cancel()
            if done.ok:
                out.resolve(done.value)
            else:
                out.fail(done.value)

        timer = self.schedule(timeout, out.fail, WaitTimeout(f"no result within {timeout}us"))
        if fut.processed:
            _mirror(fut)
        else:
            fut.callbacks.append(_mirror)
        return out

    def spawn(self, gen: SimGen, name: str = "", owner: Any = None, daemon: bool = False) -> Task:
        tid = next(self._task_ids)
        if daemon:
            self._daemons += 1
        else:
            self._live += 1
        task = Task(self, gen, name or f"task-{tid}", owner, daemon, tid)
        self._tasks[tid] = task
        return task

    def _retire(self, task: Task) -> None:
        if not task.alive:
            return
        task.alive = False
        self._tasks.pop(task.tid, None)
        if task.daemon:
            self._daemons -= 1
        else:
            self._live -= 1

    def kill_owned_by(self, owner: Any) -> int:
        victims = [t for t in self._tasks.values() if t.owner == owner]
        for task in victims:
            task.kill()
        return len(victims)

    def live_task_names(self) -> list[str]:
        return [t.name for t in self._tasks.values() if not t.daemon]

    def run_until_quiescent(self, horizon: float | None = None) -> float:
        """Step the environment until it drains. Returns the final simulated time.

        Stops early once only daemon tasks remain. Raises HorizonExceeded if
        non-daemon tasks are still running when the next event lies past `horizon`
        or when no event is left to wake them.
        """
        env = self.env
        while (t := env.peek()) != math.inf:
            if self._daemons and not self._live:
                break
            if horizon is not None and t > horizon:
                if self._live:
                    raise HorizonExceeded(horizon, self.live_task_names())
                break
            env.step()
        else:
            if self._live:
                # Nothing left that could ever wake them.
                raise HorizonExceeded(self.now, self.live_task_names())
        return self.now


# ---------------------------------------------------------------------------
# Fabric
# ---------------------------------------------------------------------------


class NodeKind(str, Enum):
    CN = "CN"
    MN = "MN"


@dataclass(frozen=True, order=True)
class NodeId:
    kind: NodeKind
    index: int

    def __str__(self) -> str:
        return "MN" if self.kind is NodeKind.MN else f"CN{self.index}"

    @classmethod
    def cn(cls, index: int) -> "NodeId":
        return cls(NodeKind.CN, index)

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text == "MN":
            return MN
        if text.startswith("CN") and text[2:].isdigit():
            return cls.cn(int(text[2:]))
        raise ValueError(f"Unknown node name: {text!r}")


MN = NodeId(NodeKind.MN, 0)


class OpKind(str, Enum):
    READ = "READ"
    WRITE = "WRITE"
    CAS = "CAS"
    FAA = "FAA"


@dataclass(eq=False)
class FabricOp:
    kind: OpKind
    src: NodeId
    addr: int
    length: int = WORD
    expected: int = 0
    swap: int = 0
    addend: int = 0
    payload: bytes = b""
    piggyback: tuple[int, int] | None = None
    tag: str = ""
    on_service: Callable[["FabricOp"], None] | None = None
    service_seq: int = -1
    served_at: float = -1.0

    @classmethod
    def read(cls, src: NodeId, addr: int, length: int = WORD, tag: str = "") -> "FabricOp":
        return cls(OpKind.READ, src, addr, length=length, tag=tag)

    @classmethod
    def write(cls, src: NodeId, addr: int, payload: bytes, tag: str = "") -> "FabricOp":
        return cls(OpKind.WRITE, src, addr, length=len(payload), payload=payload, tag=tag)

    @classmethod
    def write_word(cls, src: NodeId, addr: int, value: int, tag: str = "") -> "FabricOp":
        return cls.write(src, addr, (value & MASK64).to_bytes(WORD, "little"), tag=tag)

    @classmethod
    def cas(cls, src: NodeId, addr: int, expected: int, swap: int, tag: str = "") -> "FabricOp":
        return cls(OpKind.CAS, src, addr, expected=expected & MASK64, swap=swap & MASK64, tag=tag)

    @classmethod
    def faa(
        cls,
        src: NodeId,
        addr: int,
        addend: int,
        tag: str = "",
        piggyback: tuple[int, int] | None = None,
    ) -> "FabricOp":
        return cls(OpKind.FAA, src, addr, addend=addend & MASK64, piggyback=piggyback, tag=tag)


@dataclass
class FabricStats:
    ops_by_tag: Counter = field(default_factory=Counter)
    ops_by_kind: Counter = field(default_factory=Counter)
    weighted_charge: float = 0.0
    bytes_moved: int = 0
    messages_sent: Counter = field(default_factory=Counter)
    messages_dropped: int = 0
    ops_aborted: int = 0


class Trace:
    """Append-only event log rendered as deterministic JSON lines."""

    def __init__(self, record_ops: bool = False):
        self.record_ops = record_ops
        self.records: list[dict[str, Any]] = []

    def emit(self, t: float, kind: str, **fields: Any) -> None:
        self.records.append({"t": round(t, 6), "kind": kind, **fields})

    def dumps(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @staticmethod
    def load(path: str | Path) -> list[dict[str, Any]]:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Trace not found: {path}")
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]


MessageHandler = Callable[[NodeId, Any], None]


class Fabric:
    """The CN/MN interconnect. All MN memory lives in one little-endian bytearray."""

    def __init__(
        self,
        sim: Simulator,
        config: FabricConfig,
        num_cns: int,
        *,
        memory_bytes: int | None = None,
        trace: Trace | None = None,
        clock_offsets: dict[NodeId, float] | None = None,
    ):
        self.sim = sim
        self.config = config
        self.cns = [NodeId.cn(i) for i in range(1, num_cns + 1)]
        self.trace = trace or Trace()
        self.stats = FabricStats()
        self.clock_offsets = clock_offsets or {}

        size = memory_bytes if memory_bytes is not None else config.mn_memory_bytes
        if size > config.mn_memory_bytes:
            raise ValueError(f"MN memory request {size} exceeds mnMemoryBytes {config.mn_memory_bytes}")
        size = -(-size // WORD) * WORD
        self.memory = bytearray(size)
        self.words = np.frombuffer(self.memory, dtype="<u8")
        self._next_free = 0

        self._half_rtt = config.latency_cn_mn / 2
        self._rate = config.mn_nic_iops_capacity / 1e6
        self._bytes_per_us = config.mn_bandwidth / 1e6
        self._tokens = config.nic_burst
        self._token_t = 0.0
        self._admit_t = 0.0
        self._wire_free = 0.0
        self._service_seq = itertools.count()

        self._failed: dict[NodeId, float] = {}
        self._stalled: list[tuple[FabricOp, Future]] = []
        self._channel_last: dict[tuple[NodeId, NodeId], float] = defaultdict(float)
        self._handlers: dict[NodeId, MessageHandler] = {}
        self._failure_listeners: list[Callable[[NodeId], None]] = []
        self._recovery_listeners: list[Callable[[NodeId], None]] = []

    # -- memory ---------------------------------------------------------------

    def alloc(self, nbytes: int, align: int = WORD) -> int:
        addr = -(-self._next_free // align) * align
        if addr + nbytes > len(self.memory):
            raise MemoryError(f"MN memory exhausted: need {nbytes} bytes at {addr}, have {len(self.memory)}")
        self._next_free = addr + nbytes
        return addr

    def read_word(self, addr: int) -> int:
        """Oracle read for setup and checks; not a fabric op."""
        self._check_range(addr, WORD)
        return int.from_bytes(self.memory[addr : addr + WORD], "little")

    def write_word(self, addr: int, value: int) -> None:
        self._check_range(addr, WORD)
        self.memory[addr : addr + WORD] = (value & MASK64).to_bytes(WORD, "little")

    def _check_range(self, addr: int, length: int) -> None:
        if addr < 0 or addr % WORD or length <= 0 or addr + length > len(self.memory):
            raise InvalidAddr(f"[{addr}, {addr + length}) outside MN region of {len(self.memory)} bytes")

    # -- nodes ----------------------------------------------------------------

    def local_clock(self, cn: NodeId) -> float:
        return self.sim.now + self.clock_offsets.get(cn, 0.0)

    def is_failed(self, node: NodeId) -> bool:
        return node in self._failed

    def live_cns(self) -> list[NodeId]:
        return [cn for cn in self.cns if cn not in self._failed]

    def attach(self, node: NodeId, handler: MessageHandler) -> None:
        self._handlers[node] = handler

    def on_failure(self, listener: Callable[[NodeId], None]) -> None:
        self._failure_listeners.append(listener)

    def on_recovery(self, listener: Callable[[NodeId], None]) -> None:
        self._recovery_listeners.append(listener)

    def inject_failure(self, node: NodeId, at: float, recover_at: float | None = None) -> None:
        self.sim.at(at, self._fail, node)
        if recover_at is not None:
            self.recover(node, recover_at)

    def recover(self, node: NodeId, at: float) -> None:
        """Bring a failed node back at `at`. A node that is not failed by then is left alone."""
        self.sim.at(at, self._recover, node)

    def _fail(self, node: NodeId) -> None:
        if node in self._failed:
            return
        self._failed[node] = self.sim.now
        self.trace.emit(self.sim.now, "fail", node=str(node))
        logger.info("%s failed at %.3fus", node, self.sim.now)
        if node.kind is NodeKind.CN:
            killed = self.sim.kill_owned_by(node)
            logger.debug("killed %d task(s) on %s", killed, node)
        for listener in self._failure_listeners:
            listener(node)

    def _recover(self, node: NodeId) -> None:
        if self._failed.pop(node, None) is None:
            return
        self.trace.emit(self.sim.now, "recover", node=str(node))
        logger.info("%s recovered at %.3fus", node, self.sim.now)
        if node.kind is NodeKind.MN:
            stalled, self._stalled = self._stalled, []
            for op, fut in stalled:
                self.stats.ops_aborted += 1
                fut.fail(OperationAborted(f"{op.kind.value} at {op.addr} dropped by MN recovery"))
        for listener in self._recovery_listeners:
            listener(node)

    # -- one-sided verbs ------------------------------------------------------

    def post_op(self, op: FabricOp) -> Future:
        """Issue a verb. The Future resolves with the old value (CAS/FAA), the
        bytes read (READ), None (WRITE) or (old, bytes) for FAA with piggyback."""
        if op.src.kind is not NodeKind.CN:
            raise ValueError(f"ops must originate at a CN, got {op.src}")
        self._check_range(op.addr, op.length)
        if op.kind in (OpKind.READ, OpKind.WRITE) and op.length > self.config.max_io_bytes:
            raise ValueError(f"{op.kind.value} of {op.length} bytes exceeds maxIoBytes")
        if op.piggyback is not None:
            self._check_range(*op.piggyback)
            if op.piggyback[1] > self.config.max_io_bytes:
                raise ValueError(f"piggybacked READ of {op.piggyback[1]} bytes exceeds maxIoBytes")
        fut = self.sim.future()
        if op.src in self._failed:
            return fut
        self.stats.ops_by_tag[op.tag] += 1
        self.stats.ops_by_kind[op.kind.value] += 1
        if op.piggyback is not None:
            self.stats.ops_by_kind[OpKind.READ.value] += 1
        self.sim.schedule(self._half_rtt, self._arrive, op, fut)
        return fut

    def _weight(self, op: FabricOp) -> float:
        cost = self.config.op_cost
        weight = cost[op.kind.value]
        if op.piggyback is not None:
            weight += cost[OpKind.READ.value]
        return weight

    def _wire_bytes(self, op: FabricOp) -> int:
        n = op.length
        if op.piggyback is not None:
            n += op.piggyback[1]
        return n

    def _arrive(self, op: FabricOp, fut: Future) -> None:
        if MN in self._failed:
            self._stalled.append((op, fut))
            return
        weight = self._weight(op)
        start = max(self.sim.now, self._admit_t)
        tokens = min(self.config.nic_burst, self._tokens + (start - self._token_t) * self._rate)
        if tokens < weight:
            start += (weight - tokens) / self._rate
            tokens = weight
        self._tokens = tokens - weight
        self._token_t = start
        self._admit_t = start
        self.stats.weighted_charge += weight

        nbytes = self._wire_bytes(op)
        done = max(start, self._wire_free) + nbytes / self._bytes_per_us
        self._wire_free = done
        self.stats.bytes_moved += nbytes
        self.sim.at(done, self._service, op, fut)

    def _service(self, op: FabricOp, fut: Future) -> None:
        if MN in self._failed:
            self._stalled.append((op, fut))
            return
        op.service_seq = next(self._service_seq)
        op.served_at = self.sim.now
        result = self._apply(op)
        if op.on_service is not None:
            op.on_service(op)
        self.sim.schedule(self._half_rtt, self._complete, op, fut, result)

    def _apply(self, op: FabricOp) -> Any:
        mem = self.memory
        a = op.addr
        old = new = None
        if op.kind is OpKind.READ:
            result = bytes(mem[a : a + op.length])
        elif op.kind is OpKind.WRITE:
            if op.length == WORD:
                old = int.from_bytes(mem[a : a + WORD], "little")
                new = int.from_bytes(op.payload, "little")
            mem[a : a + op.length] = op.payload
            result = None
        else:
            old = int.from_bytes(mem[a : a + WORD], "little")
            if op.kind is OpKind.CAS:
                new = op.swap if old == op.expected else old
            else:
                new = (old + op.addend) & MASK64
            mem[a : a + WORD] = new.to_bytes(WORD, "little")
            result = old
            if op.piggyback is not None:
                pa, plen = op.piggyback
                result = (old, bytes(mem[pa : pa + plen]))
        if self.trace.record_ops:
            self.trace.emit(
                self.sim.now,
                op.kind.value,
                node=str(op.src),
                addr=a,
                len=op.length,
                old=old,
                new=new,
                tag=op.tag,
                seq=op.service_seq,
            )
        return result

    def _complete(self, op: FabricOp, fut: Future, result: Any) -> None:
        if op.src in self._failed:
            return
        fut.resolve(result)

    # -- CN-to-CN messages ----------------------------------------------------

    def send_message(self, src: NodeId, dst: NodeId, payload: Any, tag: str = "msg") -> Future:
        """RC send: in order per (src, dst), delivered after the CN-CN latency.
        The returned ack resolves at once; a failed endpoint drops the message."""
        if src.kind is not NodeKind.CN or dst.kind is not NodeKind.CN:
            raise ValueError(f"messages go between CNs, got {src} -> {dst}")
        ack = self.sim.future()
        ack.resolve()
        if src in self._failed or dst in self._failed:
            self.stats.messages_dropped += 1
            return ack
        self.stats.messages_sent[tag] += 1
        t = max(self.sim.now + self.config.cn_cn_latency, self._channel_last[(src, dst)])
        self._channel_last[(src, dst)] = t
        self.sim.at(t, self._deliver, src, dst, payload, tag)
        return ack

    def _deliver(self, src: NodeId, dst: NodeId, payload: Any, tag: str) -> None:
        if src in self._failed or dst in self._failed:
            self.stats.messages_dropped += 1
            return
        handler = self._handlers.get(dst)
        if handler is None:
            raise DestinationFailed(f"no handler attached at {dst}")
        if self.trace.record_ops:
            self.trace.emit(self.sim.now, "MSG", node=str(src), dst=str(dst), tag=tag)
        handler(src, payload)
