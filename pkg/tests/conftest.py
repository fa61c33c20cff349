"""Pytest config: add repo root to path so tests can import src from repo root; shared cluster fixtures."""

import sys
from dataclasses import dataclass, field
from pathlib import Path

import pytest

root = Path(__file__).resolve().parent.parent
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

from src.agent import Client, CnAgent  # noqa: E402
from src.config import FabricConfig, ResetConfig  # noqa: E402
from src.cql import CqlProtocol  # noqa: E402
from src.fabric import Fabric, NodeId, Simulator, Trace  # noqa: E402
from src.reset import ResetService, ResetState  # noqa: E402
from src.wire import HeaderLayout, LockSpace  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trend and acceptance runs (deselect with -m 'not slow')")


@dataclass
class CqlEnv:
    sim: Simulator
    fabric: Fabric
    space: LockSpace
    agents: dict
    resets: ResetService
    cql: CqlProtocol
    clients: list[Client] = field(default_factory=list)

    def run(self, *gens, horizon=None):
        """Spawn each generator as a client task (owned by its CN) and run to quiescence."""
        tasks = [self.sim.spawn(g, owner=owner) for owner, g in gens]
        self.sim.run_until_quiescent(horizon)
        return [t.result.value for t in tasks]

    def header(self, lock_id: int) -> int:
        return self.fabric.read_word(self.space.header_addr(lock_id))


def build_cql_env(
    num_cns: int = 2,
    clients_per_cn: int = 2,
    capacity: int = 8,
    num_locks: int = 4,
    timeout_us: float = 10_000.0,
    record_ops: bool = False,
    **fabric_kwargs,
) -> CqlEnv:
    sim = Simulator()
    layout = HeaderLayout.for_capacity(capacity)
    fabric = Fabric(
        sim,
        FabricConfig(**fabric_kwargs),
        num_cns,
        memory_bytes=num_locks * layout.lock_bytes,
        trace=Trace(record_ops=record_ops),
    )
    space = LockSpace(fabric.alloc(num_locks * layout.lock_bytes), num_locks, layout)
    space.initialize(fabric.words)
    reset_config = ResetConfig(acquisition_timeout_us=timeout_us)
    agents = {cn: CnAgent(fabric, cn, ResetState(timeout_us)) for cn in fabric.cns}
    resets = ResetService(fabric, space, agents, reset_config)
    for agent in agents.values():
        agent.resets = resets
    clients = [
        Client(cid=k + 1, cn=NodeId.cn(k // clients_per_cn + 1)) for k in range(num_cns * clients_per_cn)
    ]
    cn_of_cid = {c.cid: c.cn for c in clients}
    cql = CqlProtocol(fabric, space, agents, resets, reset_config, cn_of_cid)
    return CqlEnv(sim, fabric, space, agents, resets, cql, clients)


@pytest.fixture
def cql_env():
    return build_cql_env
