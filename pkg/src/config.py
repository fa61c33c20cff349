"""Run configuration: pydantic models for the fabric, lock layout, reset, hierarchy, baselines and workload."""

import itertools
import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic.alias_generators import to_camel

MIB = 1 << 20
OP_KINDS = ("READ", "WRITE", "CAS", "FAA")


class ConfigError(ValueError):
    """Invalid or unreadable run configuration (CLI exit code 3)."""


class _Model(BaseModel):
    """camelCase keys in files, snake_case in code; unknown keys are rejected."""

    model_config = ConfigDict(
        alias_generator=to_camel,
        populate_by_name=True,
        extra="forbid",
    )


class FabricConfig(_Model):
    """Simulated interconnect. Latencies are round-trip microseconds of one verb / one message hop."""

    latency_cn_mn: float = Field(2.0, gt=0, description="Round trip of one one-sided verb (µs)")
    latency_cn_cn: float | None = Field(
        None, gt=0, description="CN-to-CN message delivery (µs); defaults to ratio × latencyCnMn"
    )
    cn_cn_ratio: float = Field(1.0, gt=0)
    mn_nic_iops_capacity: float = Field(50e6, gt=0, description="Weighted ops per second")
    nic_burst: float = Field(8.0, ge=1, description="Token bucket depth in weight units")
    op_cost: dict[str, float] = Field(
        default_factory=lambda: {"READ": 1.0, "WRITE": 1.0, "CAS": 4.0, "FAA": 4.0}
    )
    mn_bandwidth: float = Field(12.5e9, gt=0, description="MN-NIC bytes per second")
    max_io_bytes: int = Field(4096, ge=8)
    mn_memory_bytes: int = Field(512 * MIB, ge=64)
    clock_offset_max_us: float = Field(50.0, ge=0)

    @model_validator(mode="after")
    def _check_costs(self) -> "FabricConfig":
        unknown = sorted(set(self.op_cost) - set(OP_KINDS))
        if unknown:
            raise ValueError(f"opCost has unknown op kinds: {unknown}")
        for kind in OP_KINDS:
            self.op_cost.setdefault(kind, 4.0 if kind in ("CAS", "FAA") else 1.0)
        low = {k: w for k, w in self.op_cost.items() if w < 1}
        if low:
            raise ValueError(f"opCost weights must be >= 1: {low}")
        if self.nic_burst < max(self.op_cost.values()) + self.op_cost["READ"]:
            raise ValueError("nicBurst must cover the heaviest op plus a piggybacked READ")
        return self

    @property
    def cn_cn_latency(self) -> float:
        if self.latency_cn_cn is not None:
            return self.latency_cn_cn
        return self.cn_cn_ratio * self.latency_cn_mn


class LayoutConfig(_Model):
    reset_id_bits: int = Field(8, ge=1, le=16)
    queue_capacity: int | None = Field(
        None, ge=2, description="Power of two; omitted = numCNs (hierarchy) or total clients"
    )


class ResetConfig(_Model):
    acquisition_timeout_us: float = Field(10_000.0, gt=0)
    refetch_budget_us: float | None = Field(None, gt=0)
    retry_backoff_us: float = Field(2.0, gt=0)
    retry_backoff_cap_us: float = Field(64.0, gt=0)

    @property
    def refetch_budget(self) -> float:
        return self.refetch_budget_us or self.acquisition_timeout_us


class HierConfig(_Model):
    enabled: bool = True
    fairness: Literal["taskfair", "phasefair"] = "taskfair"
    transfer_policy: Literal["timestamp", "remote_prefer", "local_prefer", "local_bound"] = (
        "timestamp"
    )
    local_bound: int = Field(4, ge=1)
    sync_interval_us: float = Field(1_000_000.0, gt=0)
    sync_timeout_us: float = Field(1_000.0, gt=0)


class BackoffConfig(_Model):
    base_us: float = Field(2.0, gt=0)
    cap_us: float = Field(256.0, gt=0)
    spin_timeout_us: float = Field(1_000_000.0, gt=0)


class WorkloadSpec(_Model):
    num_cns: int = Field(8, ge=1)
    clients_per_cn: int = Field(32, ge=1)
    num_locks: int = Field(100_000, ge=1)
    zipf_alpha: float = Field(0.99, ge=0)
    read_ratio: float = Field(0.5, ge=0, le=1)
    critical_section_ops: int = Field(1, ge=1)
    ops_per_client: int = Field(100_000, ge=1)
    mode: Literal["microbench", "objectstore"] = "microbench"
    object_bytes: int = Field(64, ge=8)
    small_object_bytes: int = Field(414, ge=8)
    large_object_bytes: int = Field(9213, ge=8)
    large_fraction: float = Field(0.5, ge=0, le=1)
    object_arena_bytes: int = Field(16 * MIB, ge=64)

    @property
    def total_clients(self) -> int:
        return self.num_cns * self.clients_per_cn

    @property
    def max_object_bytes(self) -> int:
        if self.mode == "objectstore":
            return max(self.small_object_bytes, self.large_object_bytes)
        return self.object_bytes


class FailureEvent(_Model):
    node: str = Field(..., pattern=r"^(MN|CN\d+)$")
    at: float = Field(..., ge=0)
    recover_at: float | None = Field(None, ge=0)


class RunConfig(_Model):
    lock: Literal["cql", "caslock", "ticket"] = "cql"
    seed: int = Field(0, ge=0, lt=1 << 64)
    profile: Literal["default", "ci"] = "default"
    horizon_us: float | None = Field(100_000_000.0, gt=0)
    cross_cn_window_us: float | None = Field(None, ge=0)
    fabric: FabricConfig = Field(default_factory=FabricConfig)
    layout: LayoutConfig = Field(default_factory=LayoutConfig)
    reset: ResetConfig = Field(default_factory=ResetConfig)
    hier: HierConfig = Field(default_factory=HierConfig)
    backoff: BackoffConfig = Field(default_factory=BackoffConfig)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    failures: list[FailureEvent] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "RunConfig":
        w = self.workload
        if (1 << self.layout.reset_id_bits) <= w.num_cns:
            raise ValueError(
                f"resetIdBits={self.layout.reset_id_bits} cannot identify {w.num_cns} CNs"
            )
        cap = self.layout.queue_capacity
        if cap is not None and cap & (cap - 1):
            raise ValueError(f"queueCapacity must be a power of two, got {cap}")
        if self.lock == "cql" and not self.hier.enabled and cap is not None and cap < w.total_clients:
            raise ValueError(
                f"queueCapacity={cap} < {w.total_clients} clients without hierarchical locking"
            )
        for event in self.failures:
            if event.node.startswith("CN") and not 1 <= int(event.node[2:]) <= w.num_cns:
                raise ValueError(f"failure targets unknown node {event.node}")
        if self.profile == "ci":
            w.ops_per_client = min(w.ops_per_client, 1_000)
        return self

    @property
    def queue_capacity(self) -> int:
        """Resolved CQL queue capacity (power of two)."""
        if self.layout.queue_capacity is not None:
            return self.layout.queue_capacity
        need = self.workload.num_cns if self.hier.enabled else self.workload.total_clients
        return max(2, 1 << (need - 1).bit_length())

    @property
    def cross_cn_window(self) -> float:
        if self.cross_cn_window_us is not None:
            return self.cross_cn_window_us
        return 2 * self.fabric.latency_cn_mn


class SweepMatrix(_Model):
    """Base config plus dotted-path axes, e.g. {"workload.clientsPerCn": [1, 4, 32]}."""

    base: dict[str, Any] = Field(default_factory=dict)
    axes: dict[str, list[Any]] = Field(default_factory=dict)

    def expand(self) -> list[tuple[dict[str, Any], RunConfig]]:
        keys = list(self.axes)
        points = []
        for values in itertools.product(*(self.axes[k] for k in keys)):
            raw = json.loads(json.dumps(self.base))
            for key, value in zip(keys, values):
                _set_dotted(raw, key, value)
            point = dict(zip(keys, values))
            points.append((point, parse_run_config(raw)))
        return points


def _set_dotted(raw: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = raw
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def parse_run_config(raw: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e


def _read_json(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file must hold a JSON object: {path}")
    return raw


def load_run_config(path: str | Path) -> RunConfig:
    """Load a run config from a JSON file. Raises ConfigError on any problem."""
    return parse_run_config(_read_json(path))


def load_sweep_matrix(path: str | Path) -> SweepMatrix:
    try:
        return SweepMatrix.model_validate(_read_json(path))
    except ValidationError as e:
        raise ConfigError(f"Invalid sweep matrix: {e}") from e
