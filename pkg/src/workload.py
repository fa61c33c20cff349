"""Per-client operation streams: Zipf-distributed lock ids, read/write mix, object sizes."""

import math
from dataclasses import dataclass

import numpy as np

from src.config import WorkloadSpec


@dataclass(frozen=True)
class ClientStream:
    """Operation i locks `lock_ids[i]`, shared iff `shared[i]`, touching `object_bytes[i]` bytes."""

    cid: int
    cn: int
    lock_ids: np.ndarray
    shared: np.ndarray
    object_bytes: np.ndarray

    def __len__(self) -> int:
        return len(self.lock_ids)


def zipf_cdf(num_locks: int, alpha: float) -> np.ndarray:
    """Cumulative Zipf(alpha) weights over ranks 1..num_locks; alpha=0 is uniform."""
    if num_locks <= 0:
        raise ValueError("num_locks must be > 0")
    ranks = np.arange(1, num_locks + 1, dtype=float)
    weights = ranks ** (-alpha)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    return cdf


def sample_zipf(rng: np.random.Generator, cdf: np.ndarray, n: int) -> np.ndarray:
    """Inverse-CDF draw of n lock ids; lock 0 is the rank-1 (hottest) lock."""
    u = rng.random(n)
    ids = np.searchsorted(cdf, u, side="right")
    return np.minimum(ids, len(cdf) - 1).astype(np.int64)


def generate_workload(spec: WorkloadSpec, seed: int) -> list[ClientStream]:
    """One independent PCG64 stream per client, spawned from a single seed.

    Clients are numbered from 1, CN-major: CN1 gets cids 1..clientsPerCn.
    """
    cdf = zipf_cdf(spec.num_locks, spec.zipf_alpha)
    children = np.random.SeedSequence(seed).spawn(spec.total_clients)
    streams = []
    for k, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        n = spec.ops_per_client
        lock_ids = sample_zipf(rng, cdf, n)
        shared = rng.random(n) < spec.read_ratio
        if spec.mode == "objectstore":
            large = rng.random(n) < spec.large_fraction
            sizes = np.where(large, spec.large_object_bytes, spec.small_object_bytes)
        else:
            sizes = np.full(n, spec.object_bytes)
        streams.append(
            ClientStream(
                cid=k + 1,
                cn=k // spec.clients_per_cn + 1,
                lock_ids=lock_ids,
                shared=shared,
                object_bytes=sizes.astype(np.int64),
            )
        )
    return streams


def nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile (q in [0, 100]) of the full population; 0.0 when empty."""
    data = np.sort(np.asarray(values, dtype=float))
    if data.size == 0:
        return 0.0
    rank = max(1, math.ceil(q / 100 * data.size))
    return float(data[rank - 1])
