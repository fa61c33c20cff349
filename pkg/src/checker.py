"""Offline checks over a lock event trace: mutual exclusion, fairness, liveness, resets and op budget."""

import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.fabric import Trace

INTERVAL_COLUMNS = [
    "acq", "lockId", "cid", "cn", "mode", "seq",
    "t_request", "t_granted", "t_released", "faa", "writes", "attempts", "t_enqueued",
]

# request timestamps count whole microseconds
TS_RESOLUTION_US = 1.0


def load_records(trace: "str | Path | Trace | Iterable[dict[str, Any]]") -> list[dict[str, Any]]:
    if isinstance(trace, (str, Path)):
        return Trace.load(trace)
    if isinstance(trace, Trace):
        return trace.records
    return list(trace)


def trace_meta(records: list[dict[str, Any]]) -> dict[str, Any]:
    for r in records:
        if r.get("kind") == "meta":
            return r
    return {}


def failed_cns(records: list[dict[str, Any]]) -> dict[int, float]:
    """CN index -> time of its first failure."""
    out: dict[int, float] = {}
    for r in records:
        if r.get("kind") == "fail" and r["node"].startswith("CN"):
            out.setdefault(int(r["node"][2:]), r["t"])
    return out


def _frame(records: list[dict[str, Any]], kind: str) -> pd.DataFrame:
    rows = [r for r in records if r.get("kind") == kind]
    return pd.DataFrame(rows)


def grant_intervals(trace) -> pd.DataFrame:
    """One row per acquisition: request, grant and release times (NaN when missing)."""
    records = load_records(trace)
    req = _frame(records, "request")
    if req.empty:
        return pd.DataFrame(columns=INTERVAL_COLUMNS)
    out = req.rename(columns={"t": "t_request"})[["acq", "lockId", "cid", "cn", "mode", "t_request"]]

    grants = _frame(records, "grant")
    if grants.empty:
        grants = pd.DataFrame(columns=["acq", "t", "seq", "faa", "writes", "attempts", "enqueuedAt"])
    for col in ("seq", "faa", "writes", "attempts", "enqueuedAt"):
        if col not in grants:
            grants[col] = np.nan
    grants = grants.rename(columns={"t": "t_granted", "enqueuedAt": "t_enqueued"})
    grants = grants[["acq", "t_granted", "seq", "faa", "writes", "attempts", "t_enqueued"]]

    releases = _frame(records, "release")
    if releases.empty:
        releases = pd.DataFrame(columns=["acq", "t"])
    releases = releases.rename(columns={"t": "t_released"})[["acq", "t_released"]]

    out = out.merge(grants, on="acq", how="left").merge(releases, on="acq", how="left")
    # a holder killed with its CN stops holding at the failure
    fail_at = failed_cns(records)
    if fail_at:
        open_ = out["t_released"].isna() & out["t_granted"].notna()
        out.loc[open_, "t_released"] = out.loc[open_, "cn"].map(fail_at)
    return out[INTERVAL_COLUMNS].sort_values("acq", kind="stable").reset_index(drop=True)


def check_mutual_exclusion(trace) -> list[dict[str, Any]]:
    """Overlaps of a writer's holding interval with any other holder on the same lock.

    Intervals are half-open [granted, released); a release and a grant at the
    same instant do not overlap.
    """
    g = grant_intervals(trace)
    g = g[g["t_granted"].notna()]
    if g.empty:
        return []
    released = g["t_released"].fillna(math.inf).to_numpy(dtype=float)
    n = len(g)
    events = pd.DataFrame(
        {
            "lockId": np.concatenate([g["lockId"].to_numpy(), g["lockId"].to_numpy()]),
            "t": np.concatenate([g["t_granted"].to_numpy(dtype=float), released]),
            "is_grant": np.concatenate([np.ones(n, dtype=int), np.zeros(n, dtype=int)]),
            "row": np.concatenate([np.arange(n), np.arange(n)]),
        }
    ).sort_values(["lockId", "t", "is_grant", "row"], kind="stable")

    acq = g["acq"].to_numpy()
    exclusive = (g["mode"] == "EXCLUSIVE").to_numpy()
    violations = []
    current_lock = None
    readers: dict[int, None] = {}
    writers: dict[int, None] = {}
    for lock_id, t, is_grant, row in events.itertuples(index=False):
        if lock_id != current_lock:
            current_lock = lock_id
            readers, writers = {}, {}
        holders = writers if exclusive[row] else readers
        if not is_grant:
            holders.pop(row, None)
            continue
        conflicts = list(writers) + (list(readers) if exclusive[row] else [])
        for other in conflicts:
            violations.append(
                {"lockId": int(lock_id), "t": float(t), "acq": int(acq[row]), "other": int(acq[other])}
            )
        holders[row] = None
    return violations


@dataclass
class FairnessReport:
    overtakes: int = 0
    phase_violations: int = 0
    cross_cn_overtakes: int = 0
    # overtakes of writers already in the CQL queue, and per-CN phase violations
    queued_cross_cn_overtakes: int = 0
    local_phase_violations: int = 0
    checked: int = 0


def count_overtakes(trace) -> tuple[int, int]:
    """Acquisitions granted before some earlier-enqueued one; consecutive readers form one batch."""
    g = grant_intervals(trace)
    g = g[g["t_granted"].notna() & g["seq"].notna() & (g["seq"] >= 0)]
    overtakes = 0
    for _, lock in g.groupby("lockId", sort=True):
        lock = lock.sort_values("seq", kind="stable")
        before = -math.inf
        batch_max = -math.inf
        batch_is_readers = False
        for mode, t_granted in zip(lock["mode"], lock["t_granted"]):
            reader = mode == "SHARED"
            if not (reader and batch_is_readers):
                before = max(before, batch_max)
                batch_max = -math.inf
            batch_is_readers = reader
            if t_granted < before:
                overtakes += 1
            batch_max = max(batch_max, t_granted)
    return overtakes, len(g)


def count_phase_violations(trace, per_cn: bool = False) -> int:
    """Writer-to-writer grants with a reader that waited across both writers.

    With `per_cn`, readers and writers are only compared within one CN.
    """
    g = grant_intervals(trace)
    g = g[g["t_granted"].notna()]
    violations = 0
    keys = ["lockId", "cn"] if per_cn else ["lockId"]
    for _, lock in g.groupby(keys, sort=True):
        writers = lock[lock["mode"] == "EXCLUSIVE"].sort_values("t_granted", kind="stable")
        readers = lock[lock["mode"] == "SHARED"].sort_values("t_request", kind="stable")
        if len(writers) < 2 or readers.empty:
            continue
        req = readers["t_request"].to_numpy(dtype=float)
        prefix_max = np.maximum.accumulate(readers["t_granted"].to_numpy(dtype=float))
        w_rel = writers["t_released"].fillna(math.inf).to_numpy(dtype=float)
        w_grant = writers["t_granted"].to_numpy(dtype=float)
        for i in range(len(writers) - 1):
            k = np.searchsorted(req, w_rel[i], side="left")
            if k and prefix_max[k - 1] > w_grant[i + 1]:
                violations += 1
    return violations


def check_cross_cn_order(trace, window: float, enqueued_only: bool = False) -> int:
    """Writers on different CNs granted against request order although requested more than `window` apart.

    With `enqueued_only`, an earlier writer only counts when its CQL queue
    entry had landed before the later writer asked, and the two requests are
    further apart than `window` plus one timestamp tick. Writers still waiting
    on their CN's local queue are not visible to other CNs.
    """
    g = grant_intervals(trace)
    g = g[g["t_granted"].notna() & (g["mode"] == "EXCLUSIVE")]
    if enqueued_only:
        window += TS_RESOLUTION_US
    overtakes = 0
    for _, lock in g.groupby("lockId", sort=True):
        lock = lock.sort_values("t_request", kind="stable")
        req = lock["t_request"].to_numpy(dtype=float)
        got = lock["t_granted"].to_numpy(dtype=float)
        enq = lock["t_enqueued"].to_numpy(dtype=float)
        cns = lock["cn"].to_numpy()
        # rows [0, k[j]) were requested more than `window` before row j
        k = np.searchsorted(req, req - window, side="left")
        flagged = np.zeros(len(lock), dtype=bool)
        for cn in np.unique(cns):
            got_cn = np.where(cns == cn, got, -math.inf)
            prefix_max = np.concatenate([[-math.inf], np.maximum.accumulate(got_cn)])
            flagged |= (cns != cn) & (prefix_max[k] > got)
        if not enqueued_only:
            overtakes += int(flagged.sum())
            continue
        for j in np.flatnonzero(flagged):
            i = np.arange(k[j])
            # NaN enqueue times compare False
            if np.any((cns[i] != cns[j]) & (got[i] > got[j]) & (enq[i] < req[j])):
                overtakes += 1
    return overtakes


def check_fairness(trace, policy: str = "tf", window: float | None = None) -> FairnessReport:
    overtakes, checked = count_overtakes(trace)
    report = FairnessReport(overtakes=overtakes, checked=checked)
    if policy in ("pf", "phasefair"):
        report.phase_violations = count_phase_violations(trace)
        report.local_phase_violations = count_phase_violations(trace, per_cn=True)
    if window is not None:
        report.cross_cn_overtakes = check_cross_cn_order(trace, window)
        report.queued_cross_cn_overtakes = check_cross_cn_order(trace, window, enqueued_only=True)
    return report


def check_liveness(trace, horizon: float | None = None) -> list[dict[str, Any]]:
    """Acquisitions never granted (or granted after `horizon`) by clients on CNs that never failed.

    Acquisitions the client gave up on (an `abandon` record) are not stuck.
    """
    records = load_records(trace)
    failed = set(failed_cns(records))
    abandoned = {r["acq"] for r in records if r.get("kind") == "abandon"}
    g = grant_intervals(records)
    stuck = g["t_granted"].isna() & ~g["acq"].isin(abandoned)
    if horizon is not None:
        stuck |= g["t_granted"] > horizon
    stuck &= ~g["cn"].isin(failed)
    return [
        {"acq": int(r.acq), "lockId": int(r.lockId), "cid": int(r.cid), "cn": int(r.cn), "t_request": float(r.t_request)}
        for r in g[stuck].itertuples(index=False)
    ]


def check_resets(trace) -> list[dict[str, Any]]:
    """Resets that finished dirty or started and never finished (initiator alive)."""
    records = load_records(trace)
    failed = set(failed_cns(records))
    open_resets: dict[tuple[int, int], dict[str, Any]] = {}
    problems = []
    for r in records:
        if r.get("kind") != "reset":
            continue
        key = (r["lockId"], r["cn"])
        if r["phase"] == "begin":
            open_resets[key] = r
        elif r["phase"] == "done":
            open_resets.pop(key, None)
            if not r.get("clean", False):
                problems.append({"lockId": r["lockId"], "cn": r["cn"], "t": r["t"], "problem": "dirty post-state"})
    for (lock_id, cn), r in open_resets.items():
        if cn not in failed:
            problems.append({"lockId": lock_id, "cn": cn, "t": r["t"], "problem": "never finished"})
    return problems


def check_op_budget(trace, capacity: int) -> list[dict[str, Any]]:
    """Per acquisition FAA == attempts and WRITE <= attempts; per release notifications <= C - 1."""
    records = load_records(trace)
    g = grant_intervals(records)
    g = g[g["faa"].notna()]
    bad = g[(g["faa"] != g["attempts"]) | (g["writes"] > g["attempts"])]
    problems = [
        {"acq": int(r.acq), "faa": int(r.faa), "writes": int(r.writes), "attempts": int(r.attempts)}
        for r in bad.itertuples(index=False)
    ]
    for r in records:
        if r.get("kind") == "released" and r.get("notified", 0) > capacity - 1:
            problems.append({"acq": r["acq"], "notified": r["notified"], "capacity": capacity})
    return problems


@dataclass
class CheckReport:
    mutex_violations: list[dict[str, Any]] = field(default_factory=list)
    stuck_waiters: list[dict[str, Any]] = field(default_factory=list)
    reset_problems: list[dict[str, Any]] = field(default_factory=list)
    budget_problems: list[dict[str, Any]] = field(default_factory=list)
    fairness: FairnessReport = field(default_factory=FairnessReport)
    overtakes_asserted: bool = False
    cross_cn_asserted: bool = False
    phase_asserted: bool = False

    @property
    def failed(self) -> bool:
        return bool(
            self.mutex_violations
            or self.stuck_waiters
            or self.reset_problems
            or self.budget_problems
            or (self.overtakes_asserted and self.fairness.overtakes)
            or (self.cross_cn_asserted and self.fairness.queued_cross_cn_overtakes)
            or (self.phase_asserted and self.fairness.local_phase_violations)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": not self.failed,
            "mutexViolations": len(self.mutex_violations),
            "stuckWaiters": len(self.stuck_waiters),
            "resetProblems": len(self.reset_problems),
            "budgetProblems": len(self.budget_problems),
            "overtakes": self.fairness.overtakes,
            "overtakesAsserted": self.overtakes_asserted,
            "phaseViolations": self.fairness.phase_violations,
            "localPhaseViolations": self.fairness.local_phase_violations,
            "phaseAsserted": self.phase_asserted,
            "crossCnOvertakes": self.fairness.cross_cn_overtakes,
            "queuedCrossCnOvertakes": self.fairness.queued_cross_cn_overtakes,
            "crossCnAsserted": self.cross_cn_asserted,
            "grantsChecked": self.fairness.checked,
            "examples": {
                "mutex": self.mutex_violations[:5],
                "stuck": self.stuck_waiters[:5],
                "resets": self.reset_problems[:5],
                "budget": self.budget_problems[:5],
            },
        }


def run_checks(trace, policy: str | None = None, horizon: float | None = None) -> CheckReport:
    """All checks, with the trace's meta record deciding which fairness verdicts are binding.

    Overtakes are binding for the ticket lock and for flat CQL runs without
    resets. Hierarchical CQL runs without resets are bound to per-CN phase
    order under phase-fairness, and under task-fairness with the timestamp
    transfer policy no writer may pass a remote writer already in the CQL
    queue. CASLock overtakes and the remaining cross-CN counts are reported only.
    """
    records = load_records(trace)
    meta = trace_meta(records)
    lock = meta.get("lock", "cql")
    hierarchy = bool(meta.get("hierarchy", False))
    policy = policy or ("pf" if meta.get("fairness") == "phasefair" else "tf")
    window = meta.get("window") if lock == "cql" and hierarchy else None

    report = CheckReport()
    report.mutex_violations = check_mutual_exclusion(records)
    report.stuck_waiters = check_liveness(records, horizon)
    report.fairness = check_fairness(records, policy, window)
    if lock == "cql":
        report.reset_problems = check_resets(records)
        if not hierarchy:
            report.budget_problems = check_op_budget(records, int(meta.get("capacity", 8)))
    had_resets = any(r.get("kind") == "reset" for r in records)
    report.overtakes_asserted = lock == "ticket" or (lock == "cql" and not hierarchy and not had_resets)
    hier_clean = lock == "cql" and hierarchy and not had_resets
    report.phase_asserted = hier_clean and policy in ("pf", "phasefair")
    report.cross_cn_asserted = (
        hier_clean and policy in ("tf", "taskfair") and meta.get("transferPolicy", "timestamp") == "timestamp"
    )
    return report

