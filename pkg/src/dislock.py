"""CLI: run a lock benchmark, check a saved trace, or sweep a parameter matrix.

Exit codes: 0 ok, 2 checker violation (bench only with --strict), 3 config error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from src.bench import run, sweep, write_csv
from src.checker import run_checks
from src.config import ConfigError, RunConfig, load_run_config, load_sweep_matrix, parse_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATION = 2
EXIT_CONFIG = 3

FAIRNESS = {"tf": "taskfair", "pf": "phasefair"}


def apply_overrides(
    config: RunConfig,
    *,
    lock: str | None = None,
    fairness: str | None = None,
    hierarchy: str | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Re-validate the config with CLI flags taking precedence over the file."""
    raw = config.model_dump(by_alias=True)
    if lock is not None:
        raw["lock"] = lock
    if fairness is not None:
        raw["hier"]["fairness"] = FAIRNESS[fairness]
    if hierarchy is not None:
        raw["hier"]["enabled"] = hierarchy == "on"
    if seed is not None:
        raw["seed"] = seed
    return parse_run_config(raw)


def cmd_bench(args: argparse.Namespace) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    config = apply_overrides(
        config, lock=args.lock, fairness=args.fairness, hierarchy=args.hierarchy, seed=args.seed
    )
    w = config.workload
    print("dislock bench")
    print("  Lock:     ", config.lock, "(hierarchy on)" if config.lock == "cql" and config.hier.enabled else "")
    print("  Clients:  ", w.total_clients, f"({w.num_cns} CNs x {w.clients_per_cn})")
    print("  Locks:    ", w.num_locks, f"zipf={w.zipf_alpha} read={w.read_ratio}")

    result = run(config, record_ops=args.record_ops, trace_path=args.trace)
    if args.csv:
        write_csv([result.row()], args.csv)
        print("  CSV:      ", args.csv)
    if args.trace:
        print("  Trace:    ", args.trace)

    print("\n--- Run metrics (JSON) ---")
    print(json.dumps(result.metrics.to_row(), indent=2))
    print("\n--- Checker report (JSON) ---")
    print(json.dumps(result.report.to_dict(), indent=2))

    if result.horizon_hit:
        print("\n[WARN] horizon reached with", len(result.horizon_hit), "task(s) still running")
    if result.report.failed:
        print("\n[FAIL] checker found violations.")
        return EXIT_VIOLATION if args.strict else EXIT_OK
    print("\n[OK]", result.metrics.ops_completed, "acquisitions, all checks passed.")
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    path = Path(args.trace)
    print("dislock check")
    print("  Trace:", path)
    if not path.exists():
        print("[ERROR] Trace file not found:", path)
        return EXIT_CONFIG
    report = run_checks(path, policy=args.policy, horizon=args.horizon)
    print("\n--- Checker report (JSON) ---")
    print(json.dumps(report.to_dict(), indent=2))
    if report.failed:
        print("\n[FAIL] trace violates the lock properties.")
        return EXIT_VIOLATION
    print("\n[OK]", report.fairness.checked, "grants checked, no violations.")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    matrix = load_sweep_matrix(args.matrix)
    points = matrix.expand()
    print("dislock sweep")
    print("  Matrix:", args.matrix, f"({len(points)} runs, jobs={args.jobs})")
    df = sweep(matrix, n_jobs=args.jobs)
    write_csv(df, args.csv)
    print("  CSV:   ", args.csv)
    failed = int((~df["passed"]).sum()) if "passed" in df else 0
    if failed:
        print(f"\n[FAIL] {failed} of {len(df)} runs failed the checker.")
        return EXIT_VIOLATION if args.strict else EXIT_OK
    print(f"\n[OK] {len(df)} runs, all checks passed.")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dislock", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run one simulated benchmark")
    bench.add_argument("--config", help="JSON run config (defaults when omitted)")
    bench.add_argument("--lock", choices=["cql", "caslock", "ticket"])
    bench.add_argument("--fairness", choices=sorted(FAIRNESS))
    bench.add_argument("--hierarchy", choices=["on", "off"])
    bench.add_argument("--seed", type=int)
    bench.add_argument("--trace", help="write the JSONL event trace here")
    bench.add_argument("--record-ops", action="store_true", help="include every fabric op in the trace")
    bench.add_argument("--csv", help="write the metrics row here")
    bench.add_argument("--strict", action="store_true", help="exit 2 on checker violations")
    bench.set_defaults(func=cmd_bench)

    check = sub.add_parser("check", help="check a saved trace")
    check.add_argument("trace")
    check.add_argument("--policy", choices=["tf", "pf"])
    check.add_argument("--horizon", type=float)
    check.set_defaults(func=cmd_check)

    sweep_p = sub.add_parser("sweep", help="run every point of a sweep matrix")
    sweep_p.add_argument("--matrix", required=True)
    sweep_p.add_argument("--csv", default="sweep.csv")
    sweep_p.add_argument("--jobs", type=int, default=1)
    sweep_p.add_argument("--strict", action="store_true")
    sweep_p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print("[ERROR]", e)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("dislock %s failed", args.command)
        print("[ERROR]", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
