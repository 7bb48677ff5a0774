"""Command-line front door: run experiments, benchmark designs, serve keys."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from kmslab.keystore import Design
from kmslab.kmlink import KmConfig
from kmslab.simcore import ConfigError
from kmslab.experiments import (
    PRESET_NAMES,
    apply_overrides,
    bench_plan,
    build_preset,
    emit_for_plan,
    execute_plan,
    load_config_file,
    plan_from_params,
)

PRESET_BLURBS = {
    "table1": "key access collisions binned by residual key count (single store)",
    "table2": "key access collisions versus concurrent application count",
    "table3-hash": "supply creation timing, encryption/decryption hash stores",
    "table3-queue": "supply creation timing, purpose-based byte queues",
    "table3-deque": "supply creation timing, application-shared deques",
}

EXIT_CONFIG = 2
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kmslab", description="key-management storage laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a preset or custom experiment")
    source = run_p.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=PRESET_NAMES)
    source.add_argument("--config", type=Path, help="JSON experiment description")
    run_p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field (repeatable)")
    run_p.add_argument("--out", type=Path, default=Path("results"))
    run_p.add_argument("--full", action="store_true",
                       help="restore the original repetition counts (50 / 1000)")
    run_p.add_argument("--runs", type=int, help="override repeats per point")
    run_p.add_argument("--quiet", action="store_true")
    run_p.set_defaults(handler=cmd_run)

    bench_p = sub.add_parser("bench", help="identical workload across storage designs")
    bench_p.add_argument("--designs", default="hash,queue,deque",
                         help="comma-separated backends")
    bench_p.add_argument("--set", dest="sets", action="append", default=[],
                         metavar="KEY=VALUE")
    bench_p.add_argument("--out", type=Path, default=Path("results"))
    bench_p.add_argument("--full", action="store_true")
    bench_p.add_argument("--runs", type=int)
    bench_p.add_argument("--quiet", action="store_true")
    bench_p.set_defaults(handler=cmd_bench)

    serve_p = sub.add_parser("serve", help="run one key-delivery service node")
    serve_p.add_argument("--bind", required=True, metavar="ADDR:PORT")
    serve_p.add_argument("--peer", required=True, metavar="ADDR:PORT")
    serve_p.add_argument("--role", required=True, choices=("master", "slave"))
    serve_p.add_argument("--design", default="deque",
                         choices=[d.value for d in Design])
    serve_p.add_argument("--default-key-size", type=int, default=64, metavar="BYTES")
    serve_p.add_argument("--seed", type=int, default=100)
    serve_p.add_argument("--feed-rate-kbps", type=int, default=0,
                         help="enable the built-in shared-seed key feed")
    serve_p.add_argument("--feed-key-size", type=int, default=4096, metavar="BYTES")
    serve_p.add_argument("--feed-epoch", type=float, default=0.0,
                         help="shared epoch (unix seconds) for the feed schedule")
    serve_p.set_defaults(handler=cmd_serve)

    presets_p = sub.add_parser("presets", help="list available presets")
    presets_p.set_defaults(handler=cmd_presets)
    return parser


def _progress(quiet: bool):
    if quiet:
        return None

    def report(label: str, done: int, total: int) -> None:
        if done == total or done % 10 == 0:
            print(f"  {label}: run {done}/{total}", flush=True)

    return report


def _print_summary(plan, results) -> None:
    print(f"\n{plan.name}: {sum(a.runs for a in results.values())} runs")
    for label, agg in results.items():
        print(f"- {label} ({agg.runs} runs)")
        if agg.mirror_violations:
            print(f"  mirror violations: {agg.mirror_violations}")
        if plan.kind == "collision-bins":
            for b in agg.bins.bins:
                high = "inf" if b.high == float("inf") else int(b.high)
                print(
                    f"  residual [{int(b.low)}, {high}): "
                    f"{b.collisions} collisions / {b.successes} successes "
                    f"({b.percentage:.3f} %)"
                )
        elif plan.kind == "collision-apps":
            pct = agg.pooled_window_percentage()
            shown = "n/a" if pct is None else f"{pct:.3f} %"
            print(f"  apps {agg.avg_app_count:.0f}: collision share in window {shown}")
        else:
            rows = sorted(agg.timing.items())[:8]
            for (design, size, kpq, default), group in rows:
                print(
                    f"  {design} size={size} n={kpq} default={default}: "
                    f"{group.mean_us:.2f} us (sd {group.stddev_us:.2f}, n={group.n})"
                )
            if agg.avg_deque_count:
                print(
                    f"  avg applications {agg.avg_app_count:.2f}, "
                    f"avg deques {agg.avg_deque_count:.2f}, "
                    f"shared-deque reuse supplies {agg.total_deque_reuse}"
                )


def cmd_run(args) -> int:
    if args.preset:
        plan = build_preset(
            args.preset,
            full_scale=args.full,
            runs_override=args.runs,
            overrides=args.sets,
        )
    else:
        params = apply_overrides(load_config_file(args.config), args.sets)
        plan = plan_from_params(params, full_scale=args.full, runs_override=args.runs)
    results = execute_plan(plan, progress=_progress(args.quiet))
    written = emit_for_plan(plan, results, args.out)
    _print_summary(plan, results)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_bench(args) -> int:
    designs = [d.strip() for d in args.designs.split(",") if d.strip()]
    if not designs:
        raise ConfigError("--designs must name at least one backend")
    plan = bench_plan(
        designs, full_scale=args.full, runs_override=args.runs, overrides=args.sets
    )
    results = execute_plan(plan, progress=_progress(args.quiet))
    written = emit_for_plan(plan, results, args.out)
    hashes = {label: agg.issued_hashes for label, agg in results.items()}
    reference = next(iter(hashes.values()))
    if all(h == reference for h in hashes.values()):
        print("workload check: identical request traces across designs")
    else:
        print("workload check: FAILED, request traces differ across designs")
    _print_summary(plan, results)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_serve(args) -> int:
    from kmslab.service import ServiceConfig, serve

    local, peer = ("kms-a", "kms-b") if args.role == "master" else ("kms-b", "kms-a")
    config = ServiceConfig(
        local_sae_id=local,
        peer_sae_id=peer,
        km=KmConfig(
            design=Design(args.design), default_key_size_bytes=args.default_key_size
        ),
        seed=args.seed,
        feed_key_rate_bps=args.feed_rate_kbps * 1000,
        feed_key_size_bytes=args.feed_key_size,
        feed_epoch_s=args.feed_epoch,
    )
    serve(args.bind, args.peer, args.role, config)
    return 0


def cmd_presets(_args) -> int:
    for name in PRESET_NAMES:
        print(f"{name:14s} {PRESET_BLURBS[name]}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
