#!/usr/bin/env python3
"""Run every experiment preset plus the cross-design benchmark.

Writes the CSV analogues (fig6a through fig9b, bench.csv) into the output
directory. Desk scale by default; pass --full for the original repetition
counts (expect a long run).
"""
import argparse
import sys
import time
from pathlib import Path

from kmslab.experiments import (
    PRESET_NAMES,
    bench_plan,
    build_preset,
    emit_for_plan,
    execute_plan,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("results"))
    parser.add_argument("--full", action="store_true")
    parser.add_argument("--runs", type=int, help="override repeats per point")
    args = parser.parse_args()

    plans = [
        build_preset(name, full_scale=args.full, runs_override=args.runs)
        for name in PRESET_NAMES
    ]
    plans.append(bench_plan(["hash", "queue", "deque"], full_scale=args.full,
                            runs_override=args.runs))
    for plan in plans:
        started = time.time()
        results = execute_plan(plan)
        written = emit_for_plan(plan, results, args.out)
        names = ", ".join(p.name for p in written)
        print(f"{plan.name}: {time.time() - started:.1f}s -> {names}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
