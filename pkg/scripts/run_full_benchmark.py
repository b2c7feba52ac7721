#!/usr/bin/env python3
"""Run the whole experiment pipeline: generate, pretrain, benchmark, report.

Usage:
    python scripts/run_full_benchmark.py [--config cfg] [--out runs] [--seed N]

Without a config file this reproduces the default benchmark: desk-scale
cohort at coupling 0.75, shot grid 1/0, 3/1, 5/2, all five strategies,
ten repeat seeds per cell.
"""

import argparse
import sys
import time

from tracttransfer import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--out", default="runs")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    base = ["--out", args.out]
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]

    for step in ("generate", "pretrain", "benchmark"):
        started = time.perf_counter()
        code = cli.main(base + [step])
        print(f"[{step}] exit {code} in {time.perf_counter() - started:.0f}s")
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
