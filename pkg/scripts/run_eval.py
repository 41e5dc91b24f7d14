#!/usr/bin/env python3
"""Run the attack evaluation for one or more seeds and write the reports to disk."""
import argparse
import logging
from pathlib import Path

from sentinel.harness import ALL_KINDS, build_fixture, check_expectations, run_evaluation, scenarios_for


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()
    logging.getLogger("sentinel.breaker").setLevel(logging.ERROR)
    args.out.mkdir(parents=True, exist_ok=True)
    failed = False
    for seed in args.seeds:
        with build_fixture(seed) as fx:
            report = run_evaluation(fx, scenarios_for(ALL_KINDS, seed), n=args.n)
            failures = check_expectations(report, fx)
        (args.out / f"eval-seed{seed}.txt").write_text(report.table())
        (args.out / f"eval-seed{seed}.tsv").write_text(report.records())
        print(f"seed {seed}: {'ok' if not failures else '; '.join(failures)}")
        failed |= bool(failures)
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
