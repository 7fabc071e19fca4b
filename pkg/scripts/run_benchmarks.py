#!/usr/bin/env python3
"""Solver comparison sweep: multigrid vs SSOR preconditioning, rank scaling.

Writes the aggregate table to stdout and benchmark_table.csv.  Mirrors the
measurement protocol of the CLI (`parfem-bench`): wall clock around the
linear solve only, trimmed mean over five repeats.
"""

import argparse

from parfem.bench_cli import RunConfig, report_table, run


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--levels", type=int, default=3)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--csv", default="benchmark_table.csv")
    args = parser.parse_args()

    reports = []
    for solver in ("mg_fgmres", "ssor_fgmres"):
        for ranks in (1, 2, 4):
            cfg = RunConfig(
                problem="hemker2d",
                levels=args.levels,
                ranks=ranks,
                solver=solver,
                repeats=args.repeats,
                maxit=2000,
            )
            print(f"running hemker2d {solver} ranks={ranks} ...", flush=True)
            reports.append(run(cfg))
    for levels in (3, 4, 5):
        cfg = RunConfig(problem="poisson_mms", levels=levels, solver="mg_fgmres",
                        repeats=args.repeats)
        print(f"running poisson_mms mg levels={levels} ...", flush=True)
        reports.append(run(cfg))

    table, _ = report_table(reports, csv_path=args.csv)
    print()
    print(table)
    print(f"\nwrote {args.csv}")


if __name__ == "__main__":
    main()
