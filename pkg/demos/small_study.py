"""Short replication study comparing correct and misspecified working mechanisms.

    python demos/small_study.py [--scenario S1] [--replicates 50] [--workers 4]
"""

import argparse

from shadowfit.simulate import run_study, scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="S1", choices=("S1", "S2", "S3", "S4"))
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    report = run_study(
        scenario(args.scenario), ["empirical"], args.replicates, args.seed,
        mechs=["correct", "misspecified"], workers=args.workers,
    )
    print(report.to_table())
    print(f"\nwall clock {report.wall_clock:.1f} s")


if __name__ == "__main__":
    main()
