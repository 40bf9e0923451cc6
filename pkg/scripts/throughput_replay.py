"""Replay the F and S schedules with measured task durations and report iterations/hour.

    python scripts/throughput_replay.py [--hours 7] [--launch-overhead 33] [--out runs/throughput]
"""

import argparse
from pathlib import Path

from mdsteer import cli, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=7.0)
    ap.add_argument("--launch-overhead", type=float, default=experiments.LAUNCH_OVERHEAD)
    ap.add_argument("--out", help="write F and S run directories here")
    args = ap.parse_args()
    res = experiments.throughput_replay(budget_hours=args.hours, launch_overhead=args.launch_overhead)
    for name in ("F", "S"):
        print(name, " ".join(f"{tt} {v:.3f} it/h" for tt, v in res.rates[name].items()))
    print(f"S/F ratio: simulation {res.ratio('SIM'):.3f}, training {res.ratio('TRAIN'):.3f}, "
          f"inference {res.ratio('INFER'):.3f}")
    print(res.summary(), end="")
    if args.out:
        for name, rep in (("F", res.f), ("S", res.s)):
            d = Path(args.out) / name
            d.mkdir(parents=True, exist_ok=True)
            cli.write_run_dir(d, rep)
        print(f"run directories written to {args.out}")


if __name__ == "__main__":
    main()
