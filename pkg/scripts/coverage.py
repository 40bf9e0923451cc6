"""Sampling coverage of the reference states: steered versus unsteered ensembles.

Builds the oracle reference (long unsteered ensemble from mixed native/extended
starts, reference VAE, k-means states), then reports for each policy the
aggregate simulated steps needed to visit a given fraction of the states.

    python scripts/coverage.py [--seeds 3] [--level 0.8] [--policies ML_RMSD,NONE,GREEDY_RMSD] [--out runs/coverage]
"""

import argparse
from pathlib import Path

import numpy as np

from mdsteer import cli, experiments, telemetry
from mdsteer.orchestrator import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--level", type=float, default=0.8)
    ap.add_argument("--policies", default="ML_RMSD,NONE,GREEDY_RMSD")
    ap.add_argument("--out", help="write the reference and the coverage curves here")
    args = ap.parse_args()
    oracle = run_pipeline(experiments.oracle_config())
    model, ref = cli.build_reference(oracle)
    curves = []
    for pol in args.policies.split(","):
        xs = []
        for seed in range(args.seeds):
            rep = run_pipeline(experiments.steering_config(pol, seed))
            x, y = cli.coverage_curve(rep, model, ref)
            xs.append(telemetry.crossing(x, y, args.level))
            curves.append((f"coverage_{pol}", x, y, seed))
            print(f"{pol} seed {seed}: {args.level:.0%} at {xs[-1]:.0f} steps, final coverage {y[-1]:.3f}, "
                  f"best rmsd {rep.best_rmsd():.3f}", flush=True)
        print(f"{pol}: median steps to {args.level:.0%} = {np.median(xs):.0f}")
    if args.out:
        out = Path(args.out)
        cli.save_reference(out / "reference", model, ref)
        (out / "coverage_curves.csv").write_text(telemetry.curves_csv(curves))
        print(f"reference and curves written to {out}")


if __name__ == "__main__":
    main()
