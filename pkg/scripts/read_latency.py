"""Per-iteration data-acquisition latency: file staging + compression versus in-memory streaming.

    python scripts/read_latency.py [--beads 256] [--segments 3] [--workdir runs/latency]
"""

import argparse
import tempfile

from mdsteer import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--beads", type=int, default=256)
    ap.add_argument("--segments", type=int, default=5)
    ap.add_argument("--workdir")
    args = ap.parse_args()
    workdir = args.workdir or tempfile.mkdtemp(prefix="latency-")
    text, stats, _, _ = experiments.latency_experiment(workdir, beads=args.beads, budget_segments=args.segments)
    print("before = FILE + BITPACK_RLE, after = STREAM + NONE (real seconds per iteration)")
    print(text, end="")
    for comp in ("TRAIN", "INFER"):
        b, a = stats[comp]["before"][0], stats[comp]["after"][0]
        print(f"{comp}: {b / a:.1f}x lower" if a > 0 else f"{comp}: after is 0")


if __name__ == "__main__":
    main()
