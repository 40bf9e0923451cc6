"""Reusable desk-scale experiments (driven by ``scripts/`` and the acceptance tests).

Every experiment runs on the virtual clock unless stated otherwise, so results are
deterministic functions of the configuration and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cli, telemetry
from .config import RunConfig, validate_config
from .orchestrator import run_pipeline
from .telemetry import RunReport

HOUR = 3600.0

# Measured per-task durations (virtual seconds) for the sequential (F) and streaming (S) rows.
DURATIONS_F = {"SIM": 591.0, "TRAIN": 282.0, "INFER": 111.0, "AGG": 3.2}
DURATIONS_S = {"SIM": 576.0, "TRAIN": 216.0, "INFER": 13.0, "AGG": 3.2}
# Fixed per-task launch cost of a simulation task (job start-up, file staging).
LAUNCH_OVERHEAD = 33.0

# Small physics/ML settings for the timing replays: only the schedule matters there.
_CHEAP = {"sim.steps_per_segment": 200, "sim.report_interval": 100, "epochs_per_training": 1,
          "hidden_units": 8, "latent_dim": 3, "dbscan.min_pts": 4, "lof_k": 5}

# Steering landscape and ML sizes for the policy and coverage experiments: a 4-bead-row
# serpentine native state below its melting temperature, where greedy restarts often lock
# into compact misfolds that outlier-driven restarts escape.
STEERING = {"mode": "S", "n_sims": 8, "n_aggregators": 2, "budget_segments": 70, "sim.row_length": 4,
            "sim.temperature": 0.4, "hidden_units": 32, "epochs_per_training": 2, "batch_size": 64,
            "train_window": 1000, "selection_window": 1000}


def durations(table: dict) -> dict:
    return {f"synthetic_durations.{k}": v for k, v in table.items()}


# ---------------------------------------------------------------------------
# throughput replay (F vs S)


def throughput_configs(budget_hours: float = 7.0, n_sims: int = 4, n_aggregators: int = 2,
                       launch_overhead: float = LAUNCH_OVERHEAD, **overrides) -> tuple[RunConfig, RunConfig]:
    common = {**_CHEAP, "n_sims": n_sims, "n_aggregators": n_aggregators, "budget_seconds": budget_hours * HOUR,
              "budget_segments": 10**6, "launch_overhead": launch_overhead, "policy": "GREEDY_RMSD", **overrides}
    f = validate_config({**common, "mode": "F", **durations(DURATIONS_F)})
    s = validate_config({**common, "mode": "S", **durations(DURATIONS_S)})
    return f, s


@dataclass
class ThroughputResult:
    f: RunReport
    s: RunReport
    rates: dict = field(default_factory=dict)  # {"F": {"SIM": it/h, ...}, "S": {...}}

    def ratio(self, task_type: str) -> float:
        return self.rates["S"][task_type] / self.rates["F"][task_type]

    def summary(self) -> str:
        return telemetry.summary_text({"F": telemetry.summary_row(self.f.tasks, self.f.counters),
                                       "S": telemetry.summary_row(self.s.tasks, self.s.counters)})


def throughput_replay(**kw) -> ThroughputResult:
    fc, sc = throughput_configs(**kw)
    f, s = run_pipeline(fc), run_pipeline(sc)
    rates = {name: {tt: telemetry.throughput(r, tt) for tt in ("SIM", "TRAIN", "INFER")}
             for name, r in (("F", f), ("S", s))}
    return ThroughputResult(f, s, rates)


# ---------------------------------------------------------------------------
# read latency (file staging + compression vs in-memory streaming)


def latency_configs(beads: int = 256, budget_segments: int = 5, seed: int = 0) -> tuple[RunConfig, RunConfig]:
    common = {**_CHEAP, "beads": beads, "n_sims": 4, "n_aggregators": 2, "budget_segments": budget_segments,
              "sim.steps_per_segment": 100, "sim.report_interval": 10, "policy": "GREEDY_RMSD", "seed": seed,
              "mode": "S"}
    before = validate_config({**common, "coupling": "FILE", "compression": "BITPACK_RLE"})
    after = validate_config({**common, "coupling": "STREAM", "compression": "NONE"})
    return before, after


def latency_experiment(workdir, **kw) -> tuple[str, dict, RunReport, RunReport]:
    bc, ac = latency_configs(**kw)
    workdir = Path(workdir)
    before = run_pipeline(bc, workdir / "before")
    after = run_pipeline(ac, workdir / "after")
    text, stats = telemetry.read_latency_table(before, after)
    return text, stats, before, after


# ---------------------------------------------------------------------------
# steering policies


def steering_config(policy: str, seed: int, **overrides) -> RunConfig:
    return validate_config({**STEERING, **overrides, "policy": policy, "seed": seed})


def steering_trials(policies, seeds, out_dir=None, reference=None, **overrides) -> dict[str, list[RunReport]]:
    """Run every (policy, seed) pair; optionally persist each run directory."""
    out: dict[str, list[RunReport]] = {}
    for pol in policies:
        out[pol] = []
        for seed in seeds:
            cfg = steering_config(pol, seed, **overrides)
            if out_dir is None:
                out[pol].append(run_pipeline(cfg))
            else:
                out[pol].append(cli.execute(cfg, Path(out_dir) / f"{pol}-seed{seed}", reference))
    return out


def pooled_std(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.sqrt(((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2)))


def best_rmsd_table(results: dict[str, list[RunReport]]) -> str:
    lines = ["policy | mean ± std | min | max | trials"]
    for pol, reps in results.items():
        b = np.array([r.best_rmsd() for r in reps])
        lines.append(f"{pol} | {b.mean():.3f} ± {b.std(ddof=1) if len(b) > 1 else 0.0:.3f} | "
                     f"{b.min():.3f} | {b.max():.3f} | {len(b)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sampling coverage against a frozen reference


ORACLE_SEGMENTS = 2 * STEERING["budget_segments"]


def oracle_config(seed: int = 1000, **overrides) -> RunConfig:
    """Unsteered ensemble, twice the steering budget, half started native and half extended,
    so the reference states span the folded basin as well as the unfolded ones."""
    return validate_config({**STEERING, "policy": "NONE", "initial_state": "MIXED",
                            "budget_segments": ORACLE_SEGMENTS, "epochs_per_training": 10, "kmeans_k": 50,
                            "seed": seed, **overrides})


def build_oracle(seed: int = 1000, **overrides):
    report = run_pipeline(oracle_config(seed, **overrides))
    return cli.build_reference(report)


def coverage_crossing(report: RunReport, reference, level: float = 0.8) -> tuple[float, float]:
    """(aggregate steps to reach ``level`` coverage, final coverage) of one run."""
    x, y = cli.coverage_curve(report, *reference)
    return telemetry.crossing(x, y, level), float(y[-1]) if len(y) else 0.0


def coverage_experiment(reference, seeds=(0,), policies=("ML_RMSD", "NONE"), level: float = 0.8,
                        runs: dict[str, list[RunReport]] | None = None,
                        **overrides) -> dict[str, list[tuple[float, float]]]:
    """Per policy and seed: (steps to ``level`` of the reference states, final coverage).

    Runs already available in ``runs`` (policy -> reports in seed order) are reused."""
    out: dict[str, list[tuple[float, float]]] = {}
    for pol in policies:
        have = (runs or {}).get(pol)
        reps = have if have is not None else [run_pipeline(steering_config(pol, s, **overrides)) for s in seeds]
        out[pol] = [coverage_crossing(r, reference, level) for r in reps]
    return out
