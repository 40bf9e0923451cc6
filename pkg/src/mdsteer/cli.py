"""Command-line entry point: run, oracle, report, compare, validate.

Run directories follow ``<out>/<name>/{config.txt, segments/, weights/, telemetry/}``;
an oracle run additionally holds ``reference/{weights.bin, centroids.bin}``.
Exit codes: 0 success, 1 configuration error, 2 component error, 3 deadlock.
"""

from __future__ import annotations

import argparse
import struct
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import telemetry, vae
from .config import (ConfigError, Policy, RunConfig, load_config, parse_overrides, replace,
                     serialize_config)
from .errors import CorruptBlob, IOFailure, MissingReference, NoTasks, SteerError
from .orchestrator import run_pipeline
from .telemetry import ReferenceStates, RunReport

EXIT_OK, EXIT_CONFIG, EXIT_COMPONENT, EXIT_DEADLOCK = 0, 1, 2, 3
COVERAGE_LEVEL = 0.8
SEED_ORACLE = 0x6F72

_CENT = struct.Struct("<4sqq")
_CENT_MAGIC = b"CNTR"


# ---------------------------------------------------------------------------
# reference states (frozen model + k-means centroids)


def export_centroids(ref: ReferenceStates) -> bytes:
    c = np.ascontiguousarray(ref.centroids, dtype="<f8")
    return _CENT.pack(_CENT_MAGIC, c.shape[0], c.shape[1]) + c.tobytes()


def import_centroids(blob: bytes, source: str = "") -> ReferenceStates:
    if len(blob) < _CENT.size:
        raise CorruptBlob("centroid blob shorter than its header")
    magic, k, d = _CENT.unpack_from(blob)
    if magic != _CENT_MAGIC or k < 1 or d < 1 or len(blob) != _CENT.size + 8 * k * d:
        raise CorruptBlob("bad centroid blob")
    c = np.frombuffer(blob, dtype="<f8", offset=_CENT.size).reshape(k, d).astype(np.float64)
    return ReferenceStates(c, int(k), source)


def embed(model: vae.VaeModel, report: RunReport) -> np.ndarray:
    """Latent means of every frame of a run, in emission order."""
    if not report.frames:
        return np.zeros((0, model.latent))
    mu, _ = vae.encode(model, report.contact_inputs())
    return mu


def build_reference(report: RunReport) -> tuple[vae.VaeModel, ReferenceStates]:
    """Train the reference model on all oracle frames, then cluster their embeddings."""
    cfg = report.config
    X = report.contact_inputs()
    model = vae.init_model(cfg.beads, cfg.hidden_units, cfg.latent_dim, cfg.dropout,
                           int(np.random.SeedSequence([cfg.seed, SEED_ORACLE]).generate_state(1)[0]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, SEED_ORACLE, 1]))
    o = cfg.optimizer
    model = vae.train(model, X, cfg.epochs_per_training, rng, lr=o.lr, rho=o.rho, eps=o.eps,
                      batch_size=cfg.batch_size)
    ref = telemetry.kmeans(vae.encode(model, X)[0], cfg.kmeans_k, cfg.seed, source=f"oracle-seed{cfg.seed}")
    return model, ref


def save_reference(ref_dir: Path, model: vae.VaeModel, ref: ReferenceStates):
    ref_dir.mkdir(parents=True, exist_ok=True)
    (ref_dir / "weights.bin").write_bytes(vae.export_weights(model))
    (ref_dir / "centroids.bin").write_bytes(export_centroids(ref))


def load_reference(ref_dir) -> tuple[vae.VaeModel, ReferenceStates]:
    ref_dir = Path(ref_dir)
    w, c = ref_dir / "weights.bin", ref_dir / "centroids.bin"
    missing = [p.name for p in (w, c) if not p.exists()]
    if missing:
        raise MissingReference(f"{ref_dir}: missing {', '.join(missing)}")
    return vae.import_weights(w.read_bytes()), import_centroids(c.read_bytes(), str(ref_dir))


def coverage_curve(report: RunReport, model: vae.VaeModel, ref: ReferenceStates):
    """(aggregate simulated steps, fraction of reference states visited) after each frame."""
    z = embed(model, report)
    steps = telemetry.aggregate_steps(len(z), report.config.sim.report_interval)
    return telemetry.sampling_ratio(z, ref, steps)


def run_curves(report: RunReport, reference=None) -> list:
    fa = report.frame_arrays()
    trial = report.config.seed
    t, r = telemetry.best_rmsd_curve(fa["time"], fa["rmsd"])
    curves = [("best_rmsd", t, r, trial)]
    if reference is not None:
        x, y = coverage_curve(report, *reference)
        curves.append(("coverage", x, y, trial))
    return curves


# ---------------------------------------------------------------------------
# run directories


def write_run_dir(run_dir: Path, report: RunReport, reference=None):
    tele = run_dir / "telemetry"
    telemetry.save_report(report, tele)
    write_exports(run_dir, report, reference)


def write_exports(run_dir: Path, report: RunReport, reference=None):
    tele = run_dir / "telemetry"
    telemetry.export_timeline(report, tele / "timeline.csv")
    telemetry.export_report(report, tele / "summary.txt")
    telemetry.export_gantt(report, tele / "gantt.svg")
    (tele / "curves.csv").write_text(telemetry.curves_csv(run_curves(report, reference)))


def summary_line(report: RunReport) -> str:
    return (f"mode={report.config.mode.value} policy={report.config.policy.value} "
            f"iterations={len(report.tasks_of('SIM'))} best_rmsd={report.best_rmsd():.4f} "
            f"overhead_s={telemetry.overhead(report):.1f} status={report.status}")


def exit_code(report: RunReport) -> int:
    return {"OK": EXIT_OK, "DEADLOCK": EXIT_DEADLOCK}.get(report.status, EXIT_COMPONENT)


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        return load_config(args.config, overrides)
    except OSError as exc:
        raise ConfigError("CONSTRAINT_VIOLATION", [f"cannot read config: {exc}"]) from exc


def _run_dir(args, config: RunConfig) -> Path:
    name = args.name or f"{config.mode.value}-{config.policy.value}-seed{config.seed}"
    return Path(args.out) / name


def execute(config: RunConfig, run_dir: Path, reference=None) -> RunReport:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(serialize_config(config))
    report = run_pipeline(config, run_dir)
    write_run_dir(run_dir, report, reference)
    return report


# ---------------------------------------------------------------------------
# verbs


def cmd_validate(args) -> int:
    cfg = _config(args)
    print(serialize_config(cfg), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    reference = load_reference(args.reference) if args.reference else None
    run_dir = _run_dir(args, cfg)
    report = execute(cfg, run_dir, reference)
    print(summary_line(report))
    for err in report.errors:
        print(err, file=sys.stderr)
    return exit_code(report)


def cmd_oracle(args) -> int:
    cfg = _config(args)
    if cfg.policy != Policy.NONE:
        cfg = replace(cfg, policy="NONE")
    run_dir = _run_dir(args, cfg)
    report = execute(cfg, run_dir)
    if report.status != "OK":
        print(summary_line(report))
        return exit_code(report)
    model, ref = build_reference(report)
    save_reference(run_dir / "reference", model, ref)
    (run_dir / "telemetry" / "curves.csv").write_text(
        telemetry.curves_csv(run_curves(report, (model, ref))))
    print(summary_line(report) + f" reference={run_dir / 'reference'} k={ref.k}")
    return EXIT_OK


def cmd_report(args) -> int:
    reference = load_reference(args.reference) if args.reference else None
    for d in args.dirs:
        run_dir = Path(d)
        report = telemetry.load_report(run_dir / "telemetry")
        write_exports(run_dir, report, reference)
        print(f"{run_dir}: {summary_line(report)}")
    return EXIT_OK


def _label(report: RunReport) -> str:
    c = report.config
    return f"{c.mode.value}/{c.policy.value}"


def compare_text(reports: list[tuple[str, RunReport]], reference=None, latency: bool = False) -> str:
    groups: dict[str, list[RunReport]] = defaultdict(list)
    for _, rep in reports:
        groups[_label(rep)].append(rep)
    labels = list(groups)
    out = []

    # throughput ratios relative to the first group
    out.append("Throughput (iterations/hour per instance), ratio vs " + labels[0])
    base = {}
    for tt in ("SIM", "TRAIN", "INFER"):
        try:
            base[tt] = np.mean([telemetry.throughput(r, tt) for r in groups[labels[0]]])
        except NoTasks:
            base[tt] = float("nan")
    for lab in labels:
        cells = []
        for tt in ("SIM", "TRAIN", "INFER"):
            try:
                v = float(np.mean([telemetry.throughput(r, tt) for r in groups[lab]]))
                ratio = v / base[tt] if base[tt] and np.isfinite(base[tt]) else float("nan")
                cells.append(f"{tt} {v:.3f} ({ratio:.3f}x)")
            except NoTasks:
                cells.append(f"{tt} N/A")
        out.append(f"  {lab}: " + "; ".join(cells))

    # Table I: best rmsd over trials
    out.append(f"Best RMSD in {max(len(g) for g in groups.values())} trials")
    out.append("  policy | mean ± std | min | max | trials")
    for lab in labels:
        b = np.array([r.best_rmsd() for r in groups[lab]])
        out.append(f"  {lab} | {b.mean():.3f} ± {b.std():.3f} | {b.min():.3f} | {b.max():.3f} | {len(b)}")

    if reference is not None:
        out.append(f"Coverage: aggregate steps to reach {COVERAGE_LEVEL:.0%} of {reference[1].k} reference states")
        for lab in labels:
            xs = []
            for r in groups[lab]:
                x, y = coverage_curve(r, *reference)
                xs.append(telemetry.crossing(x, y, COVERAGE_LEVEL))
            finals = [coverage_curve(r, *reference)[1][-1] if r.frames else 0.0 for r in groups[lab]]
            out.append(f"  {lab}: crossing {' '.join(f'{v:.0f}' for v in xs)} | final coverage "
                       f"{' '.join(f'{v:.3f}' for v in finals)}")

    if latency:
        (na, a), (nb, b) = reports[0], reports[1]
        text, _ = telemetry.read_latency_table(a, b)
        out.append(f"Read latency per iteration (before = {na}, after = {nb})")
        out.extend("  " + line for line in text.splitlines())
    return "\n".join(out) + "\n"


def cmd_compare(args) -> int:
    reference = load_reference(args.reference) if args.reference else None
    reports = [(d, telemetry.load_report(Path(d) / "telemetry")) for d in args.dirs]
    text = compare_text(reports, reference, latency=args.latency)
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdsteer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def config_flags(sp):
        sp.add_argument("--config", "-c", help="config file (key = value lines)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, help="seed override")

    for verb, fn in (("run", cmd_run), ("oracle", cmd_oracle)):
        sp = sub.add_parser(verb)
        config_flags(sp)
        sp.add_argument("--out", default="run", help="parent of run directories (default: run)")
        sp.add_argument("--name", help="run directory name (default: <mode>-<policy>-seed<seed>)")
        if verb == "run":
            sp.add_argument("--reference", help="oracle reference directory for coverage curves")
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("validate")
    config_flags(sp)
    sp.set_defaults(fn=cmd_validate)
    sp = sub.add_parser("report")
    sp.add_argument("dirs", nargs="+")
    sp.add_argument("--reference")
    sp.set_defaults(fn=cmd_report)
    sp = sub.add_parser("compare")
    sp.add_argument("dirs", nargs="+")
    sp.add_argument("--reference")
    sp.add_argument("--latency", action="store_true", help="read-latency table of the first two dirs")
    sp.add_argument("--output", "-o")
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SteerError, IOFailure) as exc:
        print(f"error [{getattr(exc, 'code', type(exc).__name__)}]: {exc}", file=sys.stderr)
        return EXIT_COMPONENT


if __name__ == "__main__":
    sys.exit(main())
