"""Run reports and every measurement derived from them: throughput, overhead,
timelines, Gantt charts, k-means reference states, coverage (sampling ratio)
and best-RMSD curves, and the read-latency comparison table.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig, serialize_config, parse_config_text, validate_config
from .errors import IOFailure, MismatchedWorkloads, NoTasks, TooFewPoints
from .fabric import upper_triangle

HOUR = 3600.0


class TaskType(str, Enum):
    SIM = "SIM"
    AGG = "AGG"
    TRAIN = "TRAIN"
    INFER = "INFER"


@dataclass(frozen=True)
class TaskRecord:
    task_type: TaskType
    instance: int
    iteration: int
    start: float
    end: float
    slot: int

    def __post_init__(self):
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        if self.end < self.start:
            raise ValueError("task ends before it starts")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class FrameEvent:
    """One reported frame: when it was emitted and what it looked like."""

    time: float
    sim_id: int
    segment_index: int
    step: int
    lineage_id: int
    rmsd: float
    packed_map: bytes  # np.packbits of the strict upper triangle


@dataclass(frozen=True)
class RestartEvent:
    time: float
    target: int
    lineage_id: int  # new lineage assigned to the restarted sim
    parent_lineage: int  # lineage of the frame restarted from
    source: tuple[int, int]  # (sim_id, step) of that frame
    rmsd: float
    weights_version: int


@dataclass
class RunReport:
    config: RunConfig
    tasks: list[TaskRecord] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    latencies: dict = field(default_factory=lambda: {"TRAIN": [], "INFER": []})
    frames: list[FrameEvent] = field(default_factory=list)
    restarts_emitted: list[RestartEvent] = field(default_factory=list)
    restarts_applied: list[tuple] = field(default_factory=list)  # (time, sim_id, segment_index, lineage_id)
    n_slots: int = 0
    makespan: float = 0.0
    status: str = "OK"
    errors: list[str] = field(default_factory=list)

    def tasks_of(self, task_type) -> list[TaskRecord]:
        tt = TaskType(task_type)
        return [t for t in self.tasks if t.task_type == tt]

    def frame_arrays(self) -> dict[str, np.ndarray]:
        f = self.frames
        return {
            "time": np.array([e.time for e in f], dtype=np.float64),
            "sim_id": np.array([e.sim_id for e in f], dtype=np.int64),
            "segment_index": np.array([e.segment_index for e in f], dtype=np.int64),
            "step": np.array([e.step for e in f], dtype=np.int64),
            "lineage_id": np.array([e.lineage_id for e in f], dtype=np.int64),
            "rmsd": np.array([e.rmsd for e in f], dtype=np.float64),
        }

    def contact_inputs(self) -> np.ndarray:
        """Flattened B×B contact maps of every frame, in emission order."""
        return unpack_maps([e.packed_map for e in self.frames], self.config.beads)

    def best_rmsd(self) -> float:
        return min((e.rmsd for e in self.frames), default=float("inf"))


def pack_map(bits: np.ndarray) -> bytes:
    return np.packbits(bits[upper_triangle(len(bits))]).tobytes()


def unpack_maps(packed: Sequence[bytes], beads: int) -> np.ndarray:
    n_bits = beads * (beads - 1) // 2
    out = np.zeros((len(packed), beads, beads), dtype=np.float64)
    if not len(packed):
        return out.reshape(0, beads * beads)
    raw = np.frombuffer(b"".join(packed), dtype=np.uint8).reshape(len(packed), -1)
    flat = np.unpackbits(raw, axis=1, count=n_bits).astype(np.float64)
    iu = upper_triangle(beads)
    out[:, iu[0], iu[1]] = flat
    out += out.transpose(0, 2, 1)
    out[:, np.arange(beads), np.arange(beads)] = 1.0
    return out.reshape(len(packed), beads * beads)


# ---------------------------------------------------------------------------
# accounting


def _busy_within(intervals: Iterable[tuple[float, float]], lo: float, hi: float) -> float:
    """Length of the union of intervals clipped to [lo, hi]."""
    busy, cur_s, cur_e = 0.0, None, None
    for s, e in sorted((max(s, lo), min(e, hi)) for s, e in intervals):
        if e <= s:
            continue
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                busy += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        busy += cur_e - cur_s
    return busy


def slot_logs(tasks: Iterable[TaskRecord], n_slots: int) -> list[list[tuple[float, float]]]:
    logs: list[list[tuple[float, float]]] = [[] for _ in range(n_slots)]
    for t in tasks:
        logs[t.slot].append((t.start, t.end))
    return logs


def overhead(report_or_pool, pool=None) -> float:
    """Σ over slots of (allocation span − busy time).

    Accepts a RunReport (slots = ``n_slots``, allocation = [0, makespan]) or
    any pool object exposing ``logs`` (per-slot intervals) and ``allocation``
    ((start, end) shared by all slots).
    """
    src = pool if pool is not None else report_or_pool
    if isinstance(src, RunReport):
        logs = slot_logs(src.tasks, src.n_slots)
        lo, hi = 0.0, src.makespan
    else:
        logs = src.logs
        lo, hi = src.allocation
    return sum((hi - lo) - _busy_within(log, lo, hi) for log in logs)


def throughput(report_or_tasks, task_type, per_instance: bool = True) -> float:
    """Iterations per hour over the span from first start to last end of that type.

    With ``per_instance`` the count is divided by the number of distinct
    instances, giving the rate of one sim/aggregator as Table II reports it.
    """
    tasks = report_or_tasks.tasks if isinstance(report_or_tasks, RunReport) else report_or_tasks
    tt = TaskType(task_type)
    sel = [t for t in tasks if t.task_type == tt]
    if not sel:
        raise NoTasks(f"no {tt.value} tasks")
    span = max(t.end for t in sel) - min(t.start for t in sel)
    if span <= 0:
        raise NoTasks(f"{tt.value} tasks have zero span")
    count = len(sel) / (len({t.instance for t in sel}) if per_instance else 1)
    return count / (span / HOUR)


# ---------------------------------------------------------------------------
# reference states and coverage


@dataclass(frozen=True, eq=False)
class ReferenceStates:
    centroids: np.ndarray
    k: int
    source: str = ""
    inertia_history: tuple[float, ...] = ()

    def assign(self, points) -> np.ndarray:
        return _nearest(np.asarray(points, dtype=np.float64), self.centroids)[0]


def _nearest(x: np.ndarray, c: np.ndarray):
    d2 = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    idx = np.argmin(d2, axis=1)
    exact = ((x - c[idx]) ** 2).sum(1)
    return idx, exact


def kmeans(points, k: int, seed: int, max_iter: int = 300, source: str = "") -> ReferenceStates:
    """Lloyd's algorithm with k-means++ seeding; empty clusters restart at the farthest point."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if not n >= k >= 1:
        raise TooFewPoints(f"kmeans needs n >= k >= 1 (n={n}, k={k})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B6D]))
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = int(rng.choice(n, p=d2 / total)) if total > 0 else int(np.argmax(d2))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    c = np.array(centers)
    labels = None
    history = []
    for _ in range(max_iter):
        new, dist = _nearest(x, c)
        history.append(float(dist.sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                c[j] = x[members].mean(0)
            else:
                far = int(np.argmax(_nearest(x, c)[1]))
                c[j] = x[far]
                labels[far] = j
    return ReferenceStates(c, k, source, tuple(history))


def aggregate_steps(n_frames: int, report_interval: int) -> np.ndarray:
    """Aggregate simulated steps after each emitted frame (ensemble-summed)."""
    return (np.arange(1, n_frames + 1, dtype=np.int64)) * report_interval


def sampling_ratio(latents, ref: ReferenceStates, steps=None) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of reference states traversed after each frame (nondecreasing, ≤ 1)."""
    z = np.asarray(latents, dtype=np.float64)
    n = len(z)
    x = np.asarray(steps if steps is not None else np.arange(1, n + 1))
    if n == 0:
        return x.astype(np.float64), np.zeros(0)
    labels = ref.assign(z)
    seen = np.zeros(ref.k, dtype=bool)
    y = np.empty(n)
    count = 0
    for i, lab in enumerate(labels):
        if not seen[lab]:
            seen[lab] = True
            count += 1
        y[i] = count / ref.k
    return x.astype(np.float64), y


def crossing(x, y, level: float) -> float:
    """First x at which y reaches ``level``; inf if never."""
    hit = np.flatnonzero(np.asarray(y) >= level - 1e-12)
    return float(np.asarray(x)[hit[0]]) if len(hit) else float("inf")


def best_rmsd_curve(times, rmsds) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=np.float64)
    r = np.asarray(rmsds, dtype=np.float64)
    if len(r) == 0:
        return t, r
    order = np.argsort(t, kind="stable")
    return t[order], np.minimum.accumulate(r[order])


# ---------------------------------------------------------------------------
# exports

TIMELINE_COLUMNS = ["task_type", "instance", "iteration", "slot", "start", "end"]


def timeline_csv(tasks: Iterable[TaskRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMELINE_COLUMNS)
    for t in tasks:
        w.writerow([t.task_type.value, t.instance, t.iteration, t.slot, repr(float(t.start)), repr(float(t.end))])
    return buf.getvalue()


def parse_timeline(text: str) -> list[TaskRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [TaskRecord(TaskType(r["task_type"]), int(r["instance"]), int(r["iteration"]),
                       float(r["start"]), float(r["end"]), int(r["slot"])) for r in rows]


def _write(path: Path, content, binary=False):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(content) if binary else path.write_text(content)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc


def export_timeline(report: RunReport, path) -> Path:
    path = Path(path)
    _write(path, timeline_csv(report.tasks))
    return path


_COLORS = {TaskType.SIM: "#4c78a8", TaskType.AGG: "#72b7b2", TaskType.TRAIN: "#f58518", TaskType.INFER: "#e45756"}


def gantt_svg(tasks: Sequence[TaskRecord], width: int = 1000, row_h: int = 14) -> str:
    """One row per (task type, instance), one rect per task."""
    rows = sorted({(t.task_type.value, t.instance) for t in tasks},
                  key=lambda r: (list(TaskType.__members__).index(r[0]), r[1]))
    index = {r: i for i, r in enumerate(rows)}
    t0 = min((t.start for t in tasks), default=0.0)
    t1 = max((t.end for t in tasks), default=1.0)
    scale = (width - 110) / max(t1 - t0, 1e-12)
    h = row_h * len(rows) + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" font-family="monospace" font-size="10">']
    for r, i in index.items():
        out.append(f'<text x="2" y="{i * row_h + row_h - 3}">{r[0]} {r[1]}</text>')
    for t in tasks:
        y = index[(t.task_type.value, t.instance)] * row_h
        x = 100 + (t.start - t0) * scale
        w = max((t.end - t.start) * scale, 0.5)
        out.append(f'<rect x="{x:.3f}" y="{y + 1}" width="{w:.3f}" height="{row_h - 2}" '
                   f'fill="{_COLORS[t.task_type]}"><title>{t.task_type.value} {t.instance} '
                   f'it{t.iteration} [{t.start:.1f}, {t.end:.1f}]</title></rect>')
    out.append(f'<text x="100" y="{h - 8}">t = {t0:.0f} .. {t1:.0f} s</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_gantt(report: RunReport, path) -> Path:
    path = Path(path)
    _write(path, gantt_svg(report.tasks))
    return path


def _fmt_count(n) -> str:
    if n is None:
        return "N/A"
    return f"{n / 1000:.0f}K" if n >= 1000 else f"{n:.0f}"


def summary_row(tasks: Sequence[TaskRecord], counters: dict) -> dict[str, str]:
    """Table II columns for one run; times and rates come only from the task records."""

    def mean_time(tt):
        sel = [t.duration for t in tasks if t.task_type == tt]
        return f"{np.mean(sel):.1f} s" if sel else "N/A"

    def rate(tt):
        try:
            return f"{throughput(tasks, tt):.1f}"
        except NoTasks:
            return "N/A"

    agg = counters.get("AGG", {})
    tr = counters.get("TRAIN", {})
    inf = counters.get("INFER", {})

    def samples(c):
        s = c.get("samples")
        return _fmt_count(float(np.mean(s))) if s else "N/A"

    outl = inf.get("outliers")
    return {
        "sim_time": mean_time(TaskType.SIM), "sim_ith": rate(TaskType.SIM),
        "agg_time": mean_time(TaskType.AGG), "agg_ith": rate(TaskType.AGG),
        "agg_tasks": str(agg.get("instances", "N/A")) if agg.get("instances") else "N/A",
        "train_time": mean_time(TaskType.TRAIN), "train_ith": rate(TaskType.TRAIN),
        "train_samples": samples(tr), "train_epochs": str(tr.get("epochs", "N/A")),
        "infer_time": mean_time(TaskType.INFER), "infer_ith": rate(TaskType.INFER),
        "infer_samples": samples(inf),
        "infer_outliers": f"{min(outl)}--{max(outl)}" if outl else "N/A",
    }


SUMMARY_HEADER = (
    "System | Simulation: time iter/h | Aggregation: time it/h tasks | "
    "Training: time it/h sample/it epochs | Inference: time it/h sample/it outliers"
)


def summary_text(rows: dict[str, dict[str, str]]) -> str:
    """Table II layout: one line per system (e.g. F and S)."""
    lines = [SUMMARY_HEADER]
    for name, r in rows.items():
        lines.append(
            f"{name} | {r['sim_time']} {r['sim_ith']} | {r['agg_time']} {r['agg_ith']} {r['agg_tasks']} | "
            f"{r['train_time']} {r['train_ith']} {r['train_samples']} {r['train_epochs']} | "
            f"{r['infer_time']} {r['infer_ith']} {r['infer_samples']} {r['infer_outliers']}"
        )
    return "\n".join(lines) + "\n"


def export_report(report: RunReport, path, name: str | None = None) -> Path:
    """Structured text summary with the Table II columns plus run-level figures."""
    path = Path(path)
    name = name or report.config.mode.value
    body = summary_text({name: summary_row(report.tasks, report.counters)})
    body += (f"status: {report.status}\nmakespan_s: {report.makespan!r}\n"
             f"overhead_s: {overhead(report)!r}\nframes: {len(report.frames)}\n"
             f"best_rmsd: {report.best_rmsd()!r}\nrestarts_emitted: {len(report.restarts_emitted)}\n"
             f"restarts_applied: {len(report.restarts_applied)}\n")
    _write(path, body)
    return path


CURVE_COLUMNS = ["kind", "x", "y", "trial"]


def curves_csv(curves: Iterable[tuple[str, Sequence[float], Sequence[float], int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for kind, xs, ys, trial in curves:
        for x, y in zip(xs, ys):
            w.writerow([kind, repr(float(x)), repr(float(y)), trial])
    return buf.getvalue()


def parse_curves(text: str) -> dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]:
    out: dict[tuple[str, int], tuple[list, list]] = {}
    for r in csv.DictReader(io.StringIO(text)):
        xs, ys = out.setdefault((r["kind"], int(r["trial"])), ([], []))
        xs.append(float(r["x"]))
        ys.append(float(r["y"]))
    return {k: (np.array(v[0]), np.array(v[1])) for k, v in out.items()}


# ---------------------------------------------------------------------------
# read latency (Table IV analog)


def _mean_std(xs) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    return (float(a.mean()), float(a.std())) if len(a) else (float("nan"), float("nan"))


def workload_signature(config: RunConfig) -> dict:
    """Everything except the transport choices must agree for a fair latency comparison."""
    d = config.to_dict()
    for key in ("compression", "coupling"):
        d.pop(key)
    return d


def read_latency_table(before: RunReport, after: RunReport) -> tuple[str, dict]:
    if workload_signature(before.config) != workload_signature(after.config):
        raise MismatchedWorkloads("runs differ in more than compression/coupling")
    stats = {}
    for comp in ("TRAIN", "INFER"):
        stats[comp] = {"before": _mean_std(before.latencies.get(comp, [])),
                       "after": _mean_std(after.latencies.get(comp, []))}

    def cell(ms):
        m, s = ms
        return f"{_num(m)} ± {_num(s)} s"

    lines = ["| Before | After", *(
        f"{label} | {cell(stats[c]['before'])} | {cell(stats[c]['after'])}"
        for label, c in (("Training", "TRAIN"), ("Inference", "INFER")))]
    return "\n".join(lines) + "\n", stats


def _num(v: float) -> str:
    if not np.isfinite(v):
        return "nan"
    if v == 0:
        return "0"
    return f"{v:.0f}" if abs(v) >= 10 else f"{v:.3g}"


# ---------------------------------------------------------------------------
# persistence of whole reports


def save_report(report: RunReport, tele_dir) -> None:
    tele = Path(tele_dir)
    tele.mkdir(parents=True, exist_ok=True)
    export_timeline(report, tele / "timeline.csv")
    arrays = report.frame_arrays()
    width = (report.config.beads * (report.config.beads - 1) // 2 + 7) // 8
    maps = np.frombuffer(b"".join(e.packed_map for e in report.frames), dtype=np.uint8).reshape(-1, width)
    np.savez(tele / "frames.npz", maps=maps, **arrays)
    meta = {
        "config": serialize_config(report.config),
        "counters": report.counters,
        "latencies": report.latencies,
        "restarts_emitted": [asdict(r) for r in report.restarts_emitted],
        "restarts_applied": [list(r) for r in report.restarts_applied],
        "n_slots": report.n_slots,
        "makespan": report.makespan,
        "status": report.status,
        "errors": report.errors,
    }
    _write(tele / "report.json", json.dumps(meta, indent=1, sort_keys=True))


def load_report(tele_dir) -> RunReport:
    tele = Path(tele_dir)
    try:
        meta = json.loads((tele / "report.json").read_text())
        tasks = parse_timeline((tele / "timeline.csv").read_text())
        data = np.load(tele / "frames.npz")
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    cfg = validate_config(parse_config_text(meta["config"]))
    frames = [
        FrameEvent(float(t), int(s), int(g), int(st), int(lin), float(r), m.tobytes())
        for t, s, g, st, lin, r, m in zip(data["time"], data["sim_id"], data["segment_index"], data["step"],
                                          data["lineage_id"], data["rmsd"], data["maps"])
    ]
    restarts = [RestartEvent(r["time"], r["target"], r["lineage_id"], r["parent_lineage"],
                             tuple(r["source"]), r["rmsd"], r["weights_version"]) for r in meta["restarts_emitted"]]
    return RunReport(cfg, tasks, meta["counters"], meta["latencies"], frames, restarts,
                     [tuple(r) for r in meta["restarts_applied"]], meta["n_slots"], meta["makespan"],
                     meta["status"], meta["errors"])
