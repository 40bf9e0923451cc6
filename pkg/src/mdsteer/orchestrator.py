"""The two pipelines over one execution model.

Every long-lived component is a generator ("loop") that yields blocking
operations: ``Work`` (occupy the component's slot for a task duration),
``Idle`` (pause without occupying it), ``Put`` and ``Get`` (blocking channel
calls).  Two executors drive the same loops:

* ``VirtualScheduler`` — single-threaded discrete-event simulation.  Time only
  advances to the next pending completion; a loop parked on a channel consumes
  nothing until the channel changes.  Empty event queue with unfinished loops
  is a deadlock.
* ``ThreadExecutor`` — one OS thread per loop with real blocking channels;
  ``Work`` sleeps ``duration * time_scale`` seconds.

F mode is a sequential stage driver over a ``ResourcePool``; S mode wires N
simulation, M aggregator, one trainer and one inference loop with channels.
"""

from __future__ import annotations

import heapq
import itertools
import tempfile
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from . import outliers, toy_sim, vae
from .config import AUTO, ChainFrame, Clock, Coupling, Compression, Mode, Policy, RestartCandidate, RunConfig
from .errors import ChannelClosed, Deadlock, SteerError
from .fabric import (EMPTY, END_OF_STREAM, FrameRecord, Mailbox, SegmentStore, StreamChannel,
                     count_records, decode_records, encode_record)
from .telemetry import FrameEvent, RestartEvent, RunReport, TaskRecord, TaskType, pack_map

# sub-seed labels: every random stream derives from (config.seed, label)
SEED_TRAIN = 0x7472
SEED_MODEL = 0x6D64


# ---------------------------------------------------------------------------
# operations yielded by loops


@dataclass(frozen=True)
class Work:
    task_type: TaskType
    instance: int
    iteration: int
    duration: float
    slot: int


@dataclass(frozen=True)
class Idle:
    duration: float


@dataclass(frozen=True)
class Put:
    ch: StreamChannel
    item: Any


@dataclass(frozen=True)
class Get:
    ch: StreamChannel


Loop = Iterator


# ---------------------------------------------------------------------------
# virtual clock


def virtual_clock_advance(events: list, unfinished: int):
    """Pop the earliest pending event from a heap of ``(time, seq, ...)`` tuples.

    Raises Deadlock when nothing is pending but loops remain unfinished.
    """
    if not events:
        if unfinished:
            raise Deadlock(f"no pending events with {unfinished} unfinished loop(s)")
        raise IndexError("no pending events")
    return heapq.heappop(events)


class VirtualScheduler:
    """Deterministic single-threaded interleaving of loops at their blocking points."""

    def __init__(self):
        self.now = 0.0
        self.records: list[TaskRecord] = []
        self._events: list = []
        self._seq = itertools.count()
        self._loops: dict[str, Loop] = {}
        self._live: list[str] = []
        self._parked_put: dict[StreamChannel, deque] = defaultdict(deque)
        self._parked_get: dict[StreamChannel, deque] = defaultdict(deque)
        self._dirty: list[StreamChannel] = []

    def time(self) -> float:
        return self.now

    def channel(self, ch: StreamChannel) -> StreamChannel:
        ch.waker = self._mark
        return ch

    def _mark(self, ch):
        if ch not in self._dirty:
            self._dirty.append(ch)

    def spawn(self, name: str, loop: Loop):
        self._loops[name] = loop
        self._live.append(name)
        self._resume(name, None)

    def _resume(self, name, value, exc=None, at=None):
        heapq.heappush(self._events, (self.now if at is None else at, next(self._seq), name, value, exc))

    def blocked(self) -> list[str]:
        return [n for q in self._parked_get.values() for n in q] + \
               [n for q in self._parked_put.values() for n, _ in q]

    def run(self):
        while self._live:
            try:
                t, _, name, value, exc = virtual_clock_advance(self._events, len(self._live))
            except Deadlock as d:
                raise Deadlock(f"{d}; blocked: {', '.join(sorted(self.blocked()))}") from None
            self.now = t
            self._step(name, value, exc)
            self._flush()

    def _step(self, name, value, exc):
        loop = self._loops[name]
        try:
            op = loop.throw(exc) if exc is not None else loop.send(value)
        except StopIteration:
            self._live.remove(name)
            return
        if isinstance(op, Work):
            rec = TaskRecord(op.task_type, op.instance, op.iteration, self.now, self.now + op.duration, op.slot)
            self.records.append(rec)
            self._resume(name, rec, at=rec.end)
        elif isinstance(op, Idle):
            self._resume(name, None, at=self.now + op.duration)
        elif isinstance(op, Put):
            if op.ch.closed:
                self._resume(name, None, ChannelClosed(f"put on closed channel {op.ch.tag}"))
            elif op.ch.try_put(op.item):
                self._resume(name, True)
            else:
                self._parked_put[op.ch].append((name, op.item))
        elif isinstance(op, Get):
            item = op.ch.try_get()
            if item is EMPTY:
                self._parked_get[op.ch].append(name)
            else:
                self._resume(name, item)
        else:
            raise TypeError(f"loop {name} yielded {op!r}")

    def _flush(self):
        while self._dirty:
            ch = self._dirty.pop(0)
            puts = self._parked_put.get(ch)
            while puts:
                name, item = puts[0]
                if ch.closed:
                    puts.popleft()
                    self._resume(name, None, ChannelClosed(f"put on closed channel {ch.tag}"))
                elif ch.try_put(item):
                    puts.popleft()
                    self._resume(name, True)
                else:
                    break
            gets = self._parked_get.get(ch)
            while gets:
                item = ch.try_get()
                if item is EMPTY:
                    break
                self._resume(gets.popleft(), item)


class _Aborted(Exception):
    pass


class ThreadExecutor:
    """Runs each loop on its own thread with real blocking channels.

    Times are reported in virtual-equivalent seconds (real elapsed / time_scale).
    A watchdog declares deadlock when every live loop has been blocked on a
    channel with no progress for ``deadlock_timeout`` real seconds.
    """

    def __init__(self, time_scale: float, deadlock_timeout: float = 2.0, poll: float = 0.01):
        self.time_scale = time_scale
        self.deadlock_timeout = deadlock_timeout
        self.poll = poll
        self.records: list[TaskRecord] = []
        self._loops: dict[str, Loop] = {}
        self._lock = threading.Lock()
        self._blocked = 0
        self._live = 0
        self._progress = 0
        self._abort = threading.Event()
        self._deadlock = False
        self._errors: list[BaseException] = []
        self._t0 = time.monotonic()

    def time(self) -> float:
        return (time.monotonic() - self._t0) / self.time_scale

    def channel(self, ch: StreamChannel) -> StreamChannel:
        return ch

    def spawn(self, name: str, loop: Loop):
        self._loops[name] = loop

    def _tick(self):
        with self._lock:
            self._progress += 1

    def _blocking(self, fn):
        with self._lock:
            self._blocked += 1
        try:
            while True:
                if self._abort.is_set():
                    raise Deadlock("watchdog: all loops blocked") if self._deadlock else _Aborted()
                try:
                    return fn(self.poll)
                except TimeoutError:
                    continue
        finally:
            with self._lock:
                self._blocked -= 1

    def _drive(self, name, loop):
        value, exc = None, None
        try:
            while True:
                try:
                    op = loop.throw(exc) if exc is not None else loop.send(value)
                except StopIteration:
                    return
                value, exc = None, None
                if isinstance(op, Work):
                    start = self.time()
                    time.sleep(op.duration * self.time_scale)
                    rec = TaskRecord(op.task_type, op.instance, op.iteration, start,
                                     max(self.time(), start), op.slot)
                    with self._lock:
                        self.records.append(rec)
                    value = rec
                elif isinstance(op, Idle):
                    time.sleep(op.duration * self.time_scale)
                elif isinstance(op, Put):
                    try:
                        value = self._blocking(lambda t: op.ch.put_blocking(op.item, timeout=t))
                    except ChannelClosed as e:
                        exc = e
                elif isinstance(op, Get):
                    value = self._blocking(lambda t: op.ch.get_blocking(timeout=t))
                else:
                    raise TypeError(f"loop {name} yielded {op!r}")
                self._tick()
        except _Aborted:
            pass
        except BaseException as e:  # recorded and re-raised from run()
            with self._lock:
                self._errors.append(e)
            self._abort.set()
        finally:
            with self._lock:
                self._live -= 1
            self._tick()

    def run(self):
        self._t0 = time.monotonic()
        threads = [threading.Thread(target=self._drive, args=(n, lp), name=n, daemon=True)
                   for n, lp in self._loops.items()]
        self._live = len(threads)
        for t in threads:
            t.start()
        last, since = -1, time.monotonic()
        while any(t.is_alive() for t in threads):
            time.sleep(self.poll)
            with self._lock:
                progress, stuck = self._progress, self._live > 0 and self._blocked == self._live
            if progress != last or not stuck:
                last, since = progress, time.monotonic()
            elif time.monotonic() - since > self.deadlock_timeout:
                self._deadlock = True
                self._abort.set()
        for t in threads:
            t.join()
        if self._deadlock:
            raise Deadlock("watchdog: every live loop blocked on a channel")
        if self._errors:
            raise self._errors[0]


def make_executor(config: RunConfig):
    if config.clock == Clock.REAL:
        return ThreadExecutor(config.time_scale)
    return VirtualScheduler()


# ---------------------------------------------------------------------------
# resource pool (F mode)


class ResourcePool:
    """W slots, each running at most one task at a time."""

    def __init__(self, n_slots: int, start: float = 0.0):
        self.free_at = [start] * n_slots
        self.logs: list[list[tuple[float, float]]] = [[] for _ in range(n_slots)]
        self.start = start

    @property
    def n_slots(self) -> int:
        return len(self.free_at)

    @property
    def allocation(self) -> tuple[float, float]:
        return self.start, max(self.free_at)


def schedule(task_type, instance: int, iteration: int, duration: float, pool: ResourcePool,
             ready: float = 0.0, launch_overhead: float = 0.0) -> TaskRecord:
    """Place a task on the earliest-free slot (ties: lowest id); it starts after its launch overhead."""
    slot = min(range(pool.n_slots), key=lambda s: (pool.free_at[s], s))
    start = max(ready, pool.free_at[slot]) + launch_overhead
    rec = TaskRecord(TaskType(task_type), instance, iteration, start, start + duration, slot)
    pool.free_at[slot] = rec.end
    pool.logs[slot].append((rec.start, rec.end))
    return rec


# ---------------------------------------------------------------------------
# shared run state


@dataclass(frozen=True)
class ControlMsg:
    target: int
    action: str  # RESTART | CONTINUE | STOP
    candidate: RestartCandidate | None = None
    lineage_id: int = -1


@dataclass
class _Ctx:
    config: RunConfig
    params: toy_sim.SimParams
    native: toy_sim.NativeReference
    store: SegmentStore
    weights_dir: Path | None
    report: RunReport
    next_lineage: Iterator[int]
    lineage_parent: dict = field(default_factory=dict)

    @property
    def compressed(self) -> bool:
        return self.config.compression == Compression.BITPACK_RLE


def _ctx(config: RunConfig, run_dir: Path | None, seg_root: Path) -> _Ctx:
    params, native = toy_sim.build_system(config)
    weights_dir = None
    if run_dir is not None:
        weights_dir = Path(run_dir) / "weights"
        weights_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport(config)
    report.counters = {
        "SIM": {"iterations": 0},
        "AGG": {"iterations": 0, "instances": 0},
        "TRAIN": {"iterations": 0, "samples": [], "epochs": config.epochs_per_training},
        "INFER": {"iterations": 0, "samples": [], "outliers": []},
        "records": {"produced": 0, "stored": 0, "trained": 0, "inferred": 0},
        "channels": {},
    }
    return _Ctx(config, params, native, SegmentStore(seg_root), weights_dir, report,
                itertools.count(config.n_sims))


def _segment(ctx: _Ctx, frame: ChainFrame, seg: int, hint: int):
    """Run one segment; returns (entries, encoded blob)."""
    cfg = ctx.config
    rng = toy_sim.sim_rng(cfg.seed, frame.sim_id, frame.lineage_id, seg)
    entries = toy_sim.run_segment(frame, ctx.params, rng, ctx.native, cfg.contact_cutoff, seg)
    blob = b"".join(
        encode_record(FrameRecord(e.frame.sim_id, seg, e.frame.step, e.frame.lineage_id,
                                  e.frame.positions, e.rmsd, e.contacts, hint), ctx.compressed)
        for e in entries)
    ctx.report.counters["records"]["produced"] += len(entries)
    return entries, blob


def _log_frames(ctx: _Ctx, entries, start: float, end: float):
    n = len(entries)
    for k, e in enumerate(entries):
        t = start + (end - start) * (k + 1) / n
        ctx.report.frames.append(FrameEvent(t, e.frame.sim_id, e.frame.segment_index, e.frame.step,
                                            e.frame.lineage_id, e.rmsd, pack_map(e.contacts.bits)))


def _acquire(ctx: _Ctx, payload) -> tuple[list[FrameRecord], float]:
    """Decode a payload (bytes, or a (agg_id, start, end) file reference); returns (records, seconds)."""
    t0 = time.perf_counter()
    blob = ctx.store.read_range(*payload) if isinstance(payload, tuple) else payload
    recs = decode_records(blob)
    return recs, time.perf_counter() - t0


def _flat(rec: FrameRecord) -> np.ndarray:
    return rec.contacts.bits.reshape(-1).astype(np.uint8)


def _publish(ctx: _Ctx, model: vae.VaeModel) -> bytes:
    blob = vae.export_weights(model)
    if ctx.weights_dir is not None:
        (ctx.weights_dir / f"weights_v{model.version}.bin").write_bytes(blob)
    return blob


def _train(ctx: _Ctx, model: vae.VaeModel, window, rng) -> vae.VaeModel:
    cfg = ctx.config
    X = np.asarray(window, dtype=np.float64)
    c = ctx.report.counters["TRAIN"]
    c["iterations"] += 1
    c["samples"].append(len(X))
    o = cfg.optimizer
    return vae.train(model, X, cfg.epochs_per_training, rng, lr=o.lr, rho=o.rho, eps=o.eps,
                     batch_size=cfg.batch_size)


def _select(ctx: _Ctx, model, window) -> outliers.SelectionResult:
    """Run the configured policy over the inference window [(frame, rmsd, flat map)]."""
    cfg = ctx.config
    frames = [w[0] for w in window]
    rmsds = np.array([w[1] for w in window])
    R = min(cfg.restart_count, cfg.n_sims)
    if cfg.policy == Policy.GREEDY_RMSD:
        return outliers.select_greedy_rmsd(list(zip(frames, rmsds)), R)
    mu, _ = vae.encode(model, np.array([w[2] for w in window], dtype=np.float64))
    if cfg.policy == Policy.ML_ONLY:
        return outliers.select_ml_only(mu, frames, rmsds, R, eps=cfg.dbscan.eps, min_pts=cfg.dbscan.min_pts,
                                       lof_k=cfg.lof_k, weights_version=model.version)
    return outliers.select_ml_rmsd(mu, frames, rmsds, R, eps=cfg.dbscan.eps, min_pts=cfg.dbscan.min_pts,
                                   weights_version=model.version)


def _emit(ctx: _Ctx, sel: outliers.SelectionResult, now: float, deliver: Callable[[ControlMsg], None]):
    """Candidate k restarts sim k with a freshly assigned lineage id."""
    c = ctx.report.counters["INFER"]
    c["outliers"].append(int(sel.stats.get("outliers", 0)))
    for k, cand in enumerate(sel.candidates[:ctx.config.n_sims]):
        lin = next(ctx.next_lineage)
        ctx.lineage_parent[lin] = cand.frame.lineage_id
        ctx.report.restarts_emitted.append(RestartEvent(now, k, lin, cand.frame.lineage_id, cand.frame.source,
                                                        cand.rmsd, cand.weights_version))
        deliver(ControlMsg(k, "RESTART", cand, lin))


def _apply(ctx: _Ctx, msg: ControlMsg | None, frame: ChainFrame, seg: int, now: float) -> ChainFrame | None:
    """Apply a control message at a segment boundary; None means STOP."""
    if msg is None or msg.action == "CONTINUE":
        return frame
    if msg.action == "STOP":
        return None
    new = ChainFrame(frame.sim_id, seg, frame.step, msg.candidate.frame.positions, msg.lineage_id)
    ctx.report.restarts_applied.append((now, frame.sim_id, seg, msg.lineage_id))
    return new


def _init_model(cfg: RunConfig) -> vae.VaeModel:
    seed = int(np.random.SeedSequence([cfg.seed, SEED_MODEL]).generate_state(1)[0])
    return vae.init_model(cfg.beads, cfg.hidden_units, cfg.latent_dim, cfg.dropout, seed)


def _train_rng(cfg: RunConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, SEED_TRAIN]))


def _budget_left(cfg: RunConfig, seg: int, now: float) -> bool:
    return seg < cfg.budget_segments and now < cfg.budget_seconds


def _finish(ctx: _Ctx, tasks: list[TaskRecord], n_slots: int, status: str = "OK", error: str | None = None):
    rep = ctx.report
    rep.tasks = sorted(tasks, key=lambda t: (t.start, t.task_type.value, t.instance, t.iteration))
    rep.frames.sort(key=lambda e: (e.time, e.sim_id, e.step))
    rep.n_slots = n_slots
    rep.makespan = max((t.end for t in tasks), default=0.0)
    rep.status = status
    if error:
        rep.errors.append(error)
    for tt in TaskType:
        rep.counters.setdefault(tt.value, {})["iterations"] = sum(1 for t in tasks if t.task_type == tt)
    return rep


def _status(exc: BaseException) -> tuple[str, str]:
    if isinstance(exc, Deadlock):
        return "DEADLOCK", f"DEADLOCK: {exc}"
    code = getattr(exc, "code", type(exc).__name__)
    return "ERROR", f"{code}: {exc}"


# ---------------------------------------------------------------------------
# F mode


def run_pipeline_f(config: RunConfig, run_dir: str | Path | None = None) -> RunReport:
    """Sequential stages: all sims, then training (even iterations), then inference, then restarts."""
    if config.mode != Mode.F:
        raise ValueError("run_pipeline_f needs mode F")
    with tempfile.TemporaryDirectory() as tmp:
        seg_root = Path(run_dir) / "segments" if run_dir is not None else Path(tmp)
        ctx = _ctx(config, run_dir, seg_root)
        pool = ResourcePool(config.resolved_slots)
        tasks: list[TaskRecord] = []
        try:
            _drive_f(ctx, pool, tasks)
        except SteerError as exc:
            return _finish(ctx, tasks, pool.n_slots, *_status(exc))
        return _finish(ctx, tasks, pool.n_slots)


def _drive_f(ctx: _Ctx, pool: ResourcePool, tasks: list[TaskRecord]):
    cfg = ctx.config
    dur, lo = cfg.synthetic_durations, cfg.launch_overhead
    N, M = cfg.n_sims, cfg.n_aggregators
    frames = [toy_sim.initial_frame(cfg, i, ctx.native) for i in range(N)]
    pending: dict[int, ControlMsg] = {}
    model = _init_model(cfg)
    rng = _train_rng(cfg)
    train_window: deque = deque(maxlen=cfg.train_window)
    sel_window: deque = deque(maxlen=cfg.selection_window)
    unread: list[tuple[int, int, int]] = []
    now, it = 0.0, 0
    while _budget_left(cfg, it, now):
        # simulation stage
        stage_end = now
        for i in range(N):
            frames[i] = _apply(ctx, pending.pop(i, None), frames[i], it, now)
            if frames[i] is None:
                continue
            entries, blob = _segment(ctx, frames[i], it, 0)
            rec = schedule(TaskType.SIM, i, it, dur.SIM, pool, now, lo)
            tasks.append(rec)
            _log_frames(ctx, entries, rec.start, rec.end)
            unread.append((i % M, *ctx.store.append(i % M, blob)))
            ctx.report.counters["records"]["stored"] += len(entries)
            frames[i] = entries[-1].frame
            stage_end = max(stage_end, rec.end)
        if all(f is None for f in frames):
            break
        # stage-in: the staged files are read once per iteration by the ML stages
        recs, latency = [], 0.0
        for ref in unread:
            r, dt = _acquire(ctx, ref)
            recs.extend(r)
            latency += dt
        unread.clear()
        for r in recs:
            train_window.append(_flat(r))
            sel_window.append((ChainFrame(r.sim_id, r.segment_index, r.step, r.positions, r.lineage_id),
                               r.rmsd, _flat(r)))
        ctx.report.counters["records"]["trained"] += len(recs)
        ctx.report.counters["records"]["inferred"] += len(recs)
        now = stage_end
        if it % 2 == 0:
            ctx.report.latencies["TRAIN"].append(latency)
            model = _train(ctx, model, train_window, rng)
            rec = schedule(TaskType.TRAIN, 0, it // 2, dur.TRAIN, pool, now, lo)
            tasks.append(rec)
            _publish(ctx, model)
            now = rec.end
        if cfg.policy != Policy.NONE and sel_window:
            ctx.report.latencies["INFER"].append(latency)
            sel = _select(ctx, model, sel_window)
            ctx.report.counters["INFER"]["samples"].append(len(sel_window))
            rec = schedule(TaskType.INFER, 0, it, dur.INFER, pool, now, lo)
            tasks.append(rec)
            now = rec.end
            _emit(ctx, sel, now, lambda m: pending.__setitem__(m.target, m))
        it += 1
    for j in range(M):
        if ctx.store.path(j).exists():
            ctx.store.close(j)


# ---------------------------------------------------------------------------
# S mode


def run_pipeline_s(config: RunConfig, run_dir: str | Path | None = None, executor=None) -> RunReport:
    """Concurrent loops: N sims → M aggregators → trainer and inference; inference → sims."""
    if config.mode != Mode.S:
        raise ValueError("run_pipeline_s needs mode S")
    if config.n_sims % config.n_aggregators:
        raise ValueError("n_sims must be divisible by n_aggregators")
    ex = executor or make_executor(config)
    with tempfile.TemporaryDirectory() as tmp:
        seg_root = Path(run_dir) / "segments" if run_dir is not None else Path(tmp)
        ctx = _ctx(config, run_dir, seg_root)
        N, M, Q = config.n_sims, config.n_aggregators, config.channel_capacity
        agg_in = [ex.channel(StreamChannel(Q, f"agg{j}", producers=N // M)) for j in range(M)]
        to_train = ex.channel(StreamChannel(Q, "train", producers=M))
        to_infer = ex.channel(StreamChannel(Q, "infer", producers=M + 1))
        control = [Mailbox() for _ in range(N)]
        for i in range(N):
            ex.spawn(f"sim{i}", _sim_loop(ctx, ex, i, agg_in[i % M], control[i]))
        for j in range(M):
            ex.spawn(f"agg{j}", _agg_loop(ctx, j, N + j, agg_in[j], to_train, to_infer))
        ex.spawn("train", _train_loop(ctx, ex, N + M, to_train, to_infer))
        ex.spawn("infer", _infer_loop(ctx, ex, N + M + 1, to_infer, control))
        ctx.report.counters["AGG"]["instances"] = M
        status = ("OK", None)
        try:
            ex.run()
        except (SteerError, ChannelClosed) as exc:
            status = _status(exc)
        ctx.report.counters["channels"] = {ch.tag: ch.max_occupancy for ch in (*agg_in, to_train, to_infer)}
        return _finish(ctx, list(ex.records), N + M + 2, *status)


def _sim_loop(ctx: _Ctx, ex, i: int, out: StreamChannel, mailbox: Mailbox):
    cfg = ctx.config
    frame = toy_sim.initial_frame(cfg, i, ctx.native)
    hint, seg = 0, 0
    try:
        while _budget_left(cfg, seg, ex.time()):
            if cfg.launch_overhead > 0:
                yield Idle(cfg.launch_overhead)
            msg = mailbox.take()
            frame = _apply(ctx, msg, frame, seg, ex.time())
            if frame is None:
                break
            if msg is not None and msg.candidate is not None:
                hint = msg.candidate.weights_version
            entries, blob = _segment(ctx, frame, seg, hint)
            rec = yield Work(TaskType.SIM, i, seg, cfg.synthetic_durations.SIM, i)
            _log_frames(ctx, entries, rec.start, rec.end)
            yield Put(out, blob)
            frame = entries[-1].frame
            seg += 1
    finally:
        out.producer_done()


def _agg_loop(ctx: _Ctx, j: int, slot: int, inp: StreamChannel, to_train: StreamChannel,
              to_infer: StreamChannel):
    cfg = ctx.config
    it = 0
    done = False
    try:
        while not done:
            batch = []
            while len(batch) < cfg.agg_batch:
                item = yield Get(inp)
                if item is END_OF_STREAM:
                    done = True
                    break
                batch.append(item)
            if not batch:
                break
            yield Work(TaskType.AGG, j, it, cfg.synthetic_durations.AGG, slot)
            blob = b"".join(batch)
            start, end = ctx.store.append(j, blob)
            ctx.report.counters["records"]["stored"] += count_records(blob)
            payload = (j, start, end) if cfg.coupling == Coupling.FILE else blob
            yield Put(to_train, payload)
            yield Put(to_infer, ("DATA", payload))
            it += 1
    finally:
        ctx.store.close(j)
        to_train.producer_done()
        to_infer.producer_done()


def _train_loop(ctx: _Ctx, ex, slot: int, inp: StreamChannel, to_infer: StreamChannel):
    cfg = ctx.config
    model = _init_model(cfg)
    rng = _train_rng(cfg)
    window: deque = deque(maxlen=cfg.train_window)
    it = 0
    try:
        while True:
            items = []
            if not window:
                item = yield Get(inp)
                if item is END_OF_STREAM:
                    return
                items.append(item)
            eos = False
            while True:
                item = inp.try_get()
                if item is EMPTY:
                    break
                if item is END_OF_STREAM:
                    eos = True
                    break
                items.append(item)
            latency = 0.0
            for payload in items:
                recs, dt = _acquire(ctx, payload)
                latency += dt
                window.extend(_flat(r) for r in recs)
                ctx.report.counters["records"]["trained"] += len(recs)
            if eos:
                return
            ctx.report.latencies["TRAIN"].append(latency)
            model = _train(ctx, model, window, rng)
            yield Work(TaskType.TRAIN, 0, it, cfg.synthetic_durations.TRAIN, slot)
            yield Put(to_infer, ("WEIGHTS", _publish(ctx, model)))
            it += 1
    finally:
        to_infer.producer_done()


def _infer_loop(ctx: _Ctx, ex, slot: int, inp: StreamChannel, control: list[Mailbox]):
    cfg = ctx.config
    window: deque = deque(maxlen=cfg.selection_window)
    model = None
    it = 0
    uses_ml = cfg.policy in (Policy.ML_ONLY, Policy.ML_RMSD)
    while True:
        item = yield Get(inp)
        if item is END_OF_STREAM:
            return
        items, eos = [item], False
        while True:
            nxt = inp.try_get()
            if nxt is EMPTY:
                break
            if nxt is END_OF_STREAM:
                eos = True
                break
            items.append(nxt)
        new_data = new_weights = False
        latency = 0.0
        for kind, payload in items:
            if kind == "WEIGHTS":
                model = vae.import_weights(payload)
                new_weights = True
                continue
            recs, dt = _acquire(ctx, payload)
            latency += dt
            new_data = True
            ctx.report.counters["records"]["inferred"] += len(recs)
            for r in recs:
                window.append((ChainFrame(r.sim_id, r.segment_index, r.step, r.positions, r.lineage_id),
                               r.rmsd, _flat(r)))
        ready = cfg.policy != Policy.NONE and window and (model is not None or not uses_ml)
        changed = new_data or (new_weights and uses_ml)
        if ready and changed and not eos:
            ctx.report.latencies["INFER"].append(latency)
            sel = _select(ctx, model, window)
            ctx.report.counters["INFER"]["samples"].append(len(window))
            rec = yield Work(TaskType.INFER, 0, it, cfg.synthetic_durations.INFER, slot)
            _emit(ctx, sel, rec.end, lambda m: control[m.target].post(m))
            it += 1
        if eos:
            return


def run_pipeline(config: RunConfig, run_dir: str | Path | None = None) -> RunReport:
    return run_pipeline_f(config, run_dir) if config.mode == Mode.F else run_pipeline_s(config, run_dir)


def lineage_roots(report: RunReport) -> dict[int, int]:
    """Map every emitted lineage id to its parent lineage."""
    return {r.lineage_id: r.parent_lineage for r in report.restarts_emitted}
