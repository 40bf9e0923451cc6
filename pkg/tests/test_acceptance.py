"""The thirteen acceptance criteria, each reporting one PASS/FAIL line.

Steering criteria (3, 4, 5) share one set of seeded runs through module fixtures.
"""

import itertools
import math
import time

import numpy as np
import pytest

from mdsteer import cli, experiments, telemetry
from mdsteer.config import ContactMap, validate_config
from mdsteer.errors import Deadlock
from mdsteer.fabric import StreamChannel, compress_map, compression_factor, decompress_map
from mdsteer.orchestrator import Get, Put, VirtualScheduler, run_pipeline
from mdsteer.outliers import NOISE, dbscan, lof
from mdsteer.telemetry import RunReport, TaskRecord, TaskType, overhead
from mdsteer.vae import PARAM_ORDER, VaeModel, elbo_loss, init_model, kl_divergence, loss_and_grads

SEEDS = range(10)


# --- 1, 2: throughput replay -----------------------------------------------------------


@pytest.fixture(scope="module")
def replay():
    t0 = time.perf_counter()
    res = experiments.throughput_replay(budget_hours=7.0)
    return res, time.perf_counter() - t0


def test_01_throughput_ratio(replay, verdict):
    res, secs = replay
    sim, train = res.ratio("SIM"), res.ratio("TRAIN")
    verdict(1, sim >= 1.4 and train >= 6 and secs < 10,
            f"S/F simulation it/h ratio {sim:.3f} (>= 1.4), trainer ratio {train:.2f} (>= 6), {secs:.1f} s")


def test_02_table2_reconstruction(replay, verdict):
    res, secs = replay
    s, f = res.rates["S"]["SIM"], res.rates["F"]["SIM"]
    text = res.summary()
    rows = {line.split(" | ")[0]: line for line in text.splitlines()[1:]}
    shown = rows["S"].split(" | ")[1].endswith(" 5.9") and rows["F"].split(" | ")[1].endswith(" 3.9")
    verdict(2, abs(s - 5.9) <= 0.1 and abs(f - 3.9) <= 0.1 and shown and secs < 10,
            f"sim it/h S {s:.3f} (5.9 ± 0.1), F {f:.3f} (3.9 ± 0.1), summary rows show 5.9 / 3.9")


# --- 3, 4, 5: steering ------------------------------------------------------------------


@pytest.fixture(scope="module")
def steering():
    t0 = time.perf_counter()
    res = experiments.steering_trials(("ML_RMSD", "GREEDY_RMSD", "ML_ONLY"), SEEDS)
    return res, time.perf_counter() - t0


def test_03_policy_ordering(steering, verdict):
    res, secs = steering
    best = {p: np.array([r.best_rmsd() for r in reps]) for p, reps in res.items()}
    m, g, o = (best[p].mean() for p in ("ML_RMSD", "GREEDY_RMSD", "ML_ONLY"))
    ps = experiments.pooled_std(best["ML_RMSD"], best["GREEDY_RMSD"])
    print(experiments.best_rmsd_table(res))
    verdict(3, m < g < o and (g - m) > 0.5 * ps and secs < 15 * 60,
            f"mean best rmsd ML_RMSD {m:.3f} < GREEDY {g:.3f} < ML_ONLY {o:.3f}; "
            f"GREEDY-ML {g - m:.3f} vs half pooled std {0.5 * ps:.3f}; {secs / 60:.1f} min")


def test_05_paired_best_rmsd(steering, verdict):
    res, _ = steering
    ml = [r.best_rmsd() for r in res["ML_RMSD"]]
    gr = [r.best_rmsd() for r in res["GREEDY_RMSD"]]
    wins = sum(a <= b for a, b in zip(ml, gr))
    verdict(5, wins >= 7, f"ML_RMSD final best rmsd <= GREEDY_RMSD in {wins}/10 paired seeds (>= 7)")


@pytest.fixture(scope="module")
def oracle_reference():
    t0 = time.perf_counter()
    ref = experiments.build_oracle()
    return ref, time.perf_counter() - t0


def test_04_sampling_acceleration(steering, oracle_reference, verdict):
    t0 = time.perf_counter()
    res, _ = steering
    oracle_reference, oracle_secs = oracle_reference
    ml = res["ML_RMSD"]
    none = [run_pipeline(experiments.steering_config("NONE", r.config.seed)) for r in ml]
    assert all(len(a.frames) == len(b.frames) for a, b in zip(ml, none))
    cov = experiments.coverage_experiment(oracle_reference, runs={"ML_RMSD": ml, "NONE": none})
    m = float(np.median([c for c, _ in cov["ML_RMSD"]]))
    u = float(np.median([c for c, _ in cov["NONE"]]))
    secs = time.perf_counter() - t0 + oracle_secs
    per_seed = ", ".join(f"{a / 1e3:.0f}k/{b / 1e3:.0f}k" for (a, _), (b, _) in zip(cov["ML_RMSD"], cov["NONE"]))
    print(f"steps to 80% coverage per seed (ML_RMSD/unsteered): {per_seed}")
    verdict(4, math.isfinite(m) and m <= 0.5 * u and secs < 15 * 60,
            f"median steps to 80% of {oracle_reference[1].k} states over {len(ml)} paired seeds: "
            f"ML_RMSD {m:.0f}, unsteered {u:.0f}; factor {u / m if m else math.inf:.2f} (>= 2); {secs / 60:.1f} min")


# --- 6, 7: outlier oracles --------------------------------------------------------------


def dbscan_oracle(x, eps, min_pts):
    """Labels from reachability: core components numbered by lowest member index,
    borders join the earliest component among their core neighbours."""
    n = len(x)
    d = np.array([[math.dist(x[i], x[j]) for j in range(n)] for i in range(n)])
    core = [(d[i] <= eps).sum() >= min_pts for i in range(n)]
    comp = [-1] * n
    for i in range(n):
        if core[i] and comp[i] < 0:
            comp[i], stack = i, [i]
            while stack:
                p = stack.pop()
                for q in range(n):
                    if core[q] and comp[q] < 0 and d[p, q] <= eps:
                        comp[q] = i
                        stack.append(q)
    order = {c: k for k, c in enumerate(sorted({c for c in comp if c >= 0}))}
    labels = []
    for i in range(n):
        if core[i]:
            labels.append(order[comp[i]])
        else:
            reach = [order[comp[j]] for j in range(n) if core[j] and d[i, j] <= eps]
            labels.append(min(reach) if reach else NOISE)
    return np.array(labels)


def test_06_dbscan_oracle(verdict):
    t0 = time.perf_counter()
    cases = mismatches = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(c, 0.4, (25, 2)) for c in rng.uniform(-3, 3, (3, 2))] +
                      [rng.uniform(-5, 5, (25, 2))])
        for eps, min_pts in itertools.product((0.15, 0.3, 0.5, 0.8, 1.2), (1, 2, 4, 6, 10)):
            cases += 1
            mismatches += not np.array_equal(dbscan(x, eps, min_pts).labels, dbscan_oracle(x, eps, min_pts))
    secs = time.perf_counter() - t0
    verdict(6, mismatches == 0 and cases == 500 and secs < 30,
            f"{cases - mismatches}/{cases} (seed, eps, min_pts) label vectors identical to the reachability "
            f"oracle; {secs:.1f} s")


def lof_oracle(x, k):
    n = len(x)
    d = [[math.dist(x[i], x[j]) for j in range(n)] for i in range(n)]
    nb = [sorted((j for j in range(n) if j != i), key=lambda j: (d[i][j], j))[:k] for i in range(n)]
    kd = [d[i][nb[i][-1]] for i in range(n)]
    lrd = [k / sum(max(kd[o], d[p][o]) for o in nb[p]) for p in range(n)]
    return np.array([sum(lrd[o] for o in nb[p]) / k / lrd[p] for p in range(n)])


def test_07_lof_oracle(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed, n in zip(range(6), (20, 50, 100, 37, 64, 100)):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(size=(n - 3, 3)), rng.uniform(-8, 8, (3, 3))])
        for k in (3, 5, 10):
            worst = max(worst, float(np.max(np.abs(lof(x, k) - lof_oracle(x, k)))))
    secs = time.perf_counter() - t0
    verdict(7, worst < 1e-9 and secs < 10, f"max |lof - oracle| = {worst:.2e} (< 1e-9) for k in 3,5,10; {secs:.1f} s")


# --- 8: VAE gradients and KL ------------------------------------------------------------


def test_08_vae_gradients_and_kl(verdict):
    rng = np.random.default_rng(8)
    h, worst = 1e-5, 0.0
    for point in range(20):
        m = init_model(4, 6, 3, 0.0, seed=point)
        p = {k: v + rng.normal(size=v.shape) * 0.3 for k, v in m.params.items()}
        X = (rng.random((5, 16)) < 0.4).astype(float)
        noise = rng.standard_normal((5, 3))
        _, _, _, g = loss_and_grads(VaeModel(4, 6, 3, p, 0.0), X, noise)
        a, f = [], []
        for k in PARAM_ORDER:
            for idx in np.ndindex(p[k].shape):
                q = {kk: vv.copy() for kk, vv in p.items()}
                q[k][idx] += h
                up = elbo_loss(VaeModel(4, 6, 3, q, 0.0), X, noise)[0]
                q[k][idx] -= 2 * h
                dn = elbo_loss(VaeModel(4, 6, 3, q, 0.0), X, noise)[0]
                a.append(g[k][idx])
                f.append((up - dn) / (2 * h))
        a, f = np.array(a), np.array(f)
        worst = max(worst, np.linalg.norm(a - f) / max(np.linalg.norm(a) + np.linalg.norm(f), 1e-12))
    mu, lv = rng.normal(size=(10_000, 10)) * 3, rng.normal(size=(10_000, 10)) * 3
    kl_min = min(kl_divergence(mu[i], lv[i]) for i in range(10_000))
    closed = abs(kl_divergence(np.ones(10), np.zeros(10)) - 5.0)
    verdict(8, worst < 1e-4 and kl_min >= 0 and closed <= 1e-12,
            f"max relative gradient error {worst:.2e} (< 1e-4) over 20 points; min KL over 1e4 draws "
            f"{kl_min:.3e} (>= 0); |kl(1,0) - d/2| = {closed:.1e}")


# --- 9: codec --------------------------------------------------------------------------


def test_09_codec(verdict):
    rng = np.random.default_rng(9)
    bad = 0
    min_any, min_sparse = math.inf, math.inf
    for i in range(100_000):
        size = 256 if i % 1000 == 0 else int(rng.integers(4, 65))
        density = rng.random() * (0.1 if i % 2 else 1.0)
        m = np.eye(size, dtype=bool)
        iu = np.triu_indices(size, 1)
        m[iu] = rng.random(len(iu[0])) < density
        m |= m.T
        cmap = ContactMap(m)
        blob = compress_map(cmap)
        bad += decompress_map(blob, size) != cmap
        factor = size * size / len(blob)
        min_any = min(min_any, factor)
        if size >= 22 and m[iu].mean() <= 0.1:
            min_sparse = min(min_sparse, factor)
    toy = compression_factor(ContactMap(np.eye(28, dtype=bool)))
    verdict(9, bad == 0 and min_sparse >= 16 and min_any >= 8 and toy >= 16,
            f"1e5 fuzzed maps round-trip ({bad} mismatches); min factor at <= 10% density {min_sparse:.2f} "
            f"(>= 16, B >= 22); min factor on any map {min_any:.2f} (>= 8, B >= 4)")


# --- 10: backpressure ------------------------------------------------------------------


def test_10_backpressure(verdict):
    slow = {"synthetic_durations.AGG": 2000.0, "synthetic_durations.TRAIN": 5000.0}
    worst, runs, ok = 0, 0, True
    for n, m, q in itertools.product((2, 4, 8), (1, 2), (1, 2)):
        if n <= m or n % m:
            continue
        cfg = validate_config({"mode": "S", "n_sims": n, "n_aggregators": m, "channel_capacity": q,
                               "budget_segments": 3, "sim.steps_per_segment": 100, "sim.report_interval": 50,
                               "hidden_units": 8, "latent_dim": 3, "epochs_per_training": 1, "lof_k": 5,
                               "dbscan.min_pts": 4, "policy": "ML_RMSD", **slow})
        rep = run_pipeline(cfg)
        runs += 1
        occ = max(rep.counters["channels"].values())
        ok &= rep.status == "OK" and occ <= q and rep.counters["records"]["stored"] == n * 3 * 2
        if q == 1:
            worst = max(worst, occ)
    ex = VirtualScheduler()
    a, b = ex.channel(StreamChannel(1, "a")), ex.channel(StreamChannel(1, "b"))

    def loop(inp, out):
        yield Get(inp)
        yield Put(out, 1)
    ex.spawn("A", loop(a, b))
    ex.spawn("B", loop(b, a))
    try:
        ex.run()
        detected = False
    except Deadlock:
        detected = True
    verdict(10, ok and worst <= 1 and detected,
            f"{runs} (N, M, Q) runs with a slow consumer terminated with all records stored; max occupancy at "
            f"Q=1 is {worst}; mis-wired cycle raised Deadlock: {detected}")


# --- 11: overhead accounting -------------------------------------------------------------


def test_11_overhead(verdict):
    rng = np.random.default_rng(11)
    exact = True
    for trial in range(200):
        slots = int(rng.integers(1, 5))
        tasks, gaps, ends = [], 0.0, []
        for s in range(slots):
            t = 0.0
            for k in range(int(rng.integers(1, 6))):
                gap = float(rng.integers(0, 400)) if k else 0.0
                dur = float(rng.integers(1, 900))
                gaps += gap
                tasks.append(TaskRecord(TaskType.SIM, s, k, t + gap, t + gap + dur, s))
                t += gap + dur
            ends.append(t)
        makespan = max(ends)
        gaps += sum(makespan - e for e in ends)
        rep = RunReport(validate_config({}), tasks, n_slots=slots, makespan=makespan)
        exact &= overhead(rep) == gaps
    cfg = validate_config({})
    planted = overhead(RunReport(cfg, [TaskRecord(TaskType.SIM, 0, 0, 0.0, 576.0, 0),
                                       TaskRecord(TaskType.SIM, 0, 1, 886.0, 1462.0, 0)], n_slots=1, makespan=1462.0))
    packed = overhead(RunReport(cfg, [TaskRecord(TaskType.SIM, s, k, k * 576.0, (k + 1) * 576.0, s)
                                      for s in range(4) for k in range(5)], n_slots=4, makespan=5 * 576.0))
    verdict(11, exact and planted == 310.0 and packed == 0.0,
            f"200 random planted-gap schedules reproduced exactly: {exact}; planted 310 s gap -> {planted}; "
            f"fully packed -> {packed}")


# --- 12: read latency -------------------------------------------------------------------


def test_12_read_latency(tmp_path, verdict):
    text, stats, before, after = experiments.latency_experiment(tmp_path, beads=256)
    lines = text.strip().splitlines()
    shape = (len(lines) == 3 and lines[0].split("|")[1:] == [" Before ", " After"]
             and [ln.split(" | ")[0] for ln in lines[1:]] == ["Training", "Inference"]
             and all(cell.count("±") == 1 for ln in lines[1:] for cell in ln.split(" | ")[1:]))
    lower = all(stats[c]["after"][0] < stats[c]["before"][0] for c in ("TRAIN", "INFER"))
    print(text)
    verdict(12, shape and lower and before.status == after.status == "OK",
            "B=256 acquisition latency FILE+BITPACK_RLE -> STREAM+NONE: "
            + "; ".join(f"{c} {stats[c]['before'][0]:.2e} -> {stats[c]['after'][0]:.2e} s" for c in ("TRAIN", "INFER"))
            + f"; table shape component x before/after with mean ± std: {shape}")


# --- 13: determinism --------------------------------------------------------------------


def test_13_determinism(tmp_path, verdict):
    small = ["--set", "sim.steps_per_segment=400", "--set", "sim.report_interval=100", "--set", "hidden_units=8",
             "--set", "latent_dim=3", "--set", "epochs_per_training=2", "--set", "budget_segments=4",
             "--set", "kmeans_k=10", "--set", "lof_k=5", "--set", "dbscan.min_pts=4"]
    assert cli.main(["oracle", *small, "--out", str(tmp_path), "--name", "oracle", "--seed", "99"]) == 0
    same = []
    for pol in ("ML_RMSD", "GREEDY_RMSD", "ML_ONLY"):
        outs = []
        for rep in range(2):
            name = f"{pol}-{rep}"
            assert cli.main(["run", *small, "--set", f"policy={pol}", "--seed", "5", "--out", str(tmp_path),
                             "--name", name, "--reference", str(tmp_path / "oracle" / "reference")]) == 0
            tele = tmp_path / name / "telemetry"
            outs.append(((tele / "curves.csv").read_bytes(), (tele / "timeline.csv").read_bytes()))
        same.append(outs[0] == outs[1])
    verdict(13, all(same), f"curves.csv and timeline.csv bit-identical across repeated seeded runs "
                           f"(ML_RMSD, GREEDY_RMSD, ML_ONLY): {same}")
