import itertools

import numpy as np
import pytest

from mdsteer.config import AUTO, ChainFrame, Policy
from mdsteer.errors import TooFewPoints, WindowEmpty
from mdsteer.outliers import (NOISE, dbscan, kdist_eps, knn, lof, resolve_eps, select_greedy_rmsd,
                              select_ml_only, select_ml_rmsd)


def frame(sim_id, step, beads=3, lineage=0):
    return ChainFrame(sim_id, 0, step, np.zeros((beads, 2)), lineage)


def dbscan_noise_oracle(x, eps, min_pts):
    """Noise = points not within eps of any core point (definition-level, O(n^2))."""
    n = len(x)
    d = np.array([[np.sqrt(sum((a - b) ** 2 for a, b in zip(x[i], x[j]))) for j in range(n)] for i in range(n)])
    core = [(d[i] <= eps).sum() >= min_pts for i in range(n)]
    return {i for i in range(n) if not any(core[j] and d[i, j] <= eps for j in range(n))}


def cluster_partition_oracle(x, eps, min_pts):
    """Core points partitioned by transitive closure of eps-reachability."""
    n = len(x)
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    core = [i for i in range(n) if (d[i] <= eps).sum() >= min_pts]
    parent = {i: i for i in core}

    def find(a):
        while parent[a] != a:
            a = parent[a]
        return a
    for a, b in itertools.combinations(core, 2):
        if d[a, b] <= eps:
            parent[find(a)] = find(b)
    groups = {}
    for c in core:
        groups.setdefault(find(c), set()).add(c)
    return {frozenset(g) for g in groups.values()}


def test_dbscan_grid_with_isolated_point():
    grid = np.array([(i, j) for i in range(5) for j in range(5)], float)
    x = np.vstack([grid, [[10.0, 10.0]]])
    res = dbscan(x, 1.5, 4)
    assert list(res.noise) == [25]
    assert res.n_clusters == 1
    assert np.all(res.labels[:25] == 0)


def test_dbscan_all_noise_when_min_pts_too_large():
    x = np.random.default_rng(0).random((30, 2))
    assert len(dbscan(x, 0.01, 31).noise) == 30


@pytest.mark.parametrize("seed", range(8))
def test_dbscan_matches_definition_oracle(seed):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0, 0.3, (20, 2)), rng.normal(3, 0.3, (20, 2)), rng.uniform(-2, 5, (10, 2))])
    eps, m = 0.5, 4
    res = dbscan(x, eps, m)
    assert set(res.noise.tolist()) == dbscan_noise_oracle(x, eps, m)
    got = {}
    for i in np.flatnonzero(res.core_flags):
        got.setdefault(res.labels[i], set()).add(int(i))
    assert {frozenset(g) for g in got.values()} == cluster_partition_oracle(x, eps, m)


def test_dbscan_eps_is_inclusive():
    x = np.array([[0.0], [1.0], [2.0]])
    assert len(dbscan(x, 1.0, 2).noise) == 0
    assert len(dbscan(x, 0.999, 2).noise) == 3


def test_dbscan_border_keeps_first_cluster():
    # point 2 is a border of both cluster {0,1} and {3,4}; index order assigns cluster 0
    x = np.array([[0.0], [0.5], [1.0], [1.5], [2.0]])
    res = dbscan(x, 0.5, 3)
    assert res.labels[2] == 0


def test_kdist_eps_and_auto():
    x = np.arange(10, dtype=float)[:, None]
    assert kdist_eps(x, 1) == 1.0
    assert kdist_eps(x, 2) == 1.0  # interior points have two neighbours at distance 1
    assert kdist_eps(x, 3) == 2.0
    assert resolve_eps(x, AUTO, 3) == 2.0
    assert resolve_eps(x, 0.7, 2) == 0.7
    with pytest.raises(TooFewPoints):
        kdist_eps(x[:2], 2)


def test_knn_stable_ties():
    x = np.array([[0.0], [1.0], [-1.0], [2.0]])
    idx, dist = knn(x, 2)
    assert idx[0].tolist() == [1, 2]
    assert dist[0].tolist() == [1.0, 1.0]


def lof_oracle(x, k):
    """Textbook LOF with exact-k neighbourhoods and stable tie order."""
    n = len(x)
    d = [[float(np.linalg.norm(x[i] - x[j])) for j in range(n)] for i in range(n)]
    nb = [sorted((j for j in range(n) if j != i), key=lambda j: (d[i][j], j))[:k] for i in range(n)]
    kd = [d[i][nb[i][-1]] for i in range(n)]
    lrd = [1.0 / (sum(max(kd[o], d[p][o]) for o in nb[p]) / k) for p in range(n)]
    return np.array([sum(lrd[o] for o in nb[p]) / k / lrd[p] for p in range(n)])


def test_lof_matches_textbook_oracle():
    x = np.random.default_rng(1).normal(size=(40, 3))
    for k in (1, 3, 7):
        assert np.allclose(lof(x, k), lof_oracle(x, k), rtol=1e-12)


def test_lof_uniform_lattice_is_one_and_outlier_high():
    grid = np.array([(i, j) for i in range(10) for j in range(10)], float)
    s = lof(grid, 4)
    assert abs(s[55] - 1.0) < 1e-12  # interior point, two rings from any edge
    s2 = lof(np.vstack([grid, [[20.0, 20.0]]]), 4)
    assert s2[-1] > 3 and s2[-1] == s2.max()


def test_lof_invariances():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 2))
    base = lof(x, 5)
    th = 0.8
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    assert np.allclose(lof(x @ rot.T * 3.7 + 5, 5), base, rtol=1e-9)
    perm = rng.permutation(30)
    assert np.allclose(lof(x[perm], 5), base[perm], rtol=1e-9)


def test_lof_coincident_points_score_one():
    x = np.vstack([np.zeros((5, 2)), [[1.0, 1.0]]])
    s = lof(x, 3)
    assert np.all(s[:5] == 1.0)
    assert s[5] == np.inf  # neighbours of infinite density make it infinitely outlying


def test_greedy_rmsd_selection_and_ties():
    recent = [(frame(0, 10), 2.0), (frame(1, 10), 0.5), (frame(2, 5), 0.5), (frame(3, 10), 1.0)]
    res = select_greedy_rmsd(recent, 3)
    got = [(c.frame.sim_id, c.rmsd) for c in res.candidates]
    assert got == [(2, 0.5), (1, 0.5), (3, 1.0)]
    assert res.policy == Policy.GREEDY_RMSD
    assert len(select_greedy_rmsd(recent, 10).candidates) == 4
    with pytest.raises(WindowEmpty):
        select_greedy_rmsd([], 3)


def test_greedy_deduplicates_sources():
    f = frame(0, 10)
    res = select_greedy_rmsd([(f, 0.1), (f, 0.1), (frame(1, 3), 0.9)], 2)
    assert [c.frame.sim_id for c in res.candidates] == [0, 1]


def planted(seed=3, n_in=200, n_out=6):
    rng = np.random.default_rng(seed)
    lat = np.vstack([rng.normal(0, 0.2, (n_in, 2)), rng.uniform(4, 8, (n_out, 2)) * rng.choice([-1, 1], (n_out, 2))])
    frames = [frame(i % 8, i) for i in range(len(lat))]
    rmsds = rng.uniform(0.5, 5, len(lat))
    return lat, frames, rmsds, set(range(n_in, n_in + n_out))


def test_ml_only_recovers_planted_outliers():
    lat, frames, rmsds, out = planted()
    res = select_ml_only(lat, frames, rmsds, 6, eps=1.0, min_pts=5, lof_k=10)
    assert {c.frame.step for c in res.candidates} == out
    scores = [c.outlier_score for c in res.candidates]
    assert scores == sorted(scores, reverse=True)
    assert res.stats["filled"] == 0 and res.stats["outliers"] >= 6


def test_ml_only_fills_short_pool_with_inliers():
    lat, frames, rmsds, out = planted(n_out=2)
    res = select_ml_only(lat, frames, rmsds, 5, eps=1.0, min_pts=5, lof_k=10)
    assert len(res.candidates) == 5
    assert out <= {c.frame.step for c in res.candidates}
    assert res.stats["filled"] == 5 - res.stats["outliers"]


def test_ml_rmsd_picks_lowest_rmsd_outliers():
    lat, frames, rmsds, out = planted()
    rmsds = rmsds.copy()
    rmsds[:200] = np.linspace(0.01, 0.1, 200)  # inliers are all better, must be ignored
    res = select_ml_rmsd(lat, frames, rmsds, 3, eps=1.0, min_pts=5)
    want = sorted(out, key=lambda i: rmsds[i])[:3]
    assert [c.frame.step for c in res.candidates] == want
    assert res.stats["filled"] == 0


def test_ml_rmsd_fill_is_greedy():
    lat, frames, rmsds, out = planted(n_out=1)
    res = select_ml_rmsd(lat, frames, rmsds, 4, eps=1.0, min_pts=5)
    steps = [c.frame.step for c in res.candidates]
    assert list(out)[0] in steps and res.stats["filled"] == 3
    greedy = [c.frame.step for c in select_greedy_rmsd(list(zip(frames, rmsds)), 4).candidates]
    assert set(steps) - out <= set(greedy)
    assert [c.rmsd for c in res.candidates] == sorted(c.rmsd for c in res.candidates)


def test_selectors_zero_r_and_empty():
    lat, frames, rmsds, _ = planted()
    assert select_ml_only(lat, frames, rmsds, 0).candidates == []
    assert select_ml_rmsd(lat, frames, rmsds, 0).candidates == []
    assert select_ml_rmsd(np.zeros((0, 2)), [], [], 3).candidates == []
