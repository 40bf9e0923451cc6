"""Latent-space novelty detection and restart selection.

DBSCAN marks points that are not density-reachable from any core point as
noise; those are the outlier pool.  LOF ranks outliers by how sparse their
neighbourhood is relative to their neighbours'.  Three selection policies turn
the pool into restart candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .config import AUTO, ChainFrame, Policy, RestartCandidate
from .errors import TooFewPoints, WindowEmpty

NOISE = -1
_CHUNK = 1024
_FULL_MATRIX = 4096  # selections up to this many points share one distance matrix


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    labels: np.ndarray
    core_flags: np.ndarray

    @property
    def noise(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NOISE)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass(frozen=True)
class SelectionResult:
    candidates: list[RestartCandidate]
    policy: Policy
    stats: dict[str, int] = field(default_factory=dict)


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _row_blocks(x: np.ndarray, dist: np.ndarray | None = None, copy: bool = True):
    """Yield (row slice, exact distance block) with bounded temporary memory.

    A precomputed full matrix ``dist`` is yielded as one block (copied unless ``copy=False``).
    """
    n, d = x.shape
    if dist is not None:
        yield slice(0, n), (np.array(dist, dtype=np.float64) if copy else dist)
        return
    step = max(1, min(_CHUNK, 20_000_000 // max(n * d, 1)))
    for s in range(0, n, step):
        rows = slice(s, min(s + step, n))
        yield rows, cdist(x[rows], x)


def _pairwise(x: np.ndarray) -> np.ndarray | None:
    return cdist(x, x) if len(x) <= _FULL_MATRIX else None


def _neighbors(x: np.ndarray, eps: float, dist=None) -> list[np.ndarray]:
    """Indices within ``eps`` (inclusive, self included), ascending."""
    out = []
    for _, d in _row_blocks(x, dist, copy=False):
        mask = d <= eps
        cols = np.nonzero(mask)[1]
        out.extend(np.split(cols, np.cumsum(mask.sum(axis=1))[:-1]))
    return out


def dbscan(points, eps: float, min_pts: int, dist=None) -> ClusterLabels:
    """Index-order DBSCAN; a border point keeps the first cluster that reaches it.

    ``dist`` optionally supplies the precomputed pairwise distance matrix.
    """
    x = _as_points(points)
    n = len(x)
    if n < 1 or not eps > 0 or min_pts < 1:
        raise ValueError("dbscan needs n >= 1, eps > 0, min_pts >= 1")
    nbrs = _neighbors(x, eps, dist)
    core = np.array([len(nb) >= min_pts for nb in nbrs], dtype=bool)
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = [i]
        head = 0
        while head < len(queue):
            p = queue[head]
            head += 1
            qs = nbrs[p]
            new = qs[labels[qs] == NOISE]
            labels[new] = cluster
            queue.extend(new[core[new]].tolist())
        cluster += 1
    return ClusterLabels(labels, core)


def _kth_distances(x: np.ndarray, k: int, dist=None) -> np.ndarray:
    out = np.empty(len(x))
    for rows, d in _row_blocks(x, dist):
        r = np.arange(rows.stop - rows.start)
        d[r, r + rows.start] = np.inf
        out[rows] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def kdist_eps(points, k: int, dist=None) -> float:
    """Median over points of the distance to their k-th nearest neighbour."""
    x = _as_points(points)
    if not len(x) > k >= 1:
        raise TooFewPoints(f"need more than k={k} points, got {len(x)}")
    return float(np.median(_kth_distances(x, k, dist)))


def resolve_eps(points, eps, min_pts: int, dist=None) -> float:
    if eps != AUTO:
        return float(eps)
    n = len(points)
    if n < 2:
        return 1.0
    e = kdist_eps(points, min(min_pts, n - 1), dist)
    return e if e > 0 else 1e-12


def knn(points, k: int, dist=None) -> tuple[np.ndarray, np.ndarray]:
    """(indices, distances) of the k nearest other points; ties go to the lower index."""
    x = _as_points(points)
    n = len(x)
    if not n > k >= 1:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    idx = np.empty((n, k), dtype=np.int64)
    out = np.empty((n, k))
    for rows, d in _row_blocks(x, dist):
        r = np.arange(rows.stop - rows.start)
        d[r, r + rows.start] = np.inf
        order = _k_smallest(d, k)
        idx[rows] = order
        out[rows] = np.take_along_axis(d, order, axis=1)
    return idx, out


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k smallest entries ordered by (value, index)."""
    cand = np.argpartition(d, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d, cand, axis=1)
    order = np.take_along_axis(cand, np.lexsort((cand, vals), axis=1), axis=1)
    # rows with ties at the k-th value may have picked the wrong tied index
    kth = np.take_along_axis(d, order[:, -1:], axis=1)
    within = (d <= kth).sum(axis=1)
    tied = np.flatnonzero(within > k)
    if len(tied):
        # every entry <= the k-th value lies among each row's m smallest
        m = int(within[tied].max())
        sub = d[tied]
        cand = np.argpartition(sub, m - 1, axis=1)[:, :m]
        vals = np.take_along_axis(sub, cand, axis=1)
        order[tied] = np.take_along_axis(cand, np.lexsort((cand, vals), axis=1), axis=1)[:, :k]
    return order


def lof(points, k: int, dist=None) -> np.ndarray:
    """Local outlier factor with exactly k neighbours per point.

    Points whose local reachability density is infinite (at least k+1
    coincident copies) score 1.0.
    """
    idx, nd = knn(points, k, dist)
    kdist = nd[:, -1]
    reach = np.maximum(kdist[idx], nd)
    mean_reach = reach.mean(axis=1)
    with np.errstate(divide="ignore"):
        lrd = np.where(mean_reach > 0, 1.0 / np.where(mean_reach > 0, mean_reach, 1.0), np.inf)
    finite = np.isfinite(lrd)
    with np.errstate(invalid="ignore"):
        ratio = lrd[idx].mean(axis=1) / np.where(finite, lrd, 1.0)
    return np.where(finite, ratio, 1.0)


# ---------------------------------------------------------------------------
# selection policies


def _rmsd_order(frames: Sequence[ChainFrame], rmsds, subset) -> list[int]:
    """Sort indices by (rmsd, step, sim_id)."""
    return sorted(subset, key=lambda i: (rmsds[i], frames[i].step, frames[i].sim_id))


def _unique_sources(order, frames):
    seen = set()
    for i in order:
        key = frames[i].source
        if key not in seen:
            seen.add(key)
            yield i


def _candidates(frames, rmsds, picks, scores, policy, version):
    return [RestartCandidate(frames[i], float(rmsds[i]), float(scores[i]), policy, version) for i in picks]


def select_ml_only(latents, frames: Sequence[ChainFrame], rmsds, R: int, *, eps=AUTO,
                   min_pts: int = 11, lof_k: int = 20, weights_version: int = 0) -> SelectionResult:
    """DBSCAN noise ranked by LOF descending; short pools are filled with the highest-LOF inliers."""
    if len(latents) != len(frames):
        raise ValueError("latents and frames differ in length")
    n = len(frames)
    if R <= 0 or n == 0:
        return SelectionResult([], Policy.ML_ONLY, {"points": n, "outliers": 0, "filled": 0})
    x = _as_points(latents)
    dist = _pairwise(x)
    labels = dbscan(x, resolve_eps(x, eps, min_pts, dist), min_pts, dist)
    scores = lof(x, min(lof_k, n - 1), dist) if n > 1 else np.ones(1)
    noise = labels.noise
    ranked = sorted(range(n), key=lambda i: (-scores[i], i))
    noise_set = set(noise.tolist())
    first = [i for i in ranked if i in noise_set]
    rest = [i for i in ranked if i not in noise_set]
    picks = list(_unique_sources(first + rest, frames))[:R]
    filled = sum(1 for i in picks if i not in noise_set)
    picks.sort(key=lambda i: (-scores[i], i))
    return SelectionResult(_candidates(frames, rmsds, picks, scores, Policy.ML_ONLY, weights_version),
                           Policy.ML_ONLY, {"points": n, "outliers": len(noise), "filled": filled})


def select_greedy_rmsd(recent, R: int) -> SelectionResult:
    """R lowest-RMSD frames of the window, ties broken by earlier step then lower sim_id."""
    recent = list(recent)
    if not recent:
        raise WindowEmpty("no frames in the selection window")
    frames = [f for f, _ in recent]
    rmsds = [r for _, r in recent]
    picks = list(_unique_sources(_rmsd_order(frames, rmsds, range(len(frames))), frames))[:max(R, 0)]
    zeros = np.zeros(len(frames))
    return SelectionResult(_candidates(frames, rmsds, picks, zeros, Policy.GREEDY_RMSD, 0),
                           Policy.GREEDY_RMSD, {"points": len(frames), "outliers": 0, "filled": 0})


def select_ml_rmsd(latents, frames: Sequence[ChainFrame], rmsds, R: int, *, eps=AUTO,
                   min_pts: int = 11, weights_version: int = 0) -> SelectionResult:
    """DBSCAN noise, then the R lowest-RMSD outliers; short pools are filled greedily by RMSD."""
    if not len(latents) == len(frames) == len(rmsds):
        raise ValueError("latents, frames and rmsds differ in length")
    n = len(frames)
    if R <= 0 or n == 0:
        return SelectionResult([], Policy.ML_RMSD, {"points": n, "outliers": 0, "filled": 0})
    x = _as_points(latents)
    dist = _pairwise(x)
    noise = dbscan(x, resolve_eps(x, eps, min_pts, dist), min_pts, dist).noise
    picks = list(_unique_sources(_rmsd_order(frames, rmsds, noise.tolist()), frames))[:R]
    filled = 0
    if len(picks) < R:
        taken = {frames[i].source for i in picks}
        for i in _unique_sources(_rmsd_order(frames, rmsds, range(n)), frames):
            if len(picks) >= R:
                break
            if frames[i].source not in taken:
                picks.append(i)
                taken.add(frames[i].source)
                filled += 1
    picks = _rmsd_order(frames, rmsds, picks)
    noise_set = set(noise.tolist())
    scores = np.array([1.0 if i in noise_set else 0.0 for i in range(n)])
    return SelectionResult(_candidates(frames, rmsds, picks, scores, Policy.ML_RMSD, weights_version),
                           Policy.ML_RMSD, {"points": n, "outliers": len(noise), "filled": filled})
