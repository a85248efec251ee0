"""Threshold sweeps over weighted complete graphs and training diagnostics.

A complete graph with pairwise-distinct edge weights passes through every
partition count from 1 to N as the strict edge-weight threshold rises; the
sweep materialises that staircase so a threshold achieving exactly K
components can be read off. Also here: the one-hot prediction check, the
BCubed curve of thresholded similarity graphs, and the histogram of maximum
prediction probabilities.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError
from .metrics import Partition, bcubed

log = logging.getLogger(__name__)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        if self.rank[ri] < self.rank[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        if self.rank[ri] == self.rank[rj]:
            self.rank[ri] += 1
        return True

    def labels(self) -> np.ndarray:
        roots = {}
        out = np.empty(len(self.parent), dtype=np.intp)
        for i in range(len(self.parent)):
            out[i] = roots.setdefault(self.find(i), len(roots))
        return out


@dataclass
class ThresholdSweep:
    """Component structure of G_t = (V, {e : w(e) > t}) for every regime of t.

    Level k covers thresholds in [weights[k-1], weights[k]) (level 0 covers
    everything below the smallest weight); ``thresholds[k]`` is the smallest
    threshold of the level, ``counts[k]`` its component count, and
    ``partitions[k]`` the component assignment.
    """

    n: int
    weights: np.ndarray      # sorted ascending, pairwise distinct
    thresholds: np.ndarray   # representative (smallest) threshold per level
    counts: np.ndarray
    partitions: list
    ties_perturbed: bool = False

    def count_at(self, t: float) -> int:
        """Components of the graph keeping edges with weight strictly above t."""
        return int(self.counts[bisect.bisect_right(self.weights, t)])


def threshold_partition_sweep(s) -> ThresholdSweep:
    """Sweep the strict threshold over a symmetric weight matrix.

    Tied off-diagonal weights are perturbed by 1e-12 times the pair index
    (flagged in the result) so the staircase visits every component count.
    """
    sv = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    if sv.ndim != 2 or sv.shape[0] != sv.shape[1]:
        raise DimensionError(f"expected a square weight matrix, got {sv.shape}")
    n = sv.shape[0]
    if n < 1:
        raise DimensionError("graph needs at least one node")

    iu, ju = np.triu_indices(n, k=1)
    weights = sv[iu, ju].astype(np.float64)
    ties = len(np.unique(weights)) != len(weights)
    if ties:
        weights = weights + 1e-12 * np.arange(len(weights))
        log.warning("tied edge weights perturbed by 1e-12 * pair index")

    order = np.argsort(weights)[::-1]  # heaviest edge first
    uf = UnionFind(n)
    # level m (threshold >= max weight): no edges.
    rev_counts = [n]
    rev_parts = [np.arange(n, dtype=np.intp)]
    count = n
    for k in order:
        if uf.union(int(iu[k]), int(ju[k])):
            count -= 1
        rev_counts.append(count)
        rev_parts.append(uf.labels())
    counts = np.array(rev_counts[::-1])
    partitions = rev_parts[::-1]
    sorted_w = np.sort(weights)
    thresholds = (
        np.concatenate([[sorted_w[0] - 1.0], sorted_w])
        if len(sorted_w)
        else np.array([0.0])
    )
    return ThresholdSweep(
        n=n,
        weights=sorted_w,
        thresholds=thresholds,
        counts=counts,
        partitions=partitions,
        ties_perturbed=ties,
    )


def find_k_partition_threshold(sweep: ThresholdSweep, k: int):
    """Smallest threshold whose strict graph has exactly k components.

    Guaranteed to exist for distinct weights; returns None (and logs) only
    in perturbation edge cases.
    """
    if not (1 <= k <= sweep.n):
        raise ValueError(f"k must be in [1, {sweep.n}], got {k}")
    hits = np.where(sweep.counts == k)[0]
    if hits.size == 0:
        log.warning("no threshold yields exactly %d components", k)
        return None
    return float(sweep.thresholds[hits[0]])


def sweep_partition(sweep: ThresholdSweep, k: int) -> Partition | None:
    """The component assignment at the first level with exactly k components."""
    hits = np.where(sweep.counts == k)[0]
    if hits.size == 0:
        return None
    return Partition(assignment=sweep.partitions[hits[0]], num_clusters=k)


def verify_one_hot(z, tol: float = 0.1):
    """Fraction of rows whose maximum entry reaches 1 - tol, plus per-row flags."""
    zv = z.data if isinstance(z, Tensor) else np.asarray(z)
    flags = zv.max(axis=1) >= 1.0 - tol
    return float(flags.mean()), flags


def bcubed_curve(s, truth, thresholds):
    """BCubed precision/recall of the thresholded similarity graph.

    Edges use the graph-construction convention (weight >= t); every t keeps
    the self-edges, so precision is always defined.
    """
    if len(thresholds) == 0:
        raise ValueError("bcubed_curve needs at least one threshold")
    sv = s.data if isinstance(s, Tensor) else np.asarray(s)
    truth_labels = truth.assignment if isinstance(truth, Partition) else np.asarray(truth)
    rows = []
    for t in thresholds:
        if not (0.0 < t < 1.0):
            raise ValueError(f"thresholds must lie in (0, 1), got {t}")
        rel = sv >= t
        np.fill_diagonal(rel, True)
        p, r = bcubed(rel, truth_labels)
        rows.append((float(t), p, r))
    return rows


def concentration_histogram(z):
    """Histogram of the per-row maximum probability.

    Bins partition [1/K, 1] at decile boundaries (nine bins for K = 10);
    the first bin is clipped to start at 1/K and the last includes 1.
    Returns (edges, counts).
    """
    zv = z.data if isinstance(z, Tensor) else np.asarray(z)
    k = zv.shape[1]
    p = zv.max(axis=1)
    lo = 1.0 / k
    first = int(math.floor(lo * 10 + 1e-9)) + 1
    edges = np.array([lo] + [d / 10.0 for d in range(first, 11)])
    counts, _ = np.histogram(np.clip(p, lo, 1.0), bins=edges)
    return edges, counts
