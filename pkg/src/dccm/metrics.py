"""Clustering evaluation: NMI, ARI, Hungarian-matched accuracy, BCubed.

All metrics run off a contingency table between two labelings. Natural
logarithms throughout; NMI uses the geometric-mean normalisation. BCubed
additionally accepts a binary relation matrix in place of a hard partition,
which is how the pseudo-graph diagnostics use it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError

MAX_CLUSTERS = 64  # assignment solver bound; plenty at desk scale


@dataclass(frozen=True)
class Partition:
    """Cluster assignment for N items; every id in [0, num_clusters) occurs."""

    assignment: np.ndarray
    num_clusters: int

    @staticmethod
    def from_labels(labels) -> "Partition":
        labels = np.asarray(labels)
        _, compact = np.unique(labels, return_inverse=True)
        return Partition(assignment=compact, num_clusters=int(compact.max()) + 1 if compact.size else 0)

    def __len__(self):
        return len(self.assignment)


def _as_labels(x) -> np.ndarray:
    if isinstance(x, Partition):
        return x.assignment
    return np.asarray(x)


def _check_lengths(pred, truth):
    if len(pred) != len(truth):
        raise DimensionError(f"metric inputs differ in length: {len(pred)} vs {len(truth)}")
    if len(pred) == 0:
        raise DimensionError("metric inputs are empty")


def contingency_table(pred, truth) -> np.ndarray:
    """Co-occurrence counts c[i, j] = |pred cluster i ∩ truth cluster j|."""
    pred, truth = _as_labels(pred), _as_labels(truth)
    _check_lengths(pred, truth)
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    c = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(c, (pi, ti), 1.0)
    return c


def _same_grouping(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two labelings induce the same partition up to renaming."""
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    # first-occurrence canonical form
    def canon(ix):
        seen, out = {}, np.empty_like(ix)
        for pos, v in enumerate(ix):
            out[pos] = seen.setdefault(v, len(seen))
        return out

    return np.array_equal(canon(ia), canon(ib))


def nmi(pred, truth) -> float:
    """Normalised mutual information with geometric-mean denominator.

    A zero denominator (either side has a single cluster) gives 1 for
    identical partitions and 0 otherwise.
    """
    pred, truth = _as_labels(pred), _as_labels(truth)
    c = contingency_table(pred, truth)
    n = c.sum()
    a = c.sum(axis=1)
    b = c.sum(axis=0)
    nz = c > 0
    mi = (c[nz] * np.log(n * c[nz] / np.outer(a, b)[nz])).sum()
    ha = (a[a > 0] * np.log(a[a > 0] / n)).sum()  # -n * entropy, nonpositive
    hb = (b[b > 0] * np.log(b[b > 0] / n)).sum()
    denom = np.sqrt(ha * hb)
    if denom == 0.0:
        return 1.0 if _same_grouping(pred, truth) else 0.0
    return float(np.clip(mi / denom, 0.0, 1.0))


def ari(pred, truth) -> float:
    """Adjusted Rand index from the contingency table; defined as 1 when the
    correction denominator vanishes (e.g. both sides a single cluster)."""
    c = contingency_table(pred, truth)
    n = c.sum()

    def comb2(x):
        return (x * (x - 1.0) / 2.0).sum()

    sum_ij = comb2(c)
    sum_a = comb2(c.sum(axis=1))
    sum_b = comb2(c.sum(axis=0))
    total = n * (n - 1.0) / 2.0
    expected = sum_a * sum_b / total
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def hungarian_acc(pred, truth) -> float:
    """Accuracy under the best one-to-one cluster-to-class mapping.

    Solves the assignment problem on the (square-padded) co-occurrence
    matrix; O(K^3) in the cluster count.
    """
    c = contingency_table(pred, truth)
    r, s = c.shape
    if max(r, s) > MAX_CLUSTERS:
        raise DimensionError(f"hungarian_acc supports up to {MAX_CLUSTERS} clusters, got {max(r, s)}")
    k = max(r, s)
    padded = np.zeros((k, k))
    padded[:r, :s] = c
    rows, cols = linear_sum_assignment(-padded)
    return float(padded[rows, cols].sum() / c.sum())


def bcubed(pred, truth):
    """Per-item precision and recall of a relation against true co-membership.

    ``pred`` is either a labeling (converted to its co-membership relation)
    or a binary B x B relation matrix whose diagonal must be true, which is
    how thresholded similarity graphs are scored.
    """
    truth = _as_labels(truth)
    pred_arr = np.asarray(pred.w if hasattr(pred, "w") else pred)
    if pred_arr.ndim == 2:
        rel = pred_arr > 0
    else:
        _check_lengths(pred_arr, truth)
        rel = pred_arr[:, None] == pred_arr[None, :]
    n = len(truth)
    if rel.shape != (n, n):
        raise DimensionError(f"relation shape {rel.shape} does not match {n} items")
    if not np.all(np.diag(rel)):
        raise DimensionError("bcubed relation must relate every item to itself")
    same = truth[:, None] == truth[None, :]
    correct = (rel & same).sum(axis=1)
    precision = float((correct / rel.sum(axis=1)).mean())
    recall = float((correct / same.sum(axis=1)).mean())
    return precision, recall
