"""Self-supervision losses over a minibatch of softmax predictions.

Given predictions z (one row per sample), the pipeline is:

  cosine similarities S  ->  binary graph W at a high threshold
  argmax labels y with confidences p  ->  selection mask V at a second threshold
  W drives a binary cross-entropy on S and the positive/negative pair sets
  for the triplet mutual-information objective; (y, V) drive a masked
  cross-entropy on z.

Targets (W, y, V, pair lists) are always computed from detached values so
no gradient flows through the thresholding; the losses themselves are
differentiable in z and the discriminator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    DegenerateBatchError,
    DegenerateInputError,
    DimensionError,
    TrainingDivergenceError,
)
from .model import DiscriminatorState, discriminator_score

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7

STRATEGIES = (
    "nearest-pos+random-neg",
    "nearest-pos+farthest-neg",
    "random-pos+random-neg",
    "topn-pos+random-neg",
)


@dataclass
class PseudoGraph:
    """Symmetric binary co-membership matrix over a minibatch."""

    w: np.ndarray
    thres1: float


@dataclass
class PseudoLabels:
    """Argmax label, its confidence, and the high-confidence mask per sample."""

    y: np.ndarray
    p: np.ndarray
    v: np.ndarray
    thres2: float

    @property
    def selected_fraction(self) -> float:
        return float(self.v.mean()) if self.v.size else 0.0


@dataclass
class TripletBatch:
    """Index pairs feeding the mutual-information discriminator.

    joint pairs (i, j) carry w_ij = 1 and pair sample i's deep feature with
    sample j's shallow feature; marginal pairs carry w_ij = 0.
    """

    joint: np.ndarray     # (n_pos, 2) int
    marginal: np.ndarray  # (n_neg, 2) int

    @property
    def n_pos(self) -> int:
        return len(self.joint)

    @property
    def n_neg(self) -> int:
        return len(self.marginal)


@dataclass
class LossBreakdown:
    """Scalar values of every objective component for one step."""

    l_pg: float = 0.0
    l_pg_prime: float = 0.0
    l_pl: float = 0.0
    l_pl_prime: float = 0.0
    l_mi: float = 0.0
    l_fi: float = 0.0
    alpha: float = 5.0
    beta: float = 0.1
    fi_weight: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def cosine_similarity(z: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows of z, differentiable.

    S[i, j] = z_i . z_j / (|z_i| |z_j|). Rows must be nonzero (softmax
    outputs always are).
    """
    if z.ndim != 2:
        raise DimensionError(f"cosine_similarity: expected 2-D predictions, got {z.shape}")
    if np.any((z.data * z.data).sum(axis=1) == 0.0):
        raise DegenerateInputError("cosine_similarity: zero-norm row")
    norms = ad.l2norm_rows(z)          # (B, 1)
    dots = z @ z.T                     # (B, B)
    return ad.div(dots, norms @ norms.T)


def build_pseudo_graph(s, thres1: float) -> PseudoGraph:
    """Threshold similarities into a detached binary graph (edge iff S >= thres1)."""
    if not (0.0 < thres1 < 1.0):
        raise ValueError(f"thres1 must be in (0, 1), got {thres1}")
    sv = s.data if isinstance(s, Tensor) else np.asarray(s)
    return PseudoGraph(w=(sv >= thres1).astype(np.float64), thres1=thres1)


def assign_pseudo_labels(z, thres2: float) -> PseudoLabels:
    """Argmax labels with confidences; ties resolve to the lowest index."""
    if not (0.0 < thres2 < 1.0):
        raise ValueError(f"thres2 must be in (0, 1), got {thres2}")
    zv = z.data if isinstance(z, Tensor) else np.asarray(z)
    y = zv.argmax(axis=1)
    p = zv.max(axis=1)
    return PseudoLabels(y=y, p=p, v=(p >= thres2).astype(np.float64), thres2=thres2)


def pseudo_graph_loss(s: Tensor, graph: PseudoGraph) -> Tensor:
    """Binary cross-entropy between similarities and graph edges.

    Averaged over all ordered off-diagonal pairs; similarities are clamped
    away from {0, 1} so the logs stay finite.
    """
    b = s.shape[0]
    if graph.w.shape != (b, b):
        raise DimensionError(
            f"pseudo_graph_loss: graph {graph.w.shape} vs similarities {s.shape}"
        )
    if b < 2:
        raise DegenerateBatchError("pseudo_graph_loss: needs at least 2 samples")
    off_diag = Tensor(1.0 - np.eye(b))
    sc = ad.clamp(s, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = Tensor(graph.w) * ad.log(sc)
    neg = Tensor(1.0 - graph.w) * ad.log(Tensor(np.ones((b, b))) - sc)
    return (-(pos + neg) * off_diag).sum() / float(b * (b - 1))


def pseudo_label_loss(z: Tensor, labels: PseudoLabels) -> Tensor:
    """Cross-entropy against the argmax labels, masked to confident samples.

    Normalised by the number of selected samples so sparse early selections
    are not washed out; zero when nothing is selected.
    """
    b, k = z.shape
    if labels.y.shape != (b,):
        raise DimensionError(f"pseudo_label_loss: {labels.y.shape} labels for batch {b}")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels.y] = 1.0
    picked = (z * Tensor(onehot)).sum(axis=1)
    nll = -ad.log(ad.clamp(picked, CLAMP_EPS, 1.0))
    denom = max(1.0, float(labels.v.sum()))
    return (nll * Tensor(labels.v)).sum() / denom


def combined_sample_loss(l_pg, l_pl, alpha: float):
    """Graph loss plus alpha-weighted label loss (works on floats or tensors)."""
    return l_pg + alpha * l_pl


def sample_triplet_pairs(
    graph: PseudoGraph,
    s,
    strategy: str = "nearest-pos+random-neg",
    n: int | None = None,
    seed: int = 0,
) -> TripletBatch:
    """Select positive and negative (deep, shallow) index pairs from the graph.

    Every anchor contributes one positive and one negative pair; "nearest"
    picks the most similar graph neighbour (falling back to the self-pair
    when the anchor has none), "random*" draws uniformly among qualifying
    entries, "topn" ranks all positive pairs globally by similarity.
    Anchors without any negative are skipped; an empty result raises.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    w = graph.w
    sv = s.data if isinstance(s, Tensor) else np.asarray(s)
    b = w.shape[0]
    n = b if n is None else int(n)
    if not (1 <= n <= b):
        raise ValueError(f"pair count n must be in [1, {b}], got {n}")
    rng = np.random.default_rng(seed)

    if strategy == "topn-pos+random-neg":
        pos_i, pos_j = np.where(w > 0)
        order = np.lexsort((pos_j, pos_i, -sv[pos_i, pos_j]))[:n]
        candidates = [(int(pos_i[k]), int(pos_j[k])) for k in order]
    else:
        anchors = np.arange(b) if n == b else np.sort(rng.choice(b, size=n, replace=False))
        candidates = []
        for i in anchors:
            mates = np.where((w[i] > 0) & (np.arange(b) != i))[0]
            if strategy == "random-pos+random-neg":
                pool = np.where(w[i] > 0)[0]  # self always qualifies (w_ii = 1)
                j = int(rng.choice(pool))
            elif mates.size == 0:
                j = int(i)  # no cross-sample positive: fall back to the self-pair
            else:
                j = int(mates[np.argmax(sv[i, mates])])
            candidates.append((int(i), j))

    joint, marginal = [], []
    for i, j in candidates:
        negs = np.where(w[i] == 0)[0]
        if negs.size == 0:
            log.debug("anchor %d has no negative pair; skipped", i)
            continue
        if strategy == "nearest-pos+farthest-neg":
            k = int(negs[np.argmin(sv[i, negs])])
        else:
            k = int(rng.choice(negs))
        joint.append((i, j))
        marginal.append((i, k))

    if not joint or not marginal:
        raise DegenerateBatchError(
            "triplet sampling produced no usable pairs (graph has no negatives)"
        )
    return TripletBatch(
        joint=np.array(joint, dtype=np.intp), marginal=np.array(marginal, dtype=np.intp)
    )


def triplet_mi_loss(
    disc: DiscriminatorState, d: Tensor, s: Tensor, pairs: TripletBatch
) -> Tensor:
    """Negative Jensen-Shannon mutual-information estimate over the pair sets.

    softplus(-T) is averaged over joint pairs and softplus(T) over marginal
    pairs; both terms are nonnegative, and a zero discriminator gives
    2*ln 2. Gradients reach the discriminator and both feature tensors.
    """
    if pairs.n_pos == 0 or pairs.n_neg == 0:
        raise DegenerateBatchError("triplet_mi_loss: empty joint or marginal pair set")
    t_joint = discriminator_score(
        disc, ad.gather_rows(d, pairs.joint[:, 0]), ad.gather_rows(s, pairs.joint[:, 1])
    )
    t_marg = discriminator_score(
        disc, ad.gather_rows(d, pairs.marginal[:, 0]), ad.gather_rows(s, pairs.marginal[:, 1])
    )
    return ad.softplus(-t_joint).mean() + ad.softplus(t_marg).mean()


def total_loss(parts: LossBreakdown) -> float:
    """Recombine a breakdown into the unified objective value, checking finiteness."""
    for name in ("l_pg", "l_pg_prime", "l_pl", "l_pl_prime", "l_mi", "l_fi"):
        value = getattr(parts, name)
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"loss component {name} is {value}")
    return (
        (parts.l_pg + parts.l_pg_prime)
        + parts.alpha * (parts.l_pl + parts.l_pl_prime)
        + parts.beta * parts.l_mi
        + parts.fi_weight * parts.l_fi
    )
