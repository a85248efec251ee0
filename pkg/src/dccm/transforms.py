"""Geometric perturbations and the consistency losses on transformed batches.

Each sample gets an independently sampled composition of the enabled
transforms (horizontal flip, rescale, rotation, shift), realised as a single
inverse affine map with nearest-neighbour resampling and edge replication.
Per-sample randomness derives from (seed, sample index), so the result is
independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .correlation import (
    PseudoGraph,
    PseudoLabels,
    cosine_similarity,
    pseudo_graph_loss,
    pseudo_label_loss,
)
from .errors import DimensionError

TRANSFORM_KINDS = ("identity", "rotation", "shift", "rescale", "horizontal-flip")

DEFAULT_KINDS = ("rotation", "shift", "rescale", "horizontal-flip")


@dataclass(frozen=True)
class TransformSpec:
    """Which perturbations to sample and how strong they may be."""

    kinds: tuple = DEFAULT_KINDS
    rotation_degrees: float = 25.0
    shift_fraction: float = 0.10
    rescale_range: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "rescale_range", tuple(self.rescale_range))
        for kind in self.kinds:
            if kind not in TRANSFORM_KINDS:
                raise ValueError(f"unknown transform kind {kind!r}")
        if self.rotation_degrees < 0 or not (0 <= self.flip_prob <= 1):
            raise ValueError("invalid transform ranges")
        lo, hi = self.rescale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid rescale range {self.rescale_range}")

    @property
    def geometric(self) -> bool:
        return any(k != "identity" for k in self.kinds)

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "rotation_degrees": self.rotation_degrees,
            "shift_fraction": self.shift_fraction,
            "rescale_range": list(self.rescale_range),
            "flip_prob": self.flip_prob,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TransformSpec":
        d = dict(d)
        if "rescale_range" in d:
            d["rescale_range"] = tuple(d["rescale_range"])
        if "kinds" in d:
            d["kinds"] = tuple(d["kinds"])
        return TransformSpec(**d)


@dataclass
class TransformedBatch:
    x: Tensor
    applied: list = field(default_factory=list)


def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror the columns of a (C, H, W) image; an exact involution."""
    return img[:, :, ::-1].copy()


def warp_affine(
    img: np.ndarray, angle_deg: float = 0.0, scale: float = 1.0, shift=(0.0, 0.0)
) -> np.ndarray:
    """Rotate/zoom/translate a (C, H, W) image about its centre.

    Positive angles rotate counterclockwise (90 degrees reproduces
    numpy.rot90 on square images). Nearest-neighbour sampling; coordinates
    falling outside the frame replicate the nearest edge pixel.
    """
    c, h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dr = rows - cr - shift[0]
    dc = cols - cc - shift[1]
    # inverse map: undo rotation, then the zoom
    src_r = (np.cos(theta) * dr + np.sin(theta) * dc) / scale + cr
    src_c = (-np.sin(theta) * dr + np.cos(theta) * dc) / scale + cc
    ri = np.clip(np.rint(src_r).astype(np.intp), 0, h - 1)
    ci = np.clip(np.rint(src_c).astype(np.intp), 0, w - 1)
    return img[:, ri, ci]


def _sample_params(spec: TransformSpec, sample_index: int) -> dict:
    rng = np.random.default_rng([spec.seed, sample_index])
    params = {"flip": False, "angle": 0.0, "scale": 1.0, "shift": (0.0, 0.0)}
    if "horizontal-flip" in spec.kinds:
        params["flip"] = bool(rng.random() < spec.flip_prob)
    if "rescale" in spec.kinds:
        params["scale"] = float(rng.uniform(*spec.rescale_range))
    if "rotation" in spec.kinds:
        params["angle"] = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    if "shift" in spec.kinds:
        side = rng.uniform(-spec.shift_fraction, spec.shift_fraction, size=2)
        params["shift"] = (float(side[0]), float(side[1]))
    return params


def apply_transform(x, spec: TransformSpec) -> TransformedBatch:
    """Perturb every sample of a (B, C, H, W) batch independently.

    Deterministic in (spec.seed, sample index). An identity spec returns a
    bitwise copy of the input.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 4:
        raise DimensionError(f"apply_transform: expected B,C,H,W batch, got {data.shape}")
    b, c, h, w = data.shape
    active = [k for k in spec.kinds if k != "identity"]
    if not active:
        return TransformedBatch(x=Tensor(data.copy()), applied=[{} for _ in range(b)])
    if h < 2 or w < 2:
        raise DimensionError(
            f"apply_transform: geometric transforms need spatial size >= 2, got {h}x{w}"
        )
    out = np.empty_like(data)
    applied = []
    for i in range(b):
        params = _sample_params(spec, i)
        img = data[i]
        if params["flip"]:
            img = hflip(img)
        if params["angle"] or params["scale"] != 1.0 or any(params["shift"]):
            shift_px = (params["shift"][0] * h, params["shift"][1] * w)
            img = warp_affine(img, params["angle"], params["scale"], shift_px)
        out[i] = img
        applied.append(params)
    return TransformedBatch(x=Tensor(out), applied=applied)


def robustness_losses(
    z_t: Tensor,
    s_t: Tensor,
    graph: PseudoGraph,
    labels: PseudoLabels,
):
    """Original-batch supervision applied to the transformed branch.

    Returns (graph loss of the transformed similarities against the original
    graph, label loss of the transformed predictions against the original
    confident labels). The caller combines them with its alpha weight.
    """
    b = z_t.shape[0]
    if graph.w.shape[0] != b or labels.y.shape[0] != b:
        raise DimensionError(
            f"robustness_losses: supervision for {graph.w.shape[0]} samples, batch has {b}"
        )
    return pseudo_graph_loss(s_t, graph), pseudo_label_loss(z_t, labels)


def feature_invariance_loss(z: Tensor, z_t: Tensor) -> Tensor:
    """Mean squared Euclidean distance between original and transformed predictions."""
    if z.shape != z_t.shape:
        raise DimensionError(
            f"feature_invariance_loss: shapes {z.shape} and {z_t.shape} differ"
        )
    diff = z - z_t
    return (diff * diff).sum() / float(z.shape[0])
