"""Dataset ingestion, minibatching, and binary persistence.

Datasets carry samples and, separately, optional ground-truth labels that
only the evaluation code reads; nothing in the loss stack accepts a Dataset.
Two binary formats live here: the 3073-byte-record image format (1 label
byte + 3 x 32 x 32 pixel bytes) and the engine's own tensor/checkpoint
containers (magic "DTNS" / "DCCM", little-endian, 64-bit float payloads).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CHECKPOINT_MAGIC = b"DCCM"
CHECKPOINT_VERSION = 1
TENSOR_MAGIC = b"DTNS"


@dataclass
class Dataset:
    """Immutable sample store; labels are evaluation-only ground truth."""

    samples: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    normalization: str = "none"

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.samples):
            raise FormatError(
                f"{len(self.labels)} labels for {len(self.samples)} samples"
            )

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self):
        return self.samples.shape[1:]


def load_cifar_binary(paths) -> Dataset:
    """Parse files of 3073-byte records: class byte then R, G, B planes.

    Pixels are scaled to [0, 1]; class bytes above 9 or misaligned files are
    format errors. Labels go to the ground-truth slot only.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD} "
                f"(offset {len(raw) % CIFAR_RECORD} trailing bytes)"
            )
        n = len(raw) // CIFAR_RECORD
        if n == 0:
            log.warning("%s: empty image file", path)
            continue
        records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
        labels = records[:, 0]
        if labels.max(initial=0) > 9:
            bad = int(np.argmax(labels > 9))
            raise FormatError(
                f"{path}: record {bad} has class byte {labels[bad]} > 9"
            )
        chunks.append(records[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0)
        label_chunks.append(labels.astype(np.intp))
    if not chunks:
        return Dataset(
            samples=np.empty((0, 3, 32, 32)),
            labels=np.empty(0, dtype=np.intp),
            name="cifar",
            normalization="pixel/255",
        )
    return Dataset(
        samples=np.concatenate(chunks),
        labels=np.concatenate(label_chunks),
        name="cifar",
        normalization="pixel/255",
    )


def generate_blobs(
    clusters: int,
    per_cluster: int,
    dim: int,
    separation: float,
    sigma: float,
    seed: int = 0,
    max_tries: int = 200,
) -> Dataset:
    """Isotropic Gaussian clusters with centres at pairwise distance >= separation.

    When the dimension allows, centres sit on random orthonormal directions
    (every pair exactly sqrt(2) * radius apart), which keeps the placement
    well conditioned; otherwise rejection sampling in a box is used.
    """
    if clusters < 2:
        raise ValueError("need at least 2 clusters")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    centers = None
    if clusters <= dim:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, clusters)))
        centers = basis.T * (separation / np.sqrt(2.0))
    else:
        for _ in range(max_tries):
            candidate = rng.uniform(-separation, separation, size=(clusters, dim))
            dists = np.linalg.norm(candidate[:, None] - candidate[None, :], axis=-1)
            np.fill_diagonal(dists, np.inf)
            if dists.min() >= separation:
                centers = candidate
                break
    if centers is None:
        raise ValueError(
            f"could not place {clusters} centres at separation {separation} "
            f"in {dim} dimensions after {max_tries} tries"
        )
    samples = np.concatenate(
        [c + rng.normal(0.0, sigma, size=(per_cluster, dim)) for c in centers]
    )
    labels = np.repeat(np.arange(clusters), per_cluster)
    return Dataset(samples=samples, labels=labels, name="blobs", normalization="none")


def minibatches(n: int, batch_size: int, seed: int = 0):
    """Shuffled index chunks covering [0, n); a trailing chunk smaller than 2
    is dropped because the pairwise losses degenerate on singletons."""
    if not (2 <= batch_size <= n):
        raise ValueError(f"batch_size must be in [2, {n}], got {batch_size}")
    perm = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        chunk = perm[start : start + batch_size]
        if len(chunk) < 2:
            break
        yield chunk


# -- raw tensor files ------------------------------------------------------------


def save_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        for extent in array.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(array.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    reader = _Reader(Path(path).read_bytes(), str(path))
    if reader.take(4) != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic (expected DTNS)")
    rank = reader.u32()
    shape = tuple(reader.u64() for _ in range(rank))
    return reader.f64_array(int(np.prod(shape)) if shape else 1).reshape(shape)


# -- checkpoints -----------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.label}: truncated (wanted {self.pos + n} bytes, have {len(self.buf)})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * 8), dtype="<f8").copy()


def _write_string(fh, text: str) -> None:
    payload = text.encode("utf-8")
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _write_blobs(fh, blobs: dict) -> None:
    fh.write(struct.pack("<I", len(blobs)))
    for name, array in blobs.items():
        array = np.asarray(array, dtype=np.float64)
        _write_string(fh, name)
        fh.write(struct.pack("<I", array.ndim))
        for extent in array.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(array.astype("<f8").tobytes())


def _read_blobs(reader: _Reader) -> dict:
    out = {}
    for _ in range(reader.u32()):
        name = reader.string()
        rank = reader.u32()
        shape = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        out[name] = reader.f64_array(count).reshape(shape)
    return out


@dataclass
class Checkpoint:
    """Everything needed to continue training bit-exactly."""

    config: dict
    parameters: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: magic, u32 version, config JSON, named parameter blobs, named
    optimizer blobs, u64 epoch, RNG-state JSON. All integers little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        _write_string(fh, json.dumps(ckpt.config, sort_keys=True))
        _write_blobs(fh, ckpt.parameters)
        _write_blobs(fh, ckpt.optimizer)
        fh.write(struct.pack("<Q", ckpt.epoch))
        _write_string(fh, json.dumps(ckpt.rng_state, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), str(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic (expected DCCM)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    config = json.loads(reader.string())
    parameters = _read_blobs(reader)
    optimizer = _read_blobs(reader)
    epoch = reader.u64()
    rng_state = json.loads(reader.string())
    return Checkpoint(
        config=config,
        parameters=parameters,
        optimizer=optimizer,
        epoch=epoch,
        rng_state=rng_state,
        version=version,
    )
