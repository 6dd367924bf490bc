"""Synthetic task generation, federated partitioning, and the IDX loader."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import Dataset


class IdxFormatError(ValueError):
    """Malformed IDX file."""


_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 4000
    d: int = 20
    classes: int = 4
    separation: float = 3.0
    noise_std: float = 1.0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n < self.classes:
            raise ValueError("need at least one sample per class")
        if self.d < 1:
            raise ValueError("feature dim must be >= 1")
        if not self.separation > 0:
            raise ValueError("separation must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.classes > 2 * self.d:
            raise ValueError("supports at most 2*d classes")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "dirichlet"  # iid | dirichlet
    n_clients: int = 10
    alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.kind not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.n_clients < 1:
            raise ValueError("need at least one client")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Gaussian clusters on axis-aligned class means, labels balanced to +-1.

    Class c gets mean +-separation * e_{c mod d}; labels are assigned round
    robin so counts per class never differ by more than one.
    """
    rng = np.random.default_rng(seed)
    means = np.zeros((spec.classes, spec.d))
    for c in range(spec.classes):
        axis = c % spec.d
        sign = 1.0 if (c // spec.d) % 2 == 0 else -1.0
        means[c, axis] = sign * spec.separation
    labels = np.arange(spec.n, dtype=np.int64) % spec.classes
    features = means[labels] + spec.noise_std * rng.normal(size=(spec.n, spec.d))
    return Dataset(features, labels, spec.classes)


def partition(data: Dataset, spec: PartitionSpec, seed: int) -> list[Dataset]:
    """Disjoint client shards whose union is exactly the input.

    Dirichlet mode draws per-client proportions for each class. Any client
    left empty is given one sample from the currently largest shard so every
    shard is trainable; conservation still holds exactly.
    """
    if spec.n_clients > data.n:
        raise ValueError("more clients than samples")
    rng = np.random.default_rng(seed)
    if spec.kind == "iid":
        order = rng.permutation(data.n)
        chunks = [c.tolist() for c in np.array_split(order, spec.n_clients)]
    else:
        chunks = [[] for _ in range(spec.n_clients)]
        for c in range(data.n_classes):
            idx = np.nonzero(data.labels == c)[0]
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).round().astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                chunks[client].extend(part.tolist())
        for chunk in chunks:
            if not chunk:
                donor = max(range(spec.n_clients), key=lambda i: len(chunks[i]))
                chunk.append(chunks[donor].pop())
    return [data.subset(np.asarray(sorted(chunk), dtype=np.int64)) for chunk in chunks]


def _read_u32s(buf: bytes, count: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4 * count:
        raise IdxFormatError(f"truncated {what} header")
    return struct.unpack(f">{count}I", buf[: 4 * count])


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Strict big-endian IDX parser; pixels are scaled by 1/255.

    Rejects wrong magic numbers, truncated or oversized payloads, and
    image/label count mismatches.
    """
    with open(images_path, "rb") as fh:
        img_buf = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_buf = fh.read()

    magic, count, rows, cols = _read_u32s(img_buf, 4, "image")
    if magic != _IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic 0x{magic:08x}")
    pixels = img_buf[16:]
    if len(pixels) != count * rows * cols:
        raise IdxFormatError(
            f"image payload holds {len(pixels)} bytes, expected {count * rows * cols}"
        )

    lmagic, lcount = _read_u32s(lbl_buf, 2, "label")
    if lmagic != _LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic 0x{lmagic:08x}")
    raw_labels = lbl_buf[8:]
    if len(raw_labels) != lcount:
        raise IdxFormatError(
            f"label payload holds {len(raw_labels)} bytes, expected {lcount}"
        )
    if count != lcount:
        raise IdxFormatError(f"image count {count} != label count {lcount}")

    features = (
        np.frombuffer(pixels, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols)
        / 255.0
    )
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if count else 1
    return Dataset(features, labels, n_classes)
