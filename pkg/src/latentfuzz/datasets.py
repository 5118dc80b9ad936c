"""Labeled datasets: synthetic blob images, IDX files, deterministic splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray  # (N, *shape) float32
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(inputs) != len(labels):
            raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count)

    def of_class(self, label: int) -> np.ndarray:
        return self.inputs[self.labels == label]


def blob_template(label: int, classes: int, shape, offset=(0.0, 0.0)) -> np.ndarray:
    """Smooth bump whose position depends on the class; background 0.1, peak 0.9.

    ``offset`` shifts the bump centre by (dy, dx) pixels (dx only for 1-d shapes).
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 1:
        pos = np.arange(shape[0], dtype=np.float64)
        centre = (label + 0.5) / classes * shape[0] + offset[1]
        sigma = max(shape[0] / (2.0 * classes), 0.5)
        return (0.1 + 0.8 * np.exp(-((pos - centre) ** 2) / (2 * sigma ** 2))).astype(np.float32)
    h, w = shape[-2:]
    lead = shape[:-2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = min(h, w)
    sigma = 0.15 * size
    out = np.empty(shape, dtype=np.float64)
    for c, idx in enumerate(np.ndindex(*lead) if lead else [()]):
        angle = 2 * np.pi * label / classes + c * np.pi / 3
        cy = (h - 1) / 2 + 0.25 * size * np.sin(angle) + offset[0]
        cx = (w - 1) / 2 + 0.25 * size * np.cos(angle) + offset[1]
        out[idx] = 0.1 + 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return out.astype(np.float32)


def gen_blobs(classes: int, shape, per_class: int, spread: float, rng_seed: int,
              jitter: float = 0.0) -> LabeledDataset:
    """Per class: template plus N(0, spread^2) pixel noise, clipped to [0, 1].

    With ``jitter > 0`` each sample's bump centre is also displaced by
    N(0, jitter^2) pixels per axis, which gives every class a low-dimensional
    family of variations for a manifold to capture.
    """
    if classes < 2 or per_class < 1 or spread < 0 or jitter < 0:
        raise ValueError("need classes >= 2, per_class >= 1, spread >= 0, jitter >= 0")
    shape = tuple(int(d) for d in shape)
    if not shape or min(shape) < 1:
        raise ValueError(f"invalid sample shape {shape}")
    rng = np.random.default_rng(rng_seed)
    inputs, labels = [], []
    for k in range(classes):
        if jitter > 0:
            offsets = rng.standard_normal((per_class, 2)) * jitter
            t = np.stack([blob_template(k, classes, shape, o) for o in offsets]).astype(np.float64)
        else:
            t = blob_template(k, classes, shape).astype(np.float64)
        noise = rng.standard_normal((per_class,) + shape) * spread
        inputs.append(np.clip(t + noise, 0.0, 1.0))
        labels.append(np.full(per_class, k))
    return LabeledDataset(np.concatenate(inputs), np.concatenate(labels), classes)


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    payload = data[header:]
    if len(payload) != int(np.prod(dims, dtype=np.int64)):
        raise IdxFormatError(f"{path}: payload has {len(payload)} bytes, dims {dims}")
    return dims, payload


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if dims[0] != n_labels:
        raise IdxFormatError(f"{dims[0]} images but {n_labels} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], 1, dims[1], dims[2])
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    k = class_count if class_count is not None else (int(labels.max()) + 1 if len(labels) else 1)
    return LabeledDataset(images.astype(np.float32) / np.float32(255), labels, k)


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images of shape (N, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def split(data: LabeledDataset, fraction: float, rng_seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified shuffled split; ``round(fraction * N)`` items go to the first half.

    Per-class quotas use largest-remainder apportionment, and any class with
    at least two members keeps at least one member on each side.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(data)
    n_first = int(np.floor(fraction * n + 0.5))
    if n < 2 or n_first in (0, n):
        raise ValueError(f"cannot split {n} items at fraction {fraction}")
    rng = np.random.default_rng(rng_seed)
    classes = [c for c in range(data.class_count) if np.any(data.labels == c)]
    members = {c: rng.permutation(np.flatnonzero(data.labels == c)) for c in classes}
    exact = {c: fraction * len(members[c]) for c in classes}
    quota = {c: int(np.floor(exact[c])) for c in classes}
    by_remainder = sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))
    for c in by_remainder[: n_first - sum(quota.values())]:
        quota[c] += 1
    for c in classes:
        if len(members[c]) >= 2:
            quota[c] = min(max(quota[c], 1), len(members[c]) - 1)
    first = np.concatenate([members[c][:quota[c]] for c in classes])
    second = np.concatenate([members[c][quota[c]:] for c in classes])
    return data.subset(rng.permutation(first)), data.subset(rng.permutation(second))
