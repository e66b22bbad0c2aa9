"""Dataset container, synthetic mixture generator, and file loaders.

Training data flows in through exactly three doors: a seeded Gaussian
mixture generated in memory, a strict headerless numeric CSV, or a pair of
big-endian IDX files.  The loaders fail loudly with the byte offset of the
first bad record; silently skipping rows would make runs downstream of a
corrupt file unreproducible in a way nobody would notice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from natgrad.models import Batch

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


class ParseError(Exception):
    """Malformed dataset file.  ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class LabelOutOfRange(Exception):
    """A label lies outside ``[0, n_classes)``."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("need exactly one label per sample")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise LabelOutOfRange(
                f"labels span [{self.labels.min()}, {self.labels.max()}] "
                f"but only {self.n_classes} classes are declared"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    def to_batch(self) -> Batch:
        return Batch(features=self.features, targets=self.labels)


def make_mixture(
    n_samples: int, n_features: int, n_classes: int, seed: int
) -> Dataset:
    """Balanced Gaussian mixture with unit within-class noise.

    Class means are drawn with spread ``2 / sqrt(n_features)`` per
    coordinate, which keeps typical between-class distances near ``2.8``
    regardless of dimension: separable enough to train on, overlapping
    enough that the problem is not finished in one step.  Everything is a
    pure function of the seed.
    """
    if n_samples <= 0 or n_features <= 0 or n_classes <= 1:
        raise ValueError("need positive sizes and at least two classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, n_features)) * (2.0 / np.sqrt(n_features))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    features = means[labels] + rng.normal(size=(n_samples, n_features))
    return Dataset(features=features, labels=labels.astype(np.int64), n_classes=n_classes)


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, dataset: Dataset) -> None:
    """Headerless rows of feature values followed by the integer label."""
    lines = []
    for x, y in zip(dataset.features, dataset.labels):
        lines.append(",".join([repr(float(v)) for v in x] + [str(int(y))]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Parse a headerless numeric CSV whose last column is the label.

    Every row must have the same column count; any unparsable field aborts
    with its byte offset.  When ``n_classes`` is given, labels are range
    checked against it; otherwise the class count is one more than the
    largest label seen.
    """
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise ParseError("dataset file is empty", 0)
    rows = []
    labels = []
    width = None
    offset = 0
    for line in raw.split(b"\n"):
        text = line.decode("utf-8", errors="replace").strip()
        if text:
            fields = text.split(",")
            if width is None:
                width = len(fields)
                if width < 2:
                    raise ParseError("rows need at least one feature and a label", offset)
            elif len(fields) != width:
                raise ParseError(
                    f"row has {len(fields)} columns, expected {width}", offset
                )
            try:
                rows.append([float(v) for v in fields[:-1]])
            except ValueError:
                raise ParseError(f"bad feature value in row {text!r}", offset) from None
            try:
                labels.append(int(fields[-1]))
            except ValueError:
                raise ParseError(f"bad label value {fields[-1]!r}", offset) from None
        offset += len(line) + 1
    features = np.array(rows, dtype=np.float64)
    label_arr = np.array(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(label_arr.max()) + 1 if label_arr.min() >= 0 else 0
    return Dataset(features=features, labels=label_arr, n_classes=n_classes)


# ---------------------------------------------------------------------------
# IDX


def _idx_header(raw: bytes, path, expect_magic: int, n_dims: int):
    head_size = 4 + 4 * n_dims
    if len(raw) < 4:
        raise ParseError(f"{path} is too short for an IDX magic number", len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expect_magic:
        raise ParseError(
            f"{path} has IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0
        )
    if len(raw) < head_size:
        raise ParseError(f"{path} is too short for an IDX header", len(raw))
    dims = struct.unpack_from(f">{n_dims}I", raw, 4)
    payload = raw[head_size:]
    count = int(np.prod(dims))
    if len(payload) != count:
        raise ParseError(
            f"{path} holds {len(payload)} payload bytes, expected {count}", head_size
        )
    return dims, payload


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Load a big-endian IDX image/label pair as flat unit-scaled features.

    Images use the three-dimensional unsigned-byte layout, labels the
    one-dimensional one.  Pixels are scaled to ``[0, 1]``.
    """
    image_raw = Path(images_path).read_bytes()
    label_raw = Path(labels_path).read_bytes()
    (n, rows, cols), pixels = _idx_header(
        image_raw, images_path, IDX_MAGIC_IMAGES, n_dims=3
    )
    (n_labels,), label_bytes = _idx_header(
        label_raw, labels_path, IDX_MAGIC_LABELS, n_dims=1
    )
    if n != n_labels:
        raise ParseError(
            f"{images_path} has {n} images but {labels_path} has {n_labels} labels", 0
        )
    features = (
        np.frombuffer(pixels, dtype=np.uint8)
        .reshape(n, rows * cols)
        .astype(np.float64)
        / 255.0
    )
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features=features, labels=labels, n_classes=n_classes)
