"""Datasets: synthetic blob rings, IDX ingestion and train/validation/test splits.

Labels are 1-based; known classes are ``1..C`` and every unknown sample is
labelled ``C + 1``.  Validation and test sets also record which unknown class
(1-based, 0 for known samples) each sample came from, so evaluations can add
unknown classes one at a time in a fixed order.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError
from .serialize import load_bundle, save_bundle

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DatasetSplit:
    num_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    val_unknown: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_unknown: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        C = self.num_classes
        if np.any(self.train_y < 1) or np.any(self.train_y > C):
            raise ContractError("training labels must be known classes 1..C")
        for y, u in ((self.val_y, self.val_unknown), (self.test_y, self.test_unknown)):
            if np.any(y < 1) or np.any(y > C + 1):
                raise ContractError("validation/test labels must lie in 1..C+1")
            if np.any((y == C + 1) != (u > 0)):
                raise ContractError("unknown ids must be set exactly on unknown samples")

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def num_unknown(self) -> int:
        return int(max(self.val_unknown.max(initial=0), self.test_unknown.max(initial=0)))

    def class_data(self, c: int) -> np.ndarray:
        return self.train_x[self.train_y == c]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "train_x": self.train_x, "train_y": self.train_y,
            "val_x": self.val_x, "val_y": self.val_y, "val_unknown": self.val_unknown,
            "test_x": self.test_x, "test_y": self.test_y, "test_unknown": self.test_unknown,
        }


def save_dataset(split: DatasetSplit, path) -> Path:
    meta = {"num_classes": split.num_classes, "info": split.meta}
    return save_bundle(path, split.arrays(), meta, kind="dataset")


def load_dataset(path) -> DatasetSplit:
    arrays, meta, _ = load_bundle(path, kind="dataset")
    return DatasetSplit(num_classes=int(meta["num_classes"]), meta=meta.get("info", {}), **arrays)


# -- synthetic ----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Binarised Gaussian bumps on a ring of ``dim`` pixels.

    Every mode is a bump centred at its own ring position; a sample jitters
    the centre by ``N(0, (spacing / separation)^2)`` pixels and draws each pixel
    from a Bernoulli with the bump's intensity.  Known modes are interleaved
    so a class's subclusters are never adjacent, and held-out unknown modes
    sit in the gaps between known modes.
    """

    classes: int = 2
    subclusters: int | tuple[int, ...] = 2
    unknown: int = 3
    dim: int = 48
    separation: float = 7.0
    samples: int = 400
    val_samples: int = 100
    test_samples: int = 200
    width: float = 1.5
    peak: float = 0.9
    seed: int = 0

    def counts(self) -> tuple[int, ...]:
        k = self.subclusters
        return tuple(k) if isinstance(k, (tuple, list)) else (int(k),) * self.classes


def mode_layout(K: Sequence[int], unknown: int) -> list[tuple[int, int]]:
    """Ring order of modes as ``(class, subcluster)``; unknown modes use class 0."""
    known = [(c, k) for k in range(1, max(K) + 1)
             for c in range(1, len(K) + 1) if k <= K[c - 1]]
    slots: list[list[tuple[int, int]]] = [[m] for m in known]
    for q in range(1, unknown + 1):
        slots[(q - 1) % len(slots)].append((0, q))
    return [m for slot in slots for m in slot]


def _bumps(centres: np.ndarray, dim: int, width: float, peak: float) -> np.ndarray:
    pixels = np.arange(dim)[None, :]
    d = np.abs(pixels - centres[:, None]) % dim
    d = np.minimum(d, dim - d)
    return peak * np.exp(-0.5 * (d / width) ** 2)


def _draw(rng, centre: float, n: int, spec: SyntheticSpec, spacing: float) -> np.ndarray:
    loc = centre + rng.normal(0.0, spacing / spec.separation, size=n)
    prob = _bumps(loc, spec.dim, spec.width, spec.peak)
    return (rng.random(prob.shape) < prob).astype(np.float64)


def _split_counts(n: int, parts: int) -> list[int]:
    return [n // parts + (1 if i < n % parts else 0) for i in range(parts)]


def gen_synthetic(spec: SyntheticSpec) -> DatasetSplit:
    K = spec.counts()
    if spec.classes < 1 or len(K) != spec.classes or min(K) < 1:
        raise ContractError("need at least one class and one subcluster per class")
    if min(spec.samples, spec.val_samples, spec.test_samples) < 1 or spec.dim < 4:
        raise ContractError("sample counts must be positive and dim >= 4")
    if spec.separation <= 0 or spec.unknown < 0:
        raise ContractError("separation must be positive and unknown >= 0")
    rng = np.random.default_rng(spec.seed)
    layout = mode_layout(K, spec.unknown)
    spacing = spec.dim / len(layout)
    centre = {m: i * spacing for i, m in enumerate(layout)}
    C = spec.classes

    def known_part(n_per_class: int):
        xs, ys, ms = [], [], []
        for c in range(1, C + 1):
            for k, n in zip(range(1, K[c - 1] + 1), _split_counts(n_per_class, K[c - 1])):
                xs.append(_draw(rng, centre[(c, k)], n, spec, spacing))
                ys.append(np.full(n, c))
                ms.append(np.full(n, k))
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(ms)

    def open_part(n_per_class: int):
        x, y, _ = known_part(n_per_class)
        u = np.zeros(len(y), dtype=np.int64)
        for q in range(1, spec.unknown + 1):
            x = np.concatenate([x, _draw(rng, centre[(0, q)], n_per_class, spec, spacing)])
            y = np.concatenate([y, np.full(n_per_class, C + 1)])
            u = np.concatenate([u, np.full(n_per_class, q)])
        return x, y.astype(np.int64), u

    train_x, train_y, train_m = known_part(spec.samples)
    val_x, val_y, val_u = open_part(spec.val_samples)
    test_x, test_y, test_u = open_part(spec.test_samples)
    meta = {"source": "synthetic", "K_true": list(K), "unknown_order": list(range(1, spec.unknown + 1)),
            "layout": [list(m) for m in layout]}
    split = DatasetSplit(C, train_x, train_y.astype(np.int64), val_x, val_y, val_u,
                         test_x, test_y, test_u, meta)
    split.meta["train_modes"] = train_m.tolist()
    return split


def single_class(split: DatasetSplit, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Training samples of class ``c`` relabelled as class 1."""
    x = split.class_data(c)
    return x, np.ones(len(x), dtype=np.int64)


# -- IDX ----------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what} file is too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what} file header is truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = math.prod(dims)
    if len(raw) - header < n:
        raise FormatError(f"{what} payload is truncated: {len(raw) - header} of {n} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels are scaled to [0, 1].

    Returns ``(images, labels)`` with images shaped ``(n, rows, cols)`` and the
    raw label bytes as int64.  Gzipped files are read transparently.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "image")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data in IDX form (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def pool_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool ``(n, rows, cols)`` images by ``factor`` (trailing pixels are dropped)."""
    if factor <= 1:
        return images
    n, r, c = images.shape
    r2, c2 = r // factor, c // factor
    trimmed = images[:, : r2 * factor, : c2 * factor]
    return trimmed.reshape(n, r2, factor, c2, factor).mean(axis=(2, 4))


def split_labeled(x: np.ndarray, raw_labels: np.ndarray, known: Sequence[Sequence[int]],
                  unknown: Sequence[int], val_fraction: float, seed: int,
                  test: tuple[np.ndarray, np.ndarray] | None = None) -> DatasetSplit:
    """Group raw labels into known classes and hold out unknown classes.

    ``known[c-1]`` lists the raw labels merged into known class ``c``;
    ``unknown`` lists raw labels, in the order they are added as Q grows.
    A ``val_fraction`` share of every group goes to validation.  Without a
    separate ``test`` pair, the validation share is split again in half.
    """
    rng = np.random.default_rng(seed)
    x = x.reshape(len(x), -1)
    C = len(known)

    def assign(xs, labels):
        y = np.zeros(len(labels), dtype=np.int64)
        u = np.zeros(len(labels), dtype=np.int64)
        for c, group in enumerate(known, start=1):
            y[np.isin(labels, group)] = c
        for q, raw in enumerate(unknown, start=1):
            y[labels == raw] = C + 1
            u[labels == raw] = q
        keep = y > 0
        return xs[keep], y[keep], u[keep]

    ax, ay, au = assign(x, raw_labels)
    perm = rng.permutation(len(ay))
    ax, ay, au = ax[perm], ay[perm], au[perm]
    is_val = rng.random(len(ay)) < val_fraction
    is_val |= ay == C + 1
    is_train = ~is_val
    if test is None:
        half = rng.random(len(ay)) < 0.5
        tx, ty, tu = ax[is_val & half], ay[is_val & half], au[is_val & half]
        is_val &= ~half
    else:
        tx, ty, tu = assign(test[0].reshape(len(test[0]), -1), test[1])
    meta = {"source": "idx", "known": [list(g) for g in known], "unknown_order": list(unknown)}
    return DatasetSplit(C, ax[is_train], ay[is_train],
                        ax[is_val], ay[is_val], au[is_val], tx, ty, tu, meta)
