"""Seeded synthetic datasets.

``temporal_order``: T-frame sequences with one flash at location A and one at
location B; the label says which came first.  Every sample contains exactly
the same two flashes, so per-pixel spike counts carry no label information and
only the order does.

``shapes``: grayscale images with 1-3 rectangles or disks on a noisy
background plus their ground-truth boxes, a desk-scale detection task.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

RECTANGLE, DISK = 0, 1
SHAPE_CLASSES = ("rectangle", "disk")

BACKGROUND_MAX = 0.3
OBJECT_MIN = 0.6


def content_hash(*arrays: np.ndarray) -> str:
    """Git-blob style SHA-1 over the concatenated raw bytes of the arrays."""
    payload = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)
    h = hashlib.sha1(b"blob %d\0" % len(payload))
    h.update(payload)
    return h.hexdigest()


@dataclass
class SequenceDataset:
    X: np.ndarray  # N×T×1×H×W
    y: np.ndarray  # N
    flash_times: np.ndarray = field(default=None, repr=False)  # N×2, (t_A, t_B)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "SequenceDataset":
        ft = None if self.flash_times is None else self.flash_times[idx]
        return SequenceDataset(self.X[idx], self.y[idx], ft)

    def content_hash(self) -> str:
        return content_hash(self.X, self.y.astype(np.int64))


@dataclass
class DetectionDataset:
    images: np.ndarray  # N×1×H×W
    boxes: list  # per image: k×5 array of (x_min, y_min, x_max, y_max, class_id), normalized

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "DetectionDataset":
        idx = np.arange(len(self))[idx]
        return DetectionDataset(self.images[idx], [self.boxes[i] for i in idx])

    def content_hash(self) -> str:
        flat = np.concatenate([b.reshape(-1, 5) for b in self.boxes]) if self.boxes else np.zeros((0, 5))
        counts = np.array([len(b) for b in self.boxes], dtype=np.int64)
        return content_hash(self.images, counts, flat.astype(np.float64))


def flash_locations(size: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Top-left corners (row, col) of the 2×2 flash patches A and B."""
    return (size // 4 - 1, size // 4 - 1), (3 * size // 4 - 1, 3 * size // 4 - 1)


def gen_temporal_order_dataset(n: int, T: int, size: int, seed: int, min_gap: int = 1) -> SequenceDataset:
    """Label 0 iff A flashes before B; the two flash frames are distinct and ``min_gap`` apart or more."""
    if T < 4:
        raise ValueError(f"temporal-order task needs T >= 4, got {T}")
    if size < 8:
        raise ValueError(f"temporal-order task needs size >= 8, got {size}")
    gap = min_gap
    pairs = [(a, b) for a, b in itertools.combinations(range(T), 2) if b - a >= gap]
    if gap < 1 or not pairs:
        raise ValueError(f"cannot schedule two flashes {gap} frames apart in {T} frames")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    picks = rng.integers(0, len(pairs), size=n)
    first = np.array([pairs[p][0] for p in picks], dtype=np.int64)
    second = np.array([pairs[p][1] for p in picks], dtype=np.int64)
    t_a = np.where(labels == 0, first, second)
    t_b = np.where(labels == 0, second, first)
    X = np.zeros((n, T, 1, size, size), dtype=np.float32)
    (ra, ca), (rb, cb) = flash_locations(size)
    rows = np.arange(n)
    for dr in (0, 1):
        for dc in (0, 1):
            X[rows, t_a, 0, ra + dr, ca + dc] = 1.0
            X[rows, t_b, 0, rb + dr, cb + dc] = 1.0
    return SequenceDataset(X, labels, np.stack([t_a, t_b], axis=1))


def _draw(img: np.ndarray, kind: int, x0: int, y0: int, w: int, h: int, value: float) -> None:
    if kind == RECTANGLE:
        img[y0 : y0 + h, x0 : x0 + w] = value
        return
    yy, xx = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    cy, cx = y0 + h / 2, x0 + w / 2
    inside = ((yy + 0.5 - cy) / (h / 2)) ** 2 + ((xx + 0.5 - cx) / (w / 2)) ** 2 <= 1.0
    patch = img[y0 : y0 + h, x0 : x0 + w]
    patch[inside] = value


def _place(rng: np.random.Generator, size: int, count: int, lo: int, hi: int, tries: int = 100):
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(tries):
        if len(placed) == count:
            break
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        # one pixel of clearance between objects
        if all(x0 + w + 1 <= px or px + pw + 1 <= x0 or y0 + h + 1 <= py or py + ph + 1 <= y0 for px, py, pw, ph in placed):
            placed.append((x0, y0, w, h))
    return placed if len(placed) == count else None


def gen_shapes_dataset(n: int, size: int, seed: int, max_objects: int = 3) -> DetectionDataset:
    if size < 32:
        raise ValueError(f"shapes task needs size >= 32, got {size}")
    rng = np.random.default_rng(seed)
    lo, hi = max(4, size // 5), max(6, size * 3 // 8)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    boxes = []
    for k in range(n):
        while True:
            count = int(rng.integers(1, max_objects + 1))
            placed = _place(rng, size, count, lo, hi)
            if placed is not None:
                break
        img = rng.uniform(0.0, BACKGROUND_MAX, size=(size, size))
        rows = []
        for x0, y0, w, h in placed:
            kind = int(rng.integers(0, 2))
            _draw(img, kind, x0, y0, w, h, float(rng.uniform(OBJECT_MIN, 1.0)))
            rows.append((x0 / size, y0 / size, (x0 + w) / size, (y0 + h) / size, kind))
        images[k, 0] = img
        boxes.append(np.array(rows, dtype=np.float64))
    return DetectionDataset(images, boxes)


def train_test_split(data, test_fraction: float, seed: int):
    """Deterministic split; the test part is drawn from a seeded permutation."""
    n = len(data)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_test = int(round(n * test_fraction))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))
