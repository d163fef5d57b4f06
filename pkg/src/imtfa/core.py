"""Geometry, mask and instance primitives.

Boxes use half-open continuous pixel coordinates ``[x1, x2) x [y1, y2)``, so a
box covering pixel column ``c`` spans ``c .. c + 1``. Masks are boolean
``(height, width)`` arrays; run-length encoding follows the COCO convention
(column-major, leading run of zeros).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"inverted box {coords}")
        # normalise numpy scalars so equality and serialisation are plain floats
        for name, value in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, float(value))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list(), dtype=np.float64)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)

    def clip(self, height: int, width: int) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        x2 = min(max(self.x2, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Immutable ``height x width`` bit grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise GeometryError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise GeometryError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        else:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True)
class RLEMask:
    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"RLE dimensions must be positive, got {self.height}x{self.width}")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise GeometryError("RLE counts must be non-negative")
        if sum(counts) != self.height * self.width:
            raise GeometryError(
                f"RLE counts sum to {sum(counts)}, expected {self.height * self.width}"
            )
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class InstanceAnnotation:
    class_id: int
    box: Box
    mask: Optional[BinaryMask] = None
    # excluded from loss targets (balanced fine-tuning sets); never a false negative
    ignore: bool = False
    instance_id: int = -1


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box
    mask: Optional[BinaryMask] = None
    # per-class probabilities the label was chosen from, when retained
    probabilities: Optional[tuple[float, ...]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise GeometryError(f"non-finite detection score {self.score}")


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.data.shape != b.data.shape:
        raise GeometryError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    inter = np.logical_and(a.data, b.data).sum()
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def mask_iou_matrix(a: Sequence[BinaryMask], b: Sequence[BinaryMask]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    fa = np.stack([m.data.ravel() for m in a]).astype(np.float64)
    fb = np.stack([m.data.ravel() for m in b]).astype(np.float64)
    if fa.shape[1] != fb.shape[1]:
        raise GeometryError("mask shapes differ")
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def rle_encode(m: BinaryMask) -> RLEMask:
    pixels = m.data.T.ravel().astype(np.int8)
    # run boundaries in column-major order; a leading 0 forces the first run to count zeros
    padded = np.concatenate([[0], pixels, [1 - pixels[-1]]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    counts = np.diff(np.concatenate([[0], edges]))
    return RLEMask(m.height, m.width, tuple(int(c) for c in counts))


def rle_decode(r: RLEMask) -> BinaryMask:
    total = r.height * r.width
    if sum(r.counts) != total:
        raise GeometryError(f"RLE counts sum to {sum(r.counts)}, expected {total}")
    values = np.zeros(len(r.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, r.counts)
    return BinaryMask(flat.reshape(r.width, r.height).T)


def mask_to_box(m: BinaryMask) -> Box:
    rows = np.flatnonzero(m.data.any(axis=1))
    cols = np.flatnonzero(m.data.any(axis=0))
    if rows.size == 0:
        raise GeometryError("cannot take the bounding box of an empty mask")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
