"""Binary masks, the COCO-style RLE codec, and the geometry kernels.

Everything downstream (prompt planning, pipelines, evaluation) trades in
:class:`BinaryMask` values. Masks are stored row-major as dense boolean
grids; overlap kernels run on packed bytes with vectorized popcounts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatch(ValueError):
    """Two masks were combined without sharing width and height."""


class MalformedRle(ValueError):
    """An RLE payload violates the run-length invariants."""


class BinaryMask:
    """Dense 2-D binary pixel mask.

    Value semantics: the constructor copies its input and the ``bits``
    property hands out a read-only view. The only sanctioned mutation is
    :func:`union_into`, which requires exclusive access to the target.
    """

    __slots__ = ("_bits", "_packed")

    def __init__(self, bits: np.ndarray):
        arr = np.array(bits, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask must be a 2-D grid with positive extent, got shape {arr.shape}")
        self._bits = arr
        self._packed: np.ndarray | None = None

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        _check_dims(width, height)
        return cls._wrap(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        _check_dims(width, height)
        return cls._wrap(np.ones((height, width), dtype=bool))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "BinaryMask":
        # Trusted internal constructor: takes ownership, no copy.
        m = object.__new__(cls)
        m._bits = arr
        m._packed = None
        return m

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def bits(self) -> np.ndarray:
        """Read-only (height, width) boolean view of the grid."""
        view = self._bits.view()
        view.flags.writeable = False
        return view

    @property
    def packed(self) -> np.ndarray:
        """Row-major bit-packed bytes, cached until the mask is mutated."""
        if self._packed is None:
            self._packed = np.packbits(self._bits)
        return self._packed

    def get(self, x: int, y: int) -> bool:
        """Cell at column ``x``, row ``y``. Out-of-range access raises."""
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"({x}, {y}) outside {self.width}x{self.height} mask")
        return bool(self._bits[y, x])

    def area(self) -> int:
        """Number of set cells."""
        return int(np.bitwise_count(self.packed).sum(dtype=np.int64))

    def copy(self) -> "BinaryMask":
        return BinaryMask._wrap(self._bits.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self._bits.shape == other._bits.shape and bool(np.array_equal(self._bits, other._bits))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, area={self.area()})"


@dataclass(frozen=True)
class RleMask:
    """Run-length encoded mask in the uncompressed COCO integer convention.

    ``counts`` alternate zero-run/one-run over a column-major traversal and
    start with the number of unset pixels; a single leading zero marks a
    mask whose first pixel is set.
    """

    width: int
    height: int
    counts: tuple[int, ...]

    def validate(self) -> None:
        _check_dims(self.width, self.height)
        for i, c in enumerate(self.counts):
            if c < 0:
                raise MalformedRle(f"negative run length {c} at index {i}")
            if c == 0 and i != 0:
                raise MalformedRle(f"zero-length interior run at index {i}")
        total = sum(self.counts)
        if total != self.width * self.height:
            raise MalformedRle(
                f"runs cover {total} pixels, expected {self.width * self.height}"
            )

    def to_coco(self) -> dict:
        """COCO-style JSON fragment: ``{"size": [h, w], "counts": [...]}``."""
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_coco(cls, obj: dict) -> "RleMask":
        try:
            h, w = obj["size"]
            counts = tuple(int(c) for c in obj["counts"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRle(f"not a COCO RLE fragment: {obj!r}") from exc
        rle = cls(width=int(w), height=int(h), counts=counts)
        rle.validate()
        return rle


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height

    def clamp(self, width: int, height: int) -> "Box | None":
        """Clip to image bounds; None when nothing remains."""
        x0 = max(0, self.x_min)
        y0 = max(0, self.y_min)
        x1 = min(width, self.x_max)
        y1 = min(height, self.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1)

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def box_iou(a: Box, b: Box) -> float:
    """IoU of two boxes; 0 when they do not overlap."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def encode_rle(mask: BinaryMask) -> RleMask:
    """Encode a mask as column-major alternating runs starting with zeros."""
    flat = mask.bits.ravel(order="F")
    n = flat.size
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(width=mask.width, height=mask.height, counts=tuple(counts))


def decode_rle(rle: RleMask) -> BinaryMask:
    """Exact inverse of :func:`encode_rle`; raises MalformedRle on bad input."""
    rle.validate()
    values = np.arange(len(rle.counts), dtype=np.uint8) % 2
    flat = np.repeat(values, rle.counts).astype(bool)
    bits = flat.reshape((rle.height, rle.width), order="F")
    return BinaryMask._wrap(np.ascontiguousarray(bits))


def _check_dims(width: int, height: int) -> None:
    if width < 1 or height < 1:
        raise ValueError(f"dimensions must be positive, got {width}x{height}")


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.width != b.width or a.height != b.height:
        raise DimensionMismatch(
            f"{a.width}x{a.height} vs {b.width}x{b.height}"
        )


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """|a∩b| / |a∪b| with integer counts; 0.0 when the union is empty."""
    _check_same_shape(a, b)
    pa, pb = a.packed, b.packed
    inter = int(np.bitwise_count(pa & pb).sum(dtype=np.int64))
    union = int(np.bitwise_count(pa | pb).sum(dtype=np.int64))
    if union == 0:
        return 0.0
    return inter / union


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    _check_same_shape(a, b)
    return int(np.bitwise_count(a.packed & b.packed).sum(dtype=np.int64))


def union_into(target: BinaryMask, source: BinaryMask) -> BinaryMask:
    """Cellwise OR of ``source`` into ``target``; mutates and returns target."""
    _check_same_shape(target, source)
    np.logical_or(target._bits, source._bits, out=target._bits)
    target._packed = None
    return target


def bbox_of(mask: BinaryMask) -> Box | None:
    """Tight half-open bounding box of the set pixels; None when empty."""
    rows = np.flatnonzero(mask.bits.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.bits.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
