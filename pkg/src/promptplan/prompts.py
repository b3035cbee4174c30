"""Prompt planning: point grids, detector box prompts, and sparse points
restricted to the uncovered parts of a coverage mask."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

from .mask import BinaryMask, Box

if TYPE_CHECKING:
    from .backends import Detection

DEFAULT_CONF_FLOOR = 0.25


@dataclass(frozen=True)
class PointPrompt:
    """Continuous pixel coordinate inside the image."""

    x: float
    y: float


@dataclass(frozen=True)
class BoxPrompt:
    """Box query, optionally tagged with the detection that produced it."""

    box: Box
    category_id: int | None = None
    score: float | None = None


@dataclass(frozen=True)
class GridSpec:
    points_per_side: int

    def __post_init__(self):
        if self.points_per_side < 1:
            raise ValueError(f"points_per_side must be >= 1, got {self.points_per_side}")


def full_grid(spec: GridSpec, width: int, height: int) -> list[PointPrompt]:
    """Cell centers of a uniform n x n partition of the image, row-major.

    Point (i, j) sits at ((i + 0.5) * width / n, (j + 0.5) * height / n),
    so every point is strictly inside the image.
    """
    if width < 1 or height < 1:
        raise ValueError(f"dimensions must be positive, got {width}x{height}")
    n = spec.points_per_side
    return [
        PointPrompt((i + 0.5) * width / n, (j + 0.5) * height / n)
        for j in range(n)
        for i in range(n)
    ]


def point_pixel(p: PointPrompt) -> tuple[int, int]:
    """Pixel containing a continuous point: floor of each coordinate."""
    return math.floor(p.x), math.floor(p.y)


def is_covered(p: PointPrompt, coverage: BinaryMask) -> bool:
    x, y = point_pixel(p)
    return coverage.get(x, y)


def uncovered_grid(spec: GridSpec, coverage: BinaryMask) -> list[PointPrompt]:
    """Subset of :func:`full_grid` whose pixel is unset in ``coverage``.

    Ordering is preserved from the full grid; with an empty coverage mask
    this equals the full grid exactly.
    """
    grid = full_grid(spec, coverage.width, coverage.height)
    return [p for p in grid if not is_covered(p, coverage)]


def boxes_from_detections(
    detections: Iterable["Detection"],
    width: int,
    height: int,
    conf_floor: float = DEFAULT_CONF_FLOOR,
) -> list[BoxPrompt]:
    """Detections to box prompts: confidence-filtered, clamped, score-sorted.

    Detections scoring below ``conf_floor`` are dropped, boxes are clamped
    to the image and discarded when nothing remains inside, and the output
    is ordered by descending score with ties kept in input order.
    """
    kept = []
    for idx, det in enumerate(detections):
        if det.score < conf_floor:
            continue
        box = det.box.clamp(width, height)
        if box is None:
            continue
        kept.append((det.score, idx, BoxPrompt(box=box, category_id=det.category_id, score=det.score)))
    kept.sort(key=lambda t: (-t[0], t[1]))
    return [prompt for _, _, prompt in kept]
