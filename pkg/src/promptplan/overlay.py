"""Overlay rendering for prediction inspection.

Writes RGB PNGs with a tiny self-contained encoder (the fixtures are mask
grids, not photographs, so no image stack is needed). Colors are a
deterministic function of mask index, and box-derived masks get their
bounding box outlined on top of the fill.
"""

from __future__ import annotations

import colorsys
import struct
import zlib
from pathlib import Path

import numpy as np

from .mask import bbox_of

GOLDEN_RATIO_CONJUGATE = 0.61803398875
BACKGROUND_GRAY = 32
FILL_ALPHA = 0.55


def mask_color(index: int) -> tuple[int, int, int]:
    """Stable, well-spread palette: golden-angle hue walk."""
    hue = (index * GOLDEN_RATIO_CONJUGATE) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def render_overlay(width: int, height: int, masks) -> np.ndarray:
    """Compose masks onto a gray canvas.

    ``masks`` is an iterable of (mask, outlined) pairs in paint order.
    Returns an (H, W, 3) uint8 array.
    """
    canvas = np.full((height, width, 3), BACKGROUND_GRAY, dtype=np.float64)
    outlines = []
    for index, (mask, outlined) in enumerate(masks):
        color = np.array(mask_color(index), dtype=np.float64)
        bits = np.asarray(mask.bits)
        canvas[bits] = canvas[bits] * (1 - FILL_ALPHA) + color * FILL_ALPHA
        if outlined:
            box = bbox_of(mask)
            if box is not None:
                outlines.append((box, color))
    for box, color in outlines:
        x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
        canvas[y0, x0:x1] = color
        canvas[y1 - 1, x0:x1] = color
        canvas[y0:y1, x0] = color
        canvas[y0:y1, x1 - 1] = color
    return canvas.round().astype(np.uint8)


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    """Minimal 8-bit RGB PNG encoder (filter 0 on every scanline)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8 array")
    height, width = rgb.shape[:2]

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(height))
    payload = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0))
        + chunk(b"IDAT", zlib.compress(raw, 6))
        + chunk(b"IEND", b"")
    )
    Path(path).write_bytes(payload)
