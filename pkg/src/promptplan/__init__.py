"""promptplan: detector-guided promptable segmentation with coverage-aware
sparse prompting, ground-truth oracle backends, and a two-track evaluation
engine (COCO-style AP plus class-agnostic AR/mIoU)."""

__version__ = "0.1.0"

from .mask import (
    BinaryMask,
    Box,
    DimensionMismatch,
    MalformedRle,
    RleMask,
    bbox_of,
    box_iou,
    decode_rle,
    encode_rle,
    intersection_area,
    iou,
    union_into,
)

__all__ = [
    "BinaryMask",
    "Box",
    "DimensionMismatch",
    "MalformedRle",
    "RleMask",
    "bbox_of",
    "box_iou",
    "decode_rle",
    "encode_rle",
    "intersection_area",
    "iou",
    "union_into",
    "__version__",
]
