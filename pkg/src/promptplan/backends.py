"""Detector/segmenter backends: deterministic ground-truth oracles over
synthetic scenes, plus the scene fixture format they are verified against.

Oracles answer prompts straight from the annotation, which makes pipeline
behaviour exactly predictable at desk scale: a perfect detector yields
perfect masks, a recall-limited one misses a seeded, reproducible subset.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .mask import BinaryMask, Box, RleMask, bbox_of, box_iou, decode_rle, encode_rle, iou
from .prompts import BoxPrompt, PointPrompt, point_pixel

# COCO object-size convention
SMALL_AREA = 32**2
MEDIUM_AREA = 96**2

SYNTH_CATEGORY_IDS = (1, 2, 3, 4, 5)
BACKGROUND_SCORE = 0.8


class GenerationFailure(RuntimeError):
    """Rejection sampling could not place an instance within its budget."""


@dataclass(frozen=True)
class Detection:
    box: Box
    category_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class SegmentResult:
    mask: BinaryMask
    score: float


@dataclass(frozen=True)
class Instance:
    mask: BinaryMask
    category_id: int

    @property
    def size_class(self) -> str:
        area = self.mask.area()
        if area < SMALL_AREA:
            return "small"
        if area < MEDIUM_AREA:
            return "medium"
        return "large"


@dataclass
class SceneAnnotation:
    """Ground-truth record for one image. Treat as immutable once built."""

    image_id: str
    width: int
    height: int
    instances: list[Instance]
    _bg_labels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for inst in self.instances:
            if inst.mask.width != self.width or inst.mask.height != self.height:
                raise ValueError(
                    f"instance mask {inst.mask.width}x{inst.mask.height} does not "
                    f"match scene {self.width}x{self.height}"
                )


@dataclass
class BackendStats:
    """Per-run call and wall-time accounting (the paper's cost unit)."""

    detector_calls: int = 0
    segmenter_calls: int = 0
    wall_time: float = 0.0


# --- oracle backends -------------------------------------------------------

def oracle_detect(scene: SceneAnnotation, recall: float, seed: int) -> list[Detection]:
    """Simulate a recall-limited detector over the ground truth.

    Each instance is emitted with probability ``recall`` using a stream
    derived from (seed, image_id), so a batch run does not repeat the same
    keep pattern on every scene, yet any (scene, seed) pair is reproducible.
    Scores are deterministic per instance index, uniform in [0.5, 1.0].
    """
    n = len(scene.instances)
    rng = np.random.default_rng([seed, zlib.crc32(str(scene.image_id).encode())])
    keep = rng.random(n) < recall
    scores = 0.5 + 0.5 * rng.random(n)
    detections = []
    for idx, inst in enumerate(scene.instances):
        if not keep[idx]:
            continue
        box = bbox_of(inst.mask)
        if box is None:
            continue
        detections.append(Detection(box=box, category_id=inst.category_id, score=float(scores[idx])))
    return detections


def oracle_segment_box(scene: SceneAnnotation, prompt: BoxPrompt) -> SegmentResult:
    """Return the instance whose tight bbox best matches the prompt box.

    Score is that box IoU; ties go to the lower instance index. A scene
    with no instances yields an empty mask with score 0.
    """
    best_idx = -1
    best_iou = -1.0
    for idx, inst in enumerate(scene.instances):
        inst_box = bbox_of(inst.mask)
        if inst_box is None:
            continue
        overlap = box_iou(prompt.box, inst_box)
        if overlap > best_iou:
            best_iou = overlap
            best_idx = idx
    if best_idx < 0:
        return SegmentResult(mask=BinaryMask.zeros(scene.width, scene.height), score=0.0)
    return SegmentResult(mask=scene.instances[best_idx].mask.copy(), score=best_iou)


def oracle_segment_point(scene: SceneAnnotation, prompt: PointPrompt) -> SegmentResult:
    """Segment the most specific region containing the point.

    Inside instances: the smallest containing instance wins (ties to the
    lower index), score 1.0. Otherwise the 4-connected component of the
    background (complement of all instances) around the point, score 0.8.
    """
    x, y = point_pixel(prompt)
    if not (0 <= x < scene.width and 0 <= y < scene.height):
        raise ValueError(f"point {prompt} outside {scene.width}x{scene.height} image")
    containing = [
        (inst.mask.area(), idx)
        for idx, inst in enumerate(scene.instances)
        if inst.mask.get(x, y)
    ]
    if containing:
        _, idx = min(containing)
        return SegmentResult(mask=scene.instances[idx].mask.copy(), score=1.0)
    labels = _background_labels(scene)
    component = labels == labels[y, x]
    return SegmentResult(mask=BinaryMask(component), score=BACKGROUND_SCORE)


def _background_labels(scene: SceneAnnotation) -> np.ndarray:
    if scene._bg_labels is None:
        background = np.ones((scene.height, scene.width), dtype=bool)
        for inst in scene.instances:
            background &= ~inst.mask.bits
        labels, _ = ndimage.label(background)
        scene._bg_labels = labels
    return scene._bg_labels


class OracleDetector:
    """Pipeline-facing wrapper; the image handle is the scene itself."""

    def __init__(self, recall: float = 1.0, seed: int = 0):
        if not 0.0 <= recall <= 1.0:
            raise ValueError(f"recall {recall} outside [0, 1]")
        self.recall = recall
        self.seed = seed

    def detect(self, scene: SceneAnnotation) -> list[Detection]:
        return oracle_detect(scene, self.recall, self.seed)


class OracleSegmenter:
    def segment_box(self, scene: SceneAnnotation, prompt: BoxPrompt) -> SegmentResult:
        return oracle_segment_box(scene, prompt)

    def segment_point(self, scene: SceneAnnotation, prompt: PointPrompt) -> SegmentResult:
        return oracle_segment_point(scene, prompt)


# --- synthetic scene generation --------------------------------------------

MAX_PLACEMENT_ATTEMPTS = 80
MAX_PAIRWISE_IOU = 0.3


def synth_scene(
    width: int,
    height: int,
    n_instances: int,
    seed: int,
    image_id: str | None = None,
) -> SceneAnnotation:
    """Deterministic scene of rectangles and digital ellipses.

    Instances may overlap but pairwise mask IoU stays <= 0.3 and tight
    bounding boxes stay distinct (rejection sampling), which keeps the
    box-prompt oracle's box-to-instance association unambiguous. Shape
    extents scale with the image so a 16-per-side grid point always lands
    inside every instance of a square scene.
    """
    if n_instances < 0:
        raise ValueError("n_instances must be >= 0")
    rng = np.random.default_rng(seed)
    side = min(width, height)
    rect_lo = max(3, -(-side // 32))  # ceil(side/32): full extent >= grid spacing
    rect_hi = max(rect_lo + 1, round(0.11 * side))
    ell_lo = max(4, -(-side // 22))
    ell_hi = max(ell_lo + 1, round(0.12 * side))

    instances: list[Instance] = []
    boxes: list[Box] = []
    for k in range(n_instances):
        placed = False
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            if rng.integers(0, 2) == 0:
                bits = _rect_bits(rng, width, height, rect_lo, rect_hi)
            else:
                bits = _ellipse_bits(rng, width, height, ell_lo, ell_hi)
            if bits is None:
                continue
            candidate = BinaryMask(bits)
            box = bbox_of(candidate)
            if box is None or box in boxes:
                continue
            if any(iou(candidate, inst.mask) > MAX_PAIRWISE_IOU for inst in instances):
                continue
            category = SYNTH_CATEGORY_IDS[k % len(SYNTH_CATEGORY_IDS)]
            instances.append(Instance(mask=candidate, category_id=category))
            boxes.append(box)
            placed = True
            break
        if not placed:
            raise GenerationFailure(
                f"could not place instance {k} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    return SceneAnnotation(
        image_id=image_id if image_id is not None else f"synth_{seed}",
        width=width,
        height=height,
        instances=instances,
    )


def _rect_bits(rng, width, height, lo, hi) -> np.ndarray | None:
    hw = int(rng.integers(lo, hi + 1))
    hh = int(rng.integers(lo, hi + 1))
    if 2 * hw >= width or 2 * hh >= height:
        return None
    cx = int(rng.integers(hw, width - hw + 1))
    cy = int(rng.integers(hh, height - hh + 1))
    bits = np.zeros((height, width), dtype=bool)
    bits[cy - hh : cy + hh, cx - hw : cx + hw] = True
    return bits


def _ellipse_bits(rng, width, height, lo, hi) -> np.ndarray | None:
    a = int(rng.integers(lo, hi + 1))
    b = int(rng.integers(lo, hi + 1))
    if 2 * a >= width or 2 * b >= height:
        return None
    cx = int(rng.integers(a, width - a + 1))
    cy = int(rng.integers(b, height - b + 1))
    yy, xx = np.ogrid[0:height, 0:width]
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


# --- scene fixture persistence ----------------------------------------------

def scene_to_json(scene: SceneAnnotation) -> dict:
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "instances": [
            {"category_id": inst.category_id, "rle": encode_rle(inst.mask).to_coco()}
            for inst in scene.instances
        ],
    }


def scene_from_json(obj: dict) -> SceneAnnotation:
    instances = [
        Instance(mask=decode_rle(RleMask.from_coco(item["rle"])), category_id=int(item["category_id"]))
        for item in obj["instances"]
    ]
    return SceneAnnotation(
        image_id=obj["image_id"],
        width=int(obj["width"]),
        height=int(obj["height"]),
        instances=instances,
    )


def save_scene(scene: SceneAnnotation, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), sort_keys=True) + "\n")


def load_scene(path: str | Path) -> SceneAnnotation:
    return scene_from_json(json.loads(Path(path).read_text()))


def load_fixtures(path: str | Path) -> list[SceneAnnotation]:
    """Load all scenes under a fixture directory (or one scene file).

    Directories are read through their ``index.json`` when present,
    otherwise every ``*.json`` file is taken in sorted order.
    """
    path = Path(path)
    if path.is_file():
        return [load_scene(path)]
    index = path / "index.json"
    if index.exists():
        names = json.loads(index.read_text())["files"]
        return [load_scene(path / name) for name in names]
    files = sorted(p for p in path.glob("*.json") if p.name != "index.json")
    if not files:
        raise FileNotFoundError(f"no scene fixtures under {path}")
    return [load_scene(p) for p in files]
