"""The three full-scene segmentation strategies and their shared machinery.

* ``boxes_only``   detector boxes -> box prompts -> NMS.
* ``hybrid``       boxes first, then a sparse point grid laid only over the
                   regions the box-derived masks left uncovered.
* ``hierarchical`` coarse point grid, keep high-confidence masks as covered,
                   re-prompt the remainder at dense grid density.

Every mode reports exact prompt/call accounting and runs deterministically
for a fixed (config, fixture, seed) triple.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .backends import BackendStats, SegmentResult
from .mask import BinaryMask, encode_rle, iou, union_into
from .prompts import (
    DEFAULT_CONF_FLOOR,
    GridSpec,
    boxes_from_detections,
    full_grid,
    uncovered_grid,
)

MODES = ("hierarchical", "boxes_only", "hybrid")

# provenance labels, in NMS tie-break priority order (box prompts first)
PROV_BOX = "box_prompt"
PROV_ROUND1 = "point_prompt_round1"
PROV_ROUND2 = "point_prompt_round2"
PROV_SPARSE = "sparse_point"
_PROV_RANK = {PROV_BOX: 0, PROV_ROUND1: 1, PROV_ROUND2: 2, PROV_SPARSE: 3}
_PROV_JSON = {PROV_BOX: "box", PROV_ROUND1: "round1", PROV_ROUND2: "round2", PROV_SPARSE: "sparse"}
_PROV_FROM_JSON = {v: k for k, v in _PROV_JSON.items()}


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "hybrid"
    coarse_grid: GridSpec = GridSpec(8)
    dense_grid: GridSpec = GridSpec(32)
    sparse_grid: GridSpec = GridSpec(16)
    nms_iou_threshold: float = 0.7
    high_conf_threshold: float = 0.88
    detection_conf_floor: float = DEFAULT_CONF_FLOOR
    min_mask_area: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("nms_iou_threshold", "high_conf_threshold", "detection_conf_floor"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.min_mask_area < 0:
            raise ValueError("min_mask_area must be >= 0")


@dataclass(frozen=True)
class MaskEntry:
    result: SegmentResult
    provenance: str
    category_id: int | None = None

    @property
    def score(self) -> float:
        return self.result.score

    @property
    def mask(self) -> BinaryMask:
        return self.result.mask


@dataclass
class MaskCollection:
    """Ordered mask entries plus the prompt counts that produced them."""

    entries: list[MaskEntry] = field(default_factory=list)
    prompt_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def prompts_issued(self) -> int:
        return sum(self.prompt_counts.values())

    def max_pairwise_iou(self) -> float:
        worst = 0.0
        for i, a in enumerate(self.entries):
            for b in self.entries[i + 1 :]:
                worst = max(worst, iou(a.mask, b.mask))
        return worst


def iou_nms(collection: MaskCollection, threshold: float) -> MaskCollection:
    """Greedy mask NMS: keep by descending score, drop near-duplicates.

    Ties break by provenance priority (box-derived masks outrank
    point-derived ones), then original position. A candidate survives iff
    its IoU with every already-accepted mask is <= threshold.
    """
    order = sorted(
        range(len(collection.entries)),
        key=lambda i: (
            -collection.entries[i].score,
            _PROV_RANK.get(collection.entries[i].provenance, len(_PROV_RANK)),
            i,
        ),
    )
    accepted: list[MaskEntry] = []
    for idx in order:
        entry = collection.entries[idx]
        if all(iou(entry.mask, kept.mask) <= threshold for kept in accepted):
            accepted.append(entry)
    return MaskCollection(entries=accepted, prompt_counts=dict(collection.prompt_counts))


def coverage_of(collection: MaskCollection, width: int, height: int) -> BinaryMask:
    """Union of every member mask (the binary coverage mask)."""
    coverage = BinaryMask.zeros(width, height)
    for entry in collection.entries:
        union_into(coverage, entry.mask)
    return coverage


# --- the three modes --------------------------------------------------------

def run_boxes_only(image, detector, segmenter, config: PipelineConfig):
    """Detector boxes as prompts; one segmenter call per surviving box."""
    start = time.perf_counter()
    stats = BackendStats()
    entries, _, n_prompts = _box_stage(image, detector, segmenter, config, stats)
    collection = iou_nms(
        MaskCollection(entries=entries, prompt_counts={"box": n_prompts}),
        config.nms_iou_threshold,
    )
    stats.wall_time = time.perf_counter() - start
    return collection, stats


def run_hybrid(image, detector, segmenter, config: PipelineConfig):
    """Box stage, then sparse points only where boxes left no coverage."""
    start = time.perf_counter()
    stats = BackendStats()
    entries, box_results, n_boxes = _box_stage(image, detector, segmenter, config, stats)

    coverage = BinaryMask.zeros(image.width, image.height)
    for result in box_results:
        union_into(coverage, result.mask)

    sparse_points = uncovered_grid(config.sparse_grid, coverage)
    for point in sparse_points:
        result = segmenter.segment_point(image, point)
        stats.segmenter_calls += 1
        if result.mask.area() >= config.min_mask_area:
            entries.append(MaskEntry(result=result, provenance=PROV_SPARSE))

    collection = iou_nms(
        MaskCollection(entries=entries, prompt_counts={"box": n_boxes, "sparse": len(sparse_points)}),
        config.nms_iou_threshold,
    )
    stats.wall_time = time.perf_counter() - start
    return collection, stats


def run_hierarchical(image, segmenter, config: PipelineConfig):
    """Coarse grid, keep confident masks as covered, dense grid on the rest."""
    start = time.perf_counter()
    stats = BackendStats()
    coverage = BinaryMask.zeros(image.width, image.height)
    entries: list[MaskEntry] = []

    round1_points = full_grid(config.coarse_grid, image.width, image.height)
    for point in round1_points:
        result = segmenter.segment_point(image, point)
        stats.segmenter_calls += 1
        if result.score < config.high_conf_threshold:
            continue
        union_into(coverage, result.mask)
        if result.mask.area() >= config.min_mask_area:
            entries.append(MaskEntry(result=result, provenance=PROV_ROUND1))

    round2_points = uncovered_grid(config.dense_grid, coverage)
    for point in round2_points:
        result = segmenter.segment_point(image, point)
        stats.segmenter_calls += 1
        if result.mask.area() >= config.min_mask_area:
            entries.append(MaskEntry(result=result, provenance=PROV_ROUND2))

    collection = iou_nms(
        MaskCollection(
            entries=entries,
            prompt_counts={"round1": len(round1_points), "round2": len(round2_points)},
        ),
        config.nms_iou_threshold,
    )
    stats.wall_time = time.perf_counter() - start
    return collection, stats


def _box_stage(image, detector, segmenter, config, stats):
    detections = detector.detect(image)
    stats.detector_calls += 1
    prompts = boxes_from_detections(
        detections, image.width, image.height, config.detection_conf_floor
    )
    entries: list[MaskEntry] = []
    results: list[SegmentResult] = []
    for prompt in prompts:
        result = segmenter.segment_box(image, prompt)
        stats.segmenter_calls += 1
        results.append(result)
        if result.mask.area() >= config.min_mask_area:
            entries.append(
                MaskEntry(result=result, provenance=PROV_BOX, category_id=prompt.category_id)
            )
    return entries, results, len(prompts)


def run_scene(image, detector, segmenter, config: PipelineConfig):
    """Dispatch one image through the configured mode."""
    if config.mode == "boxes_only":
        return run_boxes_only(image, detector, segmenter, config)
    if config.mode == "hybrid":
        return run_hybrid(image, detector, segmenter, config)
    return run_hierarchical(image, segmenter, config)


# --- batch driving ----------------------------------------------------------

@dataclass
class ImageRun:
    image_id: str
    collection: MaskCollection
    stats: BackendStats


@dataclass
class SkippedImage:
    image_id: str
    reason: str


def run_batch(images, config: PipelineConfig, backend_factory, jobs: int = 1):
    """Process images through the pipeline, isolating per-image failures.

    ``backend_factory`` returns a fresh ``(detector, segmenter)`` pair; each
    worker thread gets its own pair so external backends keep their single
    in-flight guarantee. Results come back in input order regardless of
    completion order.
    """
    from .protocol import BackendUnavailable, ProtocolError  # local: avoid cycle

    local = threading.local()
    created: list = []
    created_lock = threading.Lock()

    def backends():
        if not hasattr(local, "pair"):
            pair = backend_factory()
            with created_lock:
                created.append(pair)
            local.pair = pair
        return local.pair

    def work(image):
        detector, segmenter = backends()
        try:
            collection, stats = run_scene(image, detector, segmenter, config)
            return ImageRun(image_id=str(image.image_id), collection=collection, stats=stats)
        except (ProtocolError, BackendUnavailable) as exc:
            return SkippedImage(image_id=str(image.image_id), reason=str(exc))

    if jobs <= 1:
        outcomes = [work(image) for image in images]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, images))

    for pair in created:
        for backend in pair:
            close = getattr(backend, "close", None)
            if close is not None:
                close()

    results = [o for o in outcomes if isinstance(o, ImageRun)]
    skipped = [o for o in outcomes if isinstance(o, SkippedImage)]
    return results, skipped


# --- prediction serialization (JSON-lines, one object per mask) -------------

def prediction_records(run: ImageRun) -> list[dict]:
    return [
        {
            "image_id": run.image_id,
            "score": entry.score,
            "category_id": entry.category_id,
            "provenance": _PROV_JSON.get(entry.provenance, entry.provenance),
            "rle": encode_rle(entry.mask).to_coco(),
        }
        for entry in run.collection.entries
    ]


def provenance_from_json(short: str) -> str:
    return _PROV_FROM_JSON.get(short, short)
