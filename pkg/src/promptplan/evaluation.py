"""Two-track evaluation: detector-based COCO-style AP and class-agnostic
AR/mIoU, plus run-level aggregation into a report.

Matching contract (shared by the brute-force reference in the tests):

* AP: per category and image, predictions in descending score order
  greedily match the unmatched same-category GT with the highest IoU >= t.
  Ties keep the lower GT index; score ties keep input order. Size splits
  use half-open COCO area ranges (small < 32^2 <= medium < 96^2 <= large);
  GT outside the range is ignored, detections matched to ignored GT are
  dropped from the curve, unmatched detections outside the range likewise.
  Precision-recall is accumulated dataset-wide per (category, threshold)
  and integrated at 101 recall points; AP averages over thresholds then
  categories that have ground truth. With no ground truth in range the
  split is undefined and reported as None.
* AR: at each threshold, pairs are matched one-to-one greedily by
  descending IoU (ties: lower prediction index, then lower GT index);
  recall pools matched GT over the dataset. AR averages the thresholds.
* mIoU: mean over every GT instance of the best IoU any same-image
  prediction achieves on it (0 when the image has no predictions).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .backends import SceneAnnotation
from .mask import BinaryMask, RleMask, decode_rle, iou
from .pipeline import ImageRun, provenance_from_json

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_SAMPLES = 101
AREA_RANGES = {
    "all": (0, float("inf")),
    "small": (0, 32**2),
    "medium": (32**2, 96**2),
    "large": (96**2, float("inf")),
}


class MissingCategory(ValueError):
    """Category-less predictions were passed to the detector-based track."""


@dataclass(frozen=True)
class PredictedMask:
    mask: BinaryMask
    score: float
    category_id: int | None = None
    provenance: str | None = None


@dataclass
class EvalReport:
    ap: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar: float | None
    miou: float | None
    seconds_per_image: float
    calls_per_image: float
    images_evaluated: int
    images_skipped: int

    def __post_init__(self):
        for name in ("ap", "ap_small", "ap_medium", "ap_large", "ar", "miou"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.images_evaluated < 0 or self.images_skipped < 0:
            raise ValueError("image counts must be non-negative")

    def to_json(self) -> dict:
        return {
            "ap": self.ap,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "ar": self.ar,
            "miou": self.miou,
            "seconds_per_image": self.seconds_per_image,
            "calls_per_image": self.calls_per_image,
            "images_evaluated": self.images_evaluated,
            "images_skipped": self.images_skipped,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if not k.startswith("_")})


@dataclass(frozen=True)
class ApSummary:
    ap: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None


Predictions = Mapping[str, list[PredictedMask]]
GroundTruth = Mapping[str, SceneAnnotation]


def _check_ids(predictions: Predictions, gts: GroundTruth) -> None:
    unknown = set(predictions) - set(gts)
    if unknown:
        raise ValueError(f"predictions reference unknown image ids: {sorted(unknown)}")


def _iou_matrix(preds: list[PredictedMask], scene: SceneAnnotation) -> np.ndarray:
    matrix = np.zeros((len(preds), len(scene.instances)))
    for i, pred in enumerate(preds):
        for j, inst in enumerate(scene.instances):
            matrix[i, j] = iou(pred.mask, inst.mask)
    return matrix


# --- detector-based track (COCO-style AP) -----------------------------------

def eval_ap(
    predictions: Predictions,
    gts: GroundTruth,
    iou_thresholds: Iterable[float] = IOU_THRESHOLDS,
) -> ApSummary:
    """COCO-style mask AP over {0.50..0.95} with small/medium/large splits."""
    _check_ids(predictions, gts)
    image_ids = sorted(gts, key=str)
    for image_id in image_ids:
        for pred in predictions.get(image_id, []):
            if pred.category_id is None:
                raise MissingCategory(
                    f"prediction without category_id on image {image_id!r}; "
                    "use the class-agnostic track for untagged masks"
                )

    thresholds = list(iou_thresholds)
    categories = sorted({inst.category_id for s in gts.values() for inst in s.instances})
    per_image = {}
    for image_id in image_ids:
        scene = gts[image_id]
        preds = predictions.get(image_id, [])
        per_image[image_id] = (preds, scene, _iou_matrix(preds, scene))

    values = {name: [] for name in AREA_RANGES}
    for category in categories:
        for range_name, area_range in AREA_RANGES.items():
            accum = {t: [] for t in thresholds}  # (score, is_tp) per threshold
            n_positive = 0
            for image_id in image_ids:
                preds, scene, matrix = per_image[image_id]
                det_idx = [i for i, p in enumerate(preds) if p.category_id == category]
                det_idx.sort(key=lambda i: (-preds[i].score, i))
                gt_idx = [j for j, inst in enumerate(scene.instances) if inst.category_id == category]
                gt_ignored = {
                    j: not (area_range[0] <= scene.instances[j].mask.area() < area_range[1])
                    for j in gt_idx
                }
                n_positive += sum(1 for j in gt_idx if not gt_ignored[j])
                for t in thresholds:
                    matched: set[int] = set()
                    for i in det_idx:
                        best = _best_gt(matrix, i, gt_idx, matched, gt_ignored, t, ignored=False)
                        if best is not None:
                            matched.add(best)
                            accum[t].append((preds[i].score, True))
                            continue
                        ignored_match = _best_gt(matrix, i, gt_idx, matched, gt_ignored, t, ignored=True)
                        if ignored_match is not None:
                            matched.add(ignored_match)
                            continue  # consumed an out-of-range GT: drop silently
                        area = preds[i].mask.area()
                        if area_range[0] <= area < area_range[1]:
                            accum[t].append((preds[i].score, False))
            if n_positive == 0:
                continue
            for t in thresholds:
                values[range_name].append(_interpolated_ap(accum[t], n_positive))

    def summarize(name):
        return float(np.mean(values[name])) if values[name] else None

    return ApSummary(
        ap=summarize("all"),
        ap_small=summarize("small"),
        ap_medium=summarize("medium"),
        ap_large=summarize("large"),
    )


def _best_gt(matrix, det, gt_idx, matched, gt_ignored, threshold, ignored):
    best = None
    best_iou = 0.0
    for j in gt_idx:
        if j in matched or gt_ignored[j] != ignored:
            continue
        value = matrix[det, j]
        if value >= threshold and value > best_iou:
            best, best_iou = j, value
    return best


def _interpolated_ap(scored_flags: list[tuple[float, bool]], n_positive: int) -> float:
    """101-point interpolated area under the dataset-wide PR curve."""
    if not scored_flags:
        return 0.0
    order = sorted(range(len(scored_flags)), key=lambda i: (-scored_flags[i][0], i))
    tp = 0
    fp = 0
    precisions = []
    recalls = []
    for i in order:
        if scored_flags[i][1]:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_positive)
    for i in range(len(precisions) - 2, -1, -1):  # monotone envelope from the right
        precisions[i] = max(precisions[i], precisions[i + 1])
    samples = []
    for k in range(RECALL_SAMPLES):
        r = k / (RECALL_SAMPLES - 1)
        idx = np.searchsorted(recalls, r, side="left")
        samples.append(precisions[idx] if idx < len(precisions) else 0.0)
    return float(np.mean(samples))


# --- class-agnostic track (AR / mIoU) ----------------------------------------

def eval_class_agnostic(
    predictions: Predictions,
    gts: GroundTruth,
    iou_thresholds: Iterable[float] = IOU_THRESHOLDS,
    miou_matched_only: bool = False,
) -> tuple[float, float]:
    """(AR, mIoU) ignoring categories.

    ``miou_matched_only`` switches to the alternative mIoU that averages
    only over GT instances whose best IoU clears 0.5 (mask-comparability
    variant); the default averages over every GT instance.
    """
    _check_ids(predictions, gts)
    image_ids = sorted(gts, key=str)
    thresholds = list(iou_thresholds)

    total_gt = 0
    best_ious: list[float] = []
    matched_at = {t: 0 for t in thresholds}
    for image_id in image_ids:
        scene = gts[image_id]
        preds = predictions.get(image_id, [])
        matrix = _iou_matrix(preds, scene)
        total_gt += len(scene.instances)
        if len(scene.instances) == 0:
            continue
        if len(preds) == 0:
            best_ious.extend([0.0] * len(scene.instances))
            continue
        best_ious.extend(matrix.max(axis=0).tolist())
        pairs = sorted(
            ((i, j) for i in range(len(preds)) for j in range(len(scene.instances))),
            key=lambda p: (-matrix[p], p[0], p[1]),
        )
        for t in thresholds:
            used_p: set[int] = set()
            used_g: set[int] = set()
            for i, j in pairs:
                if matrix[i, j] < t:
                    break  # sorted descending: nothing below can match
                if i in used_p or j in used_g:
                    continue
                used_p.add(i)
                used_g.add(j)
            matched_at[t] += len(used_g)

    if total_gt == 0:
        return 0.0, 0.0
    ar = float(np.mean([matched_at[t] / total_gt for t in thresholds]))
    if miou_matched_only:
        comparable = [v for v in best_ious if v >= 0.5]
        miou = float(np.mean(comparable)) if comparable else 0.0
    else:
        miou = float(np.mean(best_ious))
    return ar, miou


# --- aggregation --------------------------------------------------------------

def predictions_from_runs(results: Iterable[ImageRun]) -> dict[str, list[PredictedMask]]:
    out: dict[str, list[PredictedMask]] = {}
    for run in results:
        out[run.image_id] = [
            PredictedMask(
                mask=entry.mask,
                score=entry.score,
                category_id=entry.category_id,
                provenance=entry.provenance,
            )
            for entry in run.collection.entries
        ]
    return out


def aggregate_report(
    results: list[ImageRun],
    gts: GroundTruth,
    skipped: int = 0,
) -> EvalReport:
    """Evaluate a batch: both tracks when applicable, plus cost means.

    The detector-based track runs on the category-tagged subset of the
    predictions (the paper's split: box-derived masks carry categories,
    point-derived ones do not); it is reported as null when nothing is
    tagged. Cost fields average over evaluated images only.
    """
    predictions = predictions_from_runs(results)
    eval_gts = {image_id: gts[image_id] for image_id in predictions}

    ar, miou = eval_class_agnostic(predictions, eval_gts)
    tagged = {
        image_id: [p for p in preds if p.category_id is not None]
        for image_id, preds in predictions.items()
    }
    if any(tagged.values()):
        summary = eval_ap(tagged, eval_gts)
    else:
        summary = ApSummary(ap=None, ap_small=None, ap_medium=None, ap_large=None)

    n = len(results)
    return EvalReport(
        ap=summary.ap,
        ap_small=summary.ap_small,
        ap_medium=summary.ap_medium,
        ap_large=summary.ap_large,
        ar=ar,
        miou=miou,
        seconds_per_image=float(np.mean([r.stats.wall_time for r in results])) if n else 0.0,
        calls_per_image=float(np.mean([r.stats.segmenter_calls for r in results])) if n else 0.0,
        images_evaluated=n,
        images_skipped=skipped,
    )


# --- prediction file ingestion -------------------------------------------------

def load_predictions(path: str | Path) -> dict[str, list[PredictedMask]]:
    """Read pipeline JSON-lines predictions back into evaluator inputs."""
    out: dict[str, list[PredictedMask]] = {}
    with open(path) as handle:
        for line in handle:
            if not line.strip():
                continue
            rec = json.loads(line)
            mask = decode_rle(RleMask.from_coco(rec["rle"]))
            category = rec.get("category_id")
            out.setdefault(str(rec["image_id"]), []).append(
                PredictedMask(
                    mask=mask,
                    score=float(rec["score"]),
                    category_id=None if category is None else int(category),
                    provenance=provenance_from_json(rec.get("provenance", "")),
                )
            )
    return out
