import json

import numpy as np
import pytest

from promptplan.backends import (
    BackendStats,
    Instance,
    OracleDetector,
    OracleSegmenter,
    SceneAnnotation,
    SegmentResult,
    oracle_detect,
    oracle_segment_box,
    synth_scene,
)
from promptplan.mask import BinaryMask, Box, bbox_of
from promptplan.pipeline import (
    PROV_BOX,
    PROV_SPARSE,
    ImageRun,
    MaskCollection,
    MaskEntry,
    PipelineConfig,
    coverage_of,
    iou_nms,
    prediction_records,
    run_batch,
    run_boxes_only,
    run_hierarchical,
    run_hybrid,
    run_scene,
)
from promptplan.prompts import BoxPrompt, GridSpec


def rect_mask(width, height, x0, y0, x1, y1):
    bits = np.zeros((height, width), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return BinaryMask(bits)


def entry(mask, score, provenance=PROV_SPARSE, category_id=None):
    return MaskEntry(result=SegmentResult(mask=mask, score=score),
                     provenance=provenance, category_id=category_id)


# Reference NMS: same greedy contract, naive per-pixel IoU, plain loops.
_RANK = {"box_prompt": 0, "point_prompt_round1": 1, "point_prompt_round2": 2, "sparse_point": 3}


def naive_pixel_iou(a, b):
    inter = int(np.count_nonzero(np.asarray(a.bits) & np.asarray(b.bits)))
    union = int(np.count_nonzero(np.asarray(a.bits) | np.asarray(b.bits)))
    return 0.0 if union == 0 else inter / union


def reference_nms(entries, threshold):
    order = sorted(range(len(entries)),
                   key=lambda i: (-entries[i].score, _RANK[entries[i].provenance], i))
    kept = []
    for i in order:
        if all(naive_pixel_iou(entries[i].mask, entries[j].mask) <= threshold for j in kept):
            kept.append(i)
    return [entries[i] for i in kept]


class TestIouNms:
    def test_identical_masks_keep_higher_score(self):
        m = rect_mask(20, 20, 2, 2, 10, 10)
        col = MaskCollection(entries=[entry(m, 0.8), entry(m.copy(), 0.9)])
        out = iou_nms(col, 0.7)
        assert len(out) == 1
        assert out.entries[0].score == 0.9

    def test_disjoint_masks_all_survive(self):
        entries = [entry(rect_mask(30, 30, 10 * i, 0, 10 * i + 8, 8), 0.5) for i in range(3)]
        out = iou_nms(MaskCollection(entries=entries), 0.0)
        assert len(out) == 3

    def test_box_provenance_wins_score_ties(self):
        m = rect_mask(20, 20, 0, 0, 10, 10)
        col = MaskCollection(entries=[
            entry(m, 0.9, provenance=PROV_SPARSE),
            entry(m.copy(), 0.9, provenance=PROV_BOX, category_id=4),
        ])
        out = iou_nms(col, 0.7)
        assert len(out) == 1
        assert out.entries[0].provenance == PROV_BOX

    def test_matches_bruteforce_reference(self):
        rng = np.random.default_rng(61)
        provenances = list(_RANK)
        for _ in range(40):
            n = int(rng.integers(0, 20))
            entries = []
            for _ in range(n):
                x0 = int(rng.integers(0, 40))
                y0 = int(rng.integers(0, 40))
                m = rect_mask(48, 48, x0, y0,
                              x0 + int(rng.integers(1, 12)), y0 + int(rng.integers(1, 12)))
                entries.append(entry(m, round(float(rng.random()), 2),
                                     provenance=provenances[int(rng.integers(0, 4))]))
            threshold = float(rng.choice([0.0, 0.3, 0.5, 0.7, 0.9]))
            ours = iou_nms(MaskCollection(entries=entries), threshold).entries
            theirs = reference_nms(entries, threshold)
            assert [id(e) for e in ours] == [id(e) for e in theirs]

    def test_post_nms_invariant(self):
        rng = np.random.default_rng(67)
        entries = []
        for _ in range(30):
            x0, y0 = int(rng.integers(0, 30)), int(rng.integers(0, 30))
            entries.append(entry(rect_mask(40, 40, x0, y0, x0 + 10, y0 + 10), float(rng.random())))
        out = iou_nms(MaskCollection(entries=entries), 0.5)
        assert out.max_pairwise_iou() <= 0.5


class TestCoverage:
    def test_empty_collection(self):
        assert coverage_of(MaskCollection(), 10, 10).area() == 0

    def test_full_frame_member(self):
        col = MaskCollection(entries=[entry(BinaryMask.full(10, 10), 1.0)])
        assert coverage_of(col, 10, 10) == BinaryMask.full(10, 10)

    def test_matches_bruteforce_or(self):
        rng = np.random.default_rng(71)
        masks = [BinaryMask(rng.random((15, 15)) < 0.3) for _ in range(5)]
        col = MaskCollection(entries=[entry(m, 0.5) for m in masks])
        expected = np.zeros((15, 15), dtype=bool)
        for m in masks:
            expected |= np.asarray(m.bits)
        assert coverage_of(col, 15, 15) == BinaryMask(expected)


@pytest.fixture
def scene():
    return synth_scene(192, 192, 9, seed=33, image_id="pipeline")


class TestBoxesOnly:
    def test_perfect_oracle_reproduces_instances(self, scene):
        config = PipelineConfig(mode="boxes_only")
        collection, stats = run_boxes_only(scene, OracleDetector(1.0, 0), OracleSegmenter(), config)
        assert stats.segmenter_calls == len(scene.instances)
        assert stats.detector_calls == 1
        assert len(collection) == len(scene.instances)
        produced = {id(e.mask): e for e in collection}
        for inst in scene.instances:
            assert any(e.mask == inst.mask and e.category_id == inst.category_id
                       for e in collection.entries)

    def test_zero_detections(self, scene):
        config = PipelineConfig(mode="boxes_only")
        collection, stats = run_boxes_only(scene, OracleDetector(0.0, 0), OracleSegmenter(), config)
        assert len(collection) == 0
        assert stats.segmenter_calls == 0

    def test_duplicate_boxes_collapse_to_one(self, scene):
        class DoubleDetector:
            def detect(self, s):
                dets = oracle_detect(s, 1.0, 0)[:1]
                return dets + dets

        config = PipelineConfig(mode="boxes_only")
        collection, stats = run_boxes_only(scene, DoubleDetector(), OracleSegmenter(), config)
        assert stats.segmenter_calls == 2
        assert len(collection) == 1


class TestHybrid:
    def test_no_detections_background_recovers_frame(self):
        empty = SceneAnnotation(image_id="blank", width=128, height=128, instances=[])
        config = PipelineConfig(mode="hybrid")
        collection, stats = run_hybrid(empty, OracleDetector(0.0, 0), OracleSegmenter(), config)
        n_sparse = config.sparse_grid.points_per_side**2
        assert stats.segmenter_calls == n_sparse
        assert collection.prompt_counts == {"box": 0, "sparse": n_sparse}
        cov = coverage_of(collection, 128, 128)
        assert cov.area() / (128 * 128) >= 0.99

    def test_full_coverage_degenerates_to_boxes_only(self):
        # four instances tile the frame exactly -> nothing left uncovered
        quads = [
            rect_mask(64, 64, 0, 0, 32, 32),
            rect_mask(64, 64, 32, 0, 64, 32),
            rect_mask(64, 64, 0, 32, 32, 64),
            rect_mask(64, 64, 32, 32, 64, 64),
        ]
        scene = SceneAnnotation(
            image_id="tiled", width=64, height=64,
            instances=[Instance(mask=m, category_id=i + 1) for i, m in enumerate(quads)],
        )
        config = PipelineConfig(mode="hybrid")
        hybrid, h_stats = run_hybrid(scene, OracleDetector(1.0, 5), OracleSegmenter(), config)
        boxes, b_stats = run_boxes_only(scene, OracleDetector(1.0, 5), OracleSegmenter(),
                                        PipelineConfig(mode="boxes_only"))
        assert hybrid.prompt_counts["sparse"] == 0
        assert h_stats.segmenter_calls == b_stats.segmenter_calls
        assert [e.mask for e in hybrid.entries] == [e.mask for e in boxes.entries]

    def test_missed_instances_recovered_by_sparse_points(self, scene):
        recall = 0.6
        config = PipelineConfig(mode="hybrid")
        detector = OracleDetector(recall, seed=7)
        hybrid, _ = run_hybrid(scene, detector, OracleSegmenter(), config)
        boxes, _ = run_boxes_only(scene, detector, OracleSegmenter(),
                                  PipelineConfig(mode="boxes_only"))

        def exact_matches(collection):
            return sum(
                1 for inst in scene.instances
                if any(e.mask == inst.mask for e in collection.entries)
            )

        detected = len(detector.detect(scene))
        assert detected < len(scene.instances), "fixture must have misses"
        assert exact_matches(boxes) == detected
        assert exact_matches(hybrid) > exact_matches(boxes)

    def test_call_accounting(self, scene):
        config = PipelineConfig(mode="hybrid")
        collection, stats = run_hybrid(scene, OracleDetector(0.5, 3), OracleSegmenter(), config)
        assert stats.segmenter_calls == collection.prompt_counts["box"] + collection.prompt_counts["sparse"]


class TestHierarchical:
    def test_round1_issues_coarse_squared_calls(self, scene):
        config = PipelineConfig(mode="hierarchical")
        collection, stats = run_hierarchical(scene, OracleSegmenter(), config)
        assert collection.prompt_counts["round1"] == 64
        assert stats.segmenter_calls == 64 + collection.prompt_counts["round2"]

    def test_full_high_conf_coverage_skips_round2(self):
        class ConfidentFullFrame:
            def segment_point(self, image, prompt):
                return SegmentResult(mask=BinaryMask.full(image.width, image.height), score=0.95)

        scene = SceneAnnotation(image_id="one", width=48, height=48, instances=[])
        config = PipelineConfig(mode="hierarchical")
        collection, stats = run_hierarchical(scene, ConfidentFullFrame(), config)
        assert collection.prompt_counts["round2"] == 0
        assert stats.segmenter_calls == 64
        assert len(collection) == 1

    def test_no_confident_masks_triggers_full_dense_grid(self):
        # background-only scene: every oracle answer scores 0.8 < 0.88
        scene = SceneAnnotation(image_id="bg", width=96, height=96, instances=[])
        config = PipelineConfig(mode="hierarchical")
        collection, stats = run_hierarchical(scene, OracleSegmenter(), config)
        assert collection.prompt_counts == {"round1": 64, "round2": 1024}
        assert stats.segmenter_calls == 64 + 1024

    def test_low_confidence_round1_masks_are_dropped(self, scene):
        config = PipelineConfig(mode="hierarchical")
        collection, _ = run_hierarchical(scene, OracleSegmenter(), config)
        assert all(e.score >= config.high_conf_threshold or e.provenance == "point_prompt_round2"
                   for e in collection.entries)


class TestRunScene:
    def test_dispatch(self, scene):
        for mode in ("boxes_only", "hybrid", "hierarchical"):
            config = PipelineConfig(mode=mode)
            collection, stats = run_scene(scene, OracleDetector(1.0, 0), OracleSegmenter(), config)
            assert stats.segmenter_calls == collection.prompts_issued()

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError):
            PipelineConfig(mode="dense")

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(nms_iou_threshold=1.2)


class TestDeterminism:
    def test_identical_runs_serialize_identically(self, scene):
        config = PipelineConfig(mode="hybrid")

        def one_run():
            collection, _ = run_hybrid(scene, OracleDetector(0.6, 9), OracleSegmenter(), config)
            run = ImageRun(image_id="pipeline", collection=collection, stats=BackendStats())
            return json.dumps(prediction_records(run), sort_keys=True)

        assert one_run() == one_run()

    def test_post_nms_invariant_on_real_run(self, scene):
        config = PipelineConfig(mode="hybrid")
        collection, _ = run_hybrid(scene, OracleDetector(0.6, 9), OracleSegmenter(), config)
        assert collection.max_pairwise_iou() <= config.nms_iou_threshold


class TestRunBatch:
    def test_order_preserved_and_parallel_equal(self):
        scenes = [synth_scene(96, 96, 4, seed=i, image_id=f"b{i}") for i in range(6)]
        config = PipelineConfig(mode="hybrid")

        def factory():
            return OracleDetector(0.7, 11), OracleSegmenter()

        serial, skipped_s = run_batch(scenes, config, factory, jobs=1)
        parallel, skipped_p = run_batch(scenes, config, factory, jobs=4)
        assert skipped_s == [] and skipped_p == []
        assert [r.image_id for r in serial] == [f"b{i}" for i in range(6)]
        for a, b in zip(serial, parallel):
            assert prediction_records(a) == prediction_records(b)

    def test_failed_image_is_skipped_not_fatal(self):
        from promptplan.protocol import BackendUnavailable

        scenes = [synth_scene(64, 64, 2, seed=i, image_id=f"f{i}") for i in range(3)]

        class FlakySegmenter(OracleSegmenter):
            def segment_box(self, scene, prompt):
                if scene.image_id == "f1":
                    raise BackendUnavailable("injected outage")
                return super().segment_box(scene, prompt)

        def factory():
            return OracleDetector(1.0, 0), FlakySegmenter()

        results, skipped = run_batch(scenes, PipelineConfig(mode="boxes_only"), factory)
        assert [r.image_id for r in results] == ["f0", "f2"]
        assert len(skipped) == 1 and skipped[0].image_id == "f1"
        assert "outage" in skipped[0].reason
