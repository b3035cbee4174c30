import numpy as np
import pytest

from promptplan.backends import Detection
from promptplan.mask import BinaryMask, Box
from promptplan.prompts import (
    BoxPrompt,
    GridSpec,
    boxes_from_detections,
    full_grid,
    is_covered,
    point_pixel,
    uncovered_grid,
)


class TestFullGrid:
    def test_paper_densities(self):
        assert len(full_grid(GridSpec(8), 640, 480)) == 64
        assert len(full_grid(GridSpec(32), 640, 480)) == 1024

    def test_single_point_is_center(self):
        pts = full_grid(GridSpec(1), 100, 100)
        assert len(pts) == 1
        assert (pts[0].x, pts[0].y) == (50.0, 50.0)

    def test_cell_centers_and_row_major_order(self):
        pts = full_grid(GridSpec(2), 8, 4)
        assert [(p.x, p.y) for p in pts] == [
            (2.0, 1.0),
            (6.0, 1.0),
            (2.0, 3.0),
            (6.0, 3.0),
        ]

    def test_points_inside_bounds(self):
        for n, w, h in [(3, 7, 5), (16, 160, 90), (5, 1, 1)]:
            for p in full_grid(GridSpec(n), w, h):
                assert 0 <= p.x < w and 0 <= p.y < h

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            GridSpec(0)


class TestUncoveredGrid:
    def test_empty_coverage_equals_full_grid(self):
        cov = BinaryMask.zeros(160, 160)
        assert uncovered_grid(GridSpec(16), cov) == full_grid(GridSpec(16), 160, 160)

    def test_full_coverage_is_empty(self):
        assert uncovered_grid(GridSpec(16), BinaryMask.full(64, 64)) == []

    def test_left_half_coverage(self):
        bits = np.zeros((160, 160), dtype=bool)
        bits[:, :80] = True
        pts = uncovered_grid(GridSpec(16), BinaryMask(bits))
        # 8 columns of 16 rows survive on the right half
        assert len(pts) == 128
        assert all(p.x >= 80 for p in pts)

    def test_partition_identity(self):
        rng = np.random.default_rng(41)
        spec = GridSpec(9)
        for _ in range(25):
            cov = BinaryMask(rng.random((37, 53)) < rng.random())
            grid = full_grid(spec, cov.width, cov.height)
            uncovered = uncovered_grid(spec, cov)
            covered = [p for p in grid if is_covered(p, cov)]
            assert len(uncovered) + len(covered) == spec.points_per_side**2

    def test_returned_points_hit_unset_pixels(self):
        rng = np.random.default_rng(43)
        cov = BinaryMask(rng.random((64, 64)) < 0.5)
        for p in uncovered_grid(GridSpec(12), cov):
            x, y = point_pixel(p)
            assert not cov.get(x, y)

    def test_ordering_preserved(self):
        rng = np.random.default_rng(47)
        cov = BinaryMask(rng.random((48, 48)) < 0.4)
        grid = full_grid(GridSpec(6), 48, 48)
        sparse = uncovered_grid(GridSpec(6), cov)
        positions = [grid.index(p) for p in sparse]
        assert positions == sorted(positions)


class TestBoxesFromDetections:
    def test_empty(self):
        assert boxes_from_detections([], 100, 100) == []

    def test_clamped_to_bounds(self):
        det = Detection(box=Box(-10, -10, 120, 50), category_id=1, score=0.9)
        (prompt,) = boxes_from_detections([det], 100, 100)
        assert prompt.box == Box(0, 0, 100, 50)
        assert prompt.category_id == 1

    def test_fully_outside_dropped(self):
        det = Detection(box=Box(200, 200, 300, 300), category_id=1, score=0.9)
        assert boxes_from_detections([det], 100, 100) == []

    def test_floor_filter_and_score_order(self):
        dets = [
            Detection(box=Box(0, 0, 10, 10), category_id=1, score=0.9),
            Detection(box=Box(10, 10, 20, 20), category_id=2, score=0.2),
            Detection(box=Box(20, 20, 30, 30), category_id=3, score=0.5),
        ]
        prompts = boxes_from_detections(dets, 100, 100, conf_floor=0.25)
        assert [p.score for p in prompts] == [0.9, 0.5]
        assert [p.category_id for p in prompts] == [1, 3]

    def test_ties_keep_input_order(self):
        dets = [
            Detection(box=Box(0, 0, 10, 10), category_id=1, score=0.5),
            Detection(box=Box(10, 0, 20, 10), category_id=2, score=0.5),
        ]
        prompts = boxes_from_detections(dets, 100, 100)
        assert [p.category_id for p in prompts] == [1, 2]
