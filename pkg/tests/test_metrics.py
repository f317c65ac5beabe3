"""IoU corner cases and hand-computed average-precision values."""

import random

import numpy as np
import pytest

from evdistill.metrics import Detection, evaluate_map, iou


class TestIou:
    def test_identical_boxes(self):
        assert iou((5, 5, 4, 4), (5, 5, 4, 4)) == 1.0

    def test_disjoint_boxes(self):
        assert iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0

    def test_corner_overlap_is_one_seventh(self):
        # corners (0,0,2,2) and (1,1,3,3): areas 4+4, overlap 1 -> 1/7
        a = (1.0, 1.0, 2.0, 2.0)
        b = (2.0, 2.0, 2.0, 2.0)
        assert iou(a, b) == 1.0 / 7.0

    def test_touching_boxes_have_zero_iou(self):
        assert iou((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0

    def test_contained_box(self):
        assert iou((5, 5, 10, 10), (5, 5, 5, 5)) == 0.25


def det(box, cat=0, score=0.9):
    return Detection(tuple(float(v) for v in box), cat, score)


def gt(*boxes, cats=None):
    boxes = np.asarray(boxes, float).reshape(-1, 4)
    if cats is None:
        cats = np.zeros(len(boxes), int)
    return boxes, np.asarray(cats, int)


class TestEvaluateMap:
    def test_perfect_detections(self):
        ground = {0: gt((10, 10, 4, 4)), 1: gt((20, 20, 6, 6))}
        dets = {0: [det((10, 10, 4, 4))], 1: [det((20, 20, 6, 6))]}
        res = evaluate_map(dets, ground)
        assert res.map == res.ap50 == res.ap75 == 1.0

    def test_zero_detections(self):
        ground = {0: gt((10, 10, 4, 4))}
        res = evaluate_map({0: []}, ground)
        assert res.map == res.ap50 == res.ap75 == 0.0

    def test_three_samples_one_false_positive(self):
        # ranked: TP(0.9), TP(0.8), FP(0.7), TP(0.6); PR envelope = 1 up to
        # recall 2/3 then 3/4, so AP = (67 + 34 * 0.75) / 101 at every
        # threshold (all matches are exact overlaps)
        ground = {
            0: gt((10, 10, 4, 4)),
            1: gt((20, 20, 6, 6)),
            2: gt((30, 30, 8, 8)),
        }
        dets = {
            0: [det((10, 10, 4, 4), score=0.9)],
            1: [det((20, 20, 6, 6), score=0.8), det((40, 40, 6, 6), score=0.7)],
            2: [det((30, 30, 8, 8), score=0.6)],
        }
        expected = (67 * 1.0 + 34 * 0.75) / 101
        res = evaluate_map(dets, ground)
        assert res.map == pytest.approx(expected, abs=1e-12)
        assert res.ap50 == pytest.approx(expected, abs=1e-12)
        assert res.ap75 == pytest.approx(expected, abs=1e-12)

    def test_threshold_sweep_partial_overlap(self):
        # det IoU with gt is 0.57: counts at thresholds .50/.55, misses above
        ground = {0: gt((5, 5, 10, 10))}
        overlap_box = (5, 5 - (10 - 5.7) / 2, 10, 5.7)
        res = evaluate_map({0: [det(overlap_box)]}, ground)
        assert iou(overlap_box, (5, 5, 10, 10)) == pytest.approx(0.57, abs=1e-12)
        assert res.ap50 == 1.0
        assert res.ap75 == 0.0
        assert res.map == pytest.approx(0.2, abs=1e-12)

    def test_categories_averaged(self):
        ground = {0: gt((10, 10, 4, 4), (30, 30, 4, 4), cats=[0, 1])}
        dets = {0: [det((10, 10, 4, 4), cat=0)]}  # category 1 undetected
        res = evaluate_map(dets, ground)
        assert res.map == pytest.approx(0.5)
        assert res.per_category[0][0] == 1.0
        assert res.per_category[1][0] == 0.0

    def test_duplicate_detection_is_false_positive(self):
        ground = {0: gt((10, 10, 4, 4))}
        dets = {0: [det((10, 10, 4, 4), score=0.9), det((10, 10, 4, 4), score=0.8)]}
        res = evaluate_map(dets, ground)
        # second duplicate cannot claim the matched gt: precision drops beyond r=1
        assert res.ap50 == 1.0  # envelope is still 1 at every recall level

    def test_empty_ground_truth_errors(self):
        with pytest.raises(ValueError, match="undefined"):
            evaluate_map({0: []}, {0: gt()})

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        ground, dets = {}, {}
        for sid in range(6):
            boxes = np.column_stack(
                [
                    rng.uniform(10, 50, 3),
                    rng.uniform(10, 50, 3),
                    rng.uniform(4, 12, 3),
                    rng.uniform(4, 12, 3),
                ]
            )
            ground[sid] = (boxes, rng.integers(0, 2, 3))
            dets[sid] = [
                det(b + rng.normal(0, 1.5, 4), cat=int(c), score=float(rng.uniform(0.1, 1)))
                for b, c in zip(boxes, ground[sid][1])
            ]
        ref = evaluate_map(dets, ground)
        shuffled = {sid: list(ds) for sid, ds in dets.items()}
        random.Random(3).shuffle(list(shuffled.values()))
        again = evaluate_map(dict(reversed(list(shuffled.items()))), ground)
        assert again == ref
