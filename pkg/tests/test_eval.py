import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgeped.detect import BBox, Detection
from edgeped.evaluate import (
    EvalInputError,
    GroundTruthSet,
    average_precision,
    evaluate,
    load_ground_truth,
    match_detections,
    mean_average_precision,
)
from oracles import ap_oracle, match_oracle


def det(x1, y1, x2, y2, conf, cid=0):
    return Detection(BBox.from_corners(x1, y1, x2, y2), cid, conf)


def gt_set(entries):
    gts = GroundTruthSet()
    for image_id, (x1, y1, x2, y2), cid in entries:
        gts.add(image_id, BBox.from_corners(x1, y1, x2, y2), cid)
    return gts


class TestMatching:
    def test_perfect_detections_all_tp(self):
        gts = gt_set([("a", (0, 0, 10, 10), 0), ("a", (20, 20, 30, 30), 0)])
        dets = {"a": [det(0, 0, 10, 10, 0.9), det(20, 20, 30, 30, 0.8)]}
        flags = match_detections(dets, gts)
        assert flags == [(0.9, True), (0.8, True)]

    def test_no_ground_truth_all_fp(self):
        gts = GroundTruthSet(boxes={"a": []})
        flags = match_detections({"a": [det(0, 0, 5, 5, 0.7)]}, gts)
        assert flags == [(0.7, False)]

    def test_unknown_image_rejected(self):
        gts = gt_set([("a", (0, 0, 10, 10), 0)])
        with pytest.raises(EvalInputError):
            match_detections({"b": [det(0, 0, 5, 5, 0.7)]}, gts)

    def test_ground_truth_consumed_once(self):
        gts = gt_set([("a", (0, 0, 10, 10), 0)])
        dets = {"a": [det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]}
        flags = match_detections(dets, gts)
        assert flags == [(0.9, True), (0.8, False)]

    def test_best_iou_wins(self):
        gts = gt_set([("a", (0, 0, 10, 10), 0), ("a", (2, 0, 12, 10), 0)])
        # One detection overlapping both; must consume the better-IoU one.
        dets = {"a": [det(2, 0, 12, 10, 0.9), det(0, 0, 10, 10, 0.8)]}
        flags = match_detections(dets, gts)
        assert flags == [(0.9, True), (0.8, True)]

    def test_crafted_vs_exhaustive_oracle(self):
        rng = np.random.default_rng(33)
        for _ in range(30):
            images = ["a", "b"]
            gt_entries = []
            det_map = {img: [] for img in images}
            oracle_gts = {img: [] for img in images}
            oracle_dets = {img: [] for img in images}
            for img in images:
                for _ in range(rng.integers(0, 3)):
                    x1, y1 = rng.uniform(0, 50, 2)
                    w, h = rng.uniform(5, 30, 2)
                    gt_entries.append((img, (x1, y1, x1 + w, y1 + h), 0))
                    oracle_gts[img].append(((x1, y1, x1 + w, y1 + h), 0))
                for _ in range(rng.integers(0, 4)):
                    x1, y1 = rng.uniform(0, 50, 2)
                    w, h = rng.uniform(5, 30, 2)
                    conf = float(rng.random())
                    det_map[img].append(det(x1, y1, x1 + w, y1 + h, conf))
                    oracle_dets[img].append(((x1, y1, x1 + w, y1 + h), 0, conf))
            gts = gt_set(gt_entries)
            got = match_detections(det_map, gts)
            want = match_oracle(oracle_dets, oracle_gts, 0.5)
            assert [(round(c, 9), f) for c, f in got] == [
                (round(c, 9), f) for c, f in want
            ]

    def test_never_two_detections_one_gt(self):
        gts = gt_set([("a", (0, 0, 10, 10), 0)])
        dets = {"a": [det(0, 0, 10, 10, c) for c in (0.9, 0.8, 0.7)]}
        flags = match_detections(dets, gts)
        assert sum(1 for _, tp in flags if tp) == 1


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([(0.9, True)], total_gt=1) == 1.0

    def test_single_fp(self):
        assert average_precision([(0.9, False)], total_gt=1) == 0.0

    def test_tp_fp_tp_case(self):
        # PR points (0.5, 1.0), (0.5, 0.5), (1.0, 2/3); envelope area
        # = 0.5 * 1.0 + 0.5 * 2/3.
        flags = [(0.9, True), (0.8, False), (0.7, True)]
        expected = 0.5 * 1.0 + 0.5 * (2 / 3)
        assert abs(average_precision(flags, 2) - expected) < 1e-12

    def test_zero_gt_zero_dets(self):
        assert average_precision([], 0) == 0.0

    def test_negative_gt_rejected(self):
        with pytest.raises(ValueError):
            average_precision([], -1)

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=12),
           st.integers(0, 10))
    def test_bounded_and_matches_oracle(self, raw_flags, extra_gt):
        flags = sorted(raw_flags, key=lambda t: -t[0])
        total_gt = sum(1 for _, tp in flags if tp) + extra_gt
        ap = average_precision(flags, total_gt)
        assert 0.0 <= ap <= 1.0
        assert abs(ap - ap_oracle(flags, total_gt)) < 1e-12

    def test_appending_lowest_fp_never_increases(self):
        flags = [(0.9, True), (0.6, True)]
        base = average_precision(flags, 3)
        worse = average_precision(flags + [(0.1, False)], 3)
        assert worse <= base

    def test_appending_tp_never_decreases(self):
        flags = [(0.9, True), (0.6, False)]
        base = average_precision(flags, 3)
        better = average_precision(flags + [(0.1, True)], 3)
        assert better >= base


class TestMeanAP:
    def test_single_class_pass_through(self):
        assert mean_average_precision({0: 0.78}) == 0.78

    def test_two_classes(self):
        assert mean_average_precision({0: 1.0, 1: 0.0}) == 0.5

    def test_random_mean(self):
        rng = np.random.default_rng(1)
        aps = {i: float(rng.random()) for i in range(7)}
        assert abs(mean_average_precision(aps) - sum(aps.values()) / 7) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_average_precision({})


class TestEvaluateReport:
    def test_report_fields(self):
        gts = gt_set([("a", (0, 0, 10, 10), 0)])
        report = evaluate({"a": [det(0, 0, 10, 10, 0.9)]}, gts)
        assert report["map"] == 1.0
        assert report["tp"] == 1
        assert report["fp"] == 0
        assert report["total_gt"] == 1
        assert report["per_class_ap"] == {"0": 1.0}

    def test_permuting_images_invariant(self):
        gts = gt_set(
            [("a", (0, 0, 10, 10), 0), ("b", (5, 5, 15, 15), 0), ("b", (30, 30, 40, 40), 0)]
        )
        dets = {
            "a": [det(0, 0, 10, 10, 0.6)],
            "b": [det(5, 5, 15, 15, 0.9), det(100, 100, 110, 110, 0.7)],
        }
        r1 = evaluate(dets, gts)
        r2 = evaluate(dict(reversed(list(dets.items()))), gts)
        assert r1 == r2

    def test_ground_truth_file_round_trip(self, tmp_path):
        payload = {
            "img1": [{"x1": 0, "y1": 0, "x2": 10, "y2": 10, "class": 0}],
            "img2": [],
        }
        path = tmp_path / "gt.json"
        path.write_text(json.dumps(payload))
        gts = load_ground_truth(str(path))
        assert gts.total() == 1
        assert gts.class_ids() == [0]
        assert set(gts.boxes) == {"img1", "img2"}
