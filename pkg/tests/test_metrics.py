import itertools

import numpy as np
import pytest

from patchlab.metrics import (compute_asr, compute_detection_metrics, iou_xyxy)


def optimal_match_count(gts, dets, iou_threshold=0.5):
    """Exhaustive bipartite-matching oracle: maximum number of one-to-one
    same-class matches with IoU >= threshold. Feasible for <= 10 objects."""
    edges = [[iou_xyxy(d["box"], g["box"]) >= iou_threshold
              and d["class_id"] == g["class_id"] for g in gts] for d in dets]

    best = 0
    n_g = len(gts)
    for assign in itertools.permutations(range(n_g), min(len(dets), n_g)):
        count = sum(1 for di, gi in enumerate(assign) if edges[di][gi])
        best = max(best, count)
    if len(dets) > n_g:
        # more detections than gt: try every det subset of size n_g
        for subset in itertools.combinations(range(len(dets)), n_g):
            for assign in itertools.permutations(range(n_g)):
                count = sum(1 for k, di in enumerate(subset) if edges[di][assign[k]])
                best = max(best, count)
    return best


def box(x, y, w, h):
    return (x, y, x + w, y + h)


def make_fixture(n_objects, n_matched, seed=0):
    """n_objects ground truths; the first n_matched get an aligned detection."""
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for i in range(n_objects):
        b = box(i * 0.1, i * 0.1, 0.08, 0.08)
        gts.append({"box": b, "class_id": i % 2})
        if i < n_matched:
            dets.append({"box": b, "class_id": i % 2,
                         "confidence": float(rng.uniform(0.5, 1.0))})
    return {"img": gts}, {"img": dets}


class TestComputeAsr:
    def test_all_detected(self):
        gt, det = make_fixture(10, 10)
        assert compute_asr(gt, det).asr == 0.0

    def test_none_detected(self):
        gt, det = make_fixture(10, 0)
        assert compute_asr(gt, det).asr == 1.0

    def test_partial_matches_optimal_oracle(self):
        gt, det = make_fixture(10, 4)
        res = compute_asr(gt, det)
        assert res.asr == pytest.approx(0.6)
        assert res.detected_objects == optimal_match_count(gt["img"], det["img"])

    def test_greedy_equals_optimal_on_small_fixtures(self):
        # assorted <= 10-object cases incl. overlaps and class mismatches
        fixtures = []
        g1 = [{"box": box(0.1, 0.1, 0.2, 0.2), "class_id": 0},
              {"box": box(0.15, 0.1, 0.2, 0.2), "class_id": 0}]
        d1 = [{"box": box(0.1, 0.1, 0.2, 0.2), "class_id": 0, "confidence": 0.9},
              {"box": box(0.15, 0.1, 0.2, 0.2), "class_id": 0, "confidence": 0.8}]
        fixtures.append((g1, d1))
        g2 = [{"box": box(0.1, 0.1, 0.2, 0.2), "class_id": 0},
              {"box": box(0.5, 0.5, 0.2, 0.2), "class_id": 1}]
        d2 = [{"box": box(0.1, 0.1, 0.2, 0.2), "class_id": 1, "confidence": 0.9},
              {"box": box(0.5, 0.5, 0.2, 0.2), "class_id": 1, "confidence": 0.7}]
        fixtures.append((g2, d2))
        for seed in range(6):
            rng = np.random.default_rng(seed)
            gts = [{"box": box(rng.uniform(0, 0.7), rng.uniform(0, 0.7), 0.2, 0.2),
                    "class_id": int(rng.integers(2))} for _ in range(rng.integers(1, 8))]
            dets = [{"box": box(rng.uniform(0, 0.7), rng.uniform(0, 0.7), 0.2, 0.2),
                     "class_id": int(rng.integers(2)),
                     "confidence": float(rng.uniform())} for _ in range(rng.integers(0, 8))]
            fixtures.append((gts, dets))
        for gts, dets in fixtures:
            res = compute_asr({"img": gts}, {"img": dets})
            assert res.detected_objects == optimal_match_count(gts, dets)

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            compute_asr({"img": []}, {"img": []})

    def test_monotone_in_removed_true_positive(self):
        gt, det = make_fixture(6, 4)
        full = compute_asr(gt, det).asr
        fewer = compute_asr(gt, {"img": det["img"][:-1]}).asr
        assert fewer >= full

    def test_asr_recall_duality(self):
        gt, det = make_fixture(8, 3)
        res = compute_asr(gt, det)
        m = compute_detection_metrics(gt, det)
        assert res.asr == pytest.approx(1.0 - m.recall)

    def test_rate_interpretation_flag(self):
        # image A: 1/2 detected, image B: 1/1 detected
        gt = {"a": [{"box": box(0.1, 0.1, 0.1, 0.1), "class_id": 0},
                    {"box": box(0.5, 0.5, 0.1, 0.1), "class_id": 0}],
              "b": [{"box": box(0.3, 0.3, 0.1, 0.1), "class_id": 0}]}
        det = {"a": [{"box": box(0.1, 0.1, 0.1, 0.1), "class_id": 0, "confidence": 1.0}],
               "b": [{"box": box(0.3, 0.3, 0.1, 0.1), "class_id": 0, "confidence": 1.0}]}
        assert compute_asr(gt, det).asr == pytest.approx(1.0 - 2.0 / 3.0)
        assert compute_asr(gt, det, rate_interpretation=True).asr == \
            pytest.approx(1.0 - 0.75)


def ap_oracle_hand_integrated(tp_flags, n_gt):
    """Independent 101-point AP from an ordered TP/FP sequence."""
    tps = np.cumsum(tp_flags)
    fps = np.cumsum([1 - t for t in tp_flags])
    recalls = tps / n_gt
    precisions = tps / (tps + fps)
    total = 0.0
    for r in np.linspace(0, 1, 101):
        ps = [p for rec, p in zip(recalls, precisions) if rec >= r - 1e-12]
        total += max(ps) if ps else 0.0
    return total / 101.0


class TestDetectionMetrics:
    def test_perfect_detector(self):
        gt, det = make_fixture(6, 6)
        m = compute_detection_metrics(gt, det)
        assert m.map50 == pytest.approx(1.0)
        assert m.precision == pytest.approx(1.0)
        assert m.recall == pytest.approx(1.0)
        assert m.f1 == pytest.approx(1.0)

    def test_empty_detections(self):
        gt, _ = make_fixture(4, 4)
        m = compute_detection_metrics(gt, {"img": []})
        assert m.map50 == 0.0 and m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0

    def test_unknown_class_rejected_when_classes_declared(self):
        gt, det = make_fixture(2, 2)
        det["img"].append({"box": box(0.8, 0.8, 0.1, 0.1), "class_id": 99,
                           "confidence": 0.5})
        with pytest.raises(ValueError):
            compute_detection_metrics(gt, det, known_class_ids={0, 1})

    def test_gt_less_class_is_false_positive(self):
        gt, det = make_fixture(2, 2)
        clean = compute_detection_metrics(gt, det)
        det["img"].append({"box": box(0.8, 0.8, 0.1, 0.1), "class_id": 99,
                           "confidence": 0.5})
        noisy = compute_detection_metrics(gt, det)
        assert noisy.precision < clean.precision
        assert noisy.map50 == pytest.approx(clean.map50)
        assert noisy.recall == pytest.approx(clean.recall)

    def test_three_image_two_class_fixture_matches_oracle(self):
        # class 0: 3 gts; detections at conf .9 (TP), .8 (FP), .6 (TP)
        # class 1: 2 gts; detections at conf .7 (TP), .5 (FP)
        b = box
        gt = {
            "i1": [{"box": b(0.1, 0.1, 0.2, 0.2), "class_id": 0},
                   {"box": b(0.6, 0.6, 0.2, 0.2), "class_id": 1}],
            "i2": [{"box": b(0.2, 0.2, 0.2, 0.2), "class_id": 0},
                   {"box": b(0.5, 0.1, 0.2, 0.2), "class_id": 1}],
            "i3": [{"box": b(0.3, 0.3, 0.2, 0.2), "class_id": 0}],
        }
        det = {
            "i1": [{"box": b(0.1, 0.1, 0.2, 0.2), "class_id": 0, "confidence": 0.9},
                   {"box": b(0.6, 0.6, 0.2, 0.2), "class_id": 1, "confidence": 0.7}],
            "i2": [{"box": b(0.7, 0.7, 0.1, 0.1), "class_id": 0, "confidence": 0.8},
                   {"box": b(0.8, 0.1, 0.1, 0.1), "class_id": 1, "confidence": 0.5}],
            "i3": [{"box": b(0.3, 0.3, 0.2, 0.2), "class_id": 0, "confidence": 0.6}],
        }
        m = compute_detection_metrics(gt, det)
        ap0 = ap_oracle_hand_integrated([1, 0, 1], 3)
        ap1 = ap_oracle_hand_integrated([1, 0], 2)
        assert m.map50 == pytest.approx((ap0 + ap1) / 2, abs=1e-6)
        # identical boxes: AP identical at every IoU threshold in 0.50:0.95
        assert m.map50_95 == pytest.approx(m.map50, abs=1e-6)
        assert m.mar50_95 == pytest.approx((2 / 3 + 1 / 2) / 2, abs=1e-6)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            gts = [{"box": box(rng.uniform(0, 0.7), rng.uniform(0, 0.7), 0.2, 0.2),
                    "class_id": i % 2} for i in range(4)]
            dets = [{"box": box(rng.uniform(0, 0.7), rng.uniform(0, 0.7), 0.2, 0.2),
                     "class_id": int(rng.integers(2)),
                     "confidence": float(rng.uniform())} for _ in range(5)]
            m = compute_detection_metrics({"img": gts}, {"img": dets})
            for v in m.to_dict().values():
                assert 0.0 <= v <= 1.0
