import os
import tempfile

import numpy as np
import pytest

from dpke.detector import ArchConfig, init_params
from dpke.eval import (Detection, EvalResult, GroundTruth, average_precision, evaluate, nms,
                       proposals_to_detections, read_eval_csv, supervision_stats,
                       write_eval_csv)
from dpke.geometry import Aabb, aabb_iou
from dpke.synthdata import Annotation
from tests.helpers import make_proposals, small_scenes

UNIT = Aabb([0, 0, 0], [2, 2, 2])
HALF_IOU = Aabb([2 / 3, 0, 0], [2, 2, 2])


def test_nms_keeps_best_of_overlapping_pair():
    assert aabb_iou(UNIT, HALF_IOU) == pytest.approx(0.5)
    kept = nms([Detection(0, HALF_IOU, 0.8), Detection(0, UNIT, 0.9)], 0.25)
    assert [d.score for d in kept] == [0.9]
    other_class = nms([Detection(0, UNIT, 0.9), Detection(1, HALF_IOU, 0.8)], 0.25)
    assert len(other_class) == 2
    other_scene = nms([Detection(0, UNIT, 0.9), Detection(0, HALF_IOU, 0.8, scene=1)], 0.25)
    assert len(other_scene) == 2
    assert nms([], 0.25) == []


def test_nms_ties_keep_earlier_detection():
    a = Detection(0, UNIT, 0.5, class_prob=0.1)
    b = Detection(0, HALF_IOU, 0.5, class_prob=0.2)
    assert nms([a, b]) == [a]
    assert nms([b, a]) == [b]


def _random_detections(rng, n, classes=2):
    return [Detection(int(rng.integers(0, classes)),
                      Aabb(rng.uniform(0, 2, 3), rng.uniform(0.5, 1.5, 3)),
                      float(rng.random()))
            for _ in range(n)]


def test_nms_is_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dets = _random_detections(rng, 12)
        expected = nms(dets)
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert nms(shuffled) == expected


def test_ap_hand_example():
    gts = [GroundTruth(0, Aabb([0, 0, 0], [1, 1, 1])), GroundTruth(0, Aabb([5, 5, 5], [1, 1, 1]))]
    dets = [Detection(0, Aabb([0, 0, 0], [1, 1, 1]), 0.9),
            Detection(0, Aabb([9, 9, 9], [1, 1, 1]), 0.8),
            Detection(0, Aabb([5, 5, 5], [1, 1, 1]), 0.7)]
    assert average_precision(dets, gts, 0.25)[0] == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision([dets[0], dets[2]], gts, 0.25)[0] == 1.0
    assert average_precision([], gts, 0.25) == {0: 0.0}


def _oracle_ap(dets, gts, thr):
    """Enumerate every cutoff; each prefix is matched from scratch."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    points = []
    for k in range(1, len(order) + 1):
        matched = set()
        tp = 0
        for i in order[:k]:
            best, best_iou = None, thr
            for j, g in enumerate(gts):
                if j in matched:
                    continue
                iou = aabb_iou(dets[i].box, g.box)
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = j, iou
            if best is not None:
                matched.add(best)
                tp += 1
        points.append((tp / len(gts), tp / k))
    ap, prev = 0.0, 0.0
    for r in sorted(set(r for r, _ in points)):
        if r <= prev:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


def test_ap_matches_cutoff_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(500):
        gts = [GroundTruth(0, Aabb(rng.uniform(0, 2, 3), rng.uniform(0.5, 1.5, 3)))
               for _ in range(int(rng.integers(1, 6)))]
        dets = [Detection(0, Aabb(rng.uniform(0, 2, 3), rng.uniform(0.5, 1.5, 3)),
                          float(rng.random()))
                for _ in range(int(rng.integers(0, 11)))]
        got = average_precision(dets, gts, 0.25)[0]
        assert got == pytest.approx(_oracle_ap(dets, gts, 0.25), abs=1e-12)


def test_ap_depends_on_rank_only():
    rng = np.random.default_rng(2)
    gts = [GroundTruth(int(rng.integers(0, 2)), Aabb(rng.uniform(0, 2, 3), np.ones(3)))
           for _ in range(6)]
    dets = _random_detections(rng, 10)
    scaled = [Detection(d.class_id, d.box, d.score * 0.37) for d in dets]
    for thr in (0.25, 0.5):
        assert average_precision(dets, gts, thr, 2) == average_precision(scaled, gts, thr, 2)


def test_map_averages_classes_with_ground_truth():
    result = EvalResult({0.25: {0: 1.0, 1: 0.5, 2: 0.0}, 0.5: {0: 0.5, 1: 0.0, 2: 0.0}},
                        {0: 3, 1: 1, 2: 0}, 3)
    assert result.map25 == pytest.approx(0.75)
    assert result.map50 == pytest.approx(0.25)
    assert EvalResult({0.25: {}, 0.5: {}}, {}, 2).map25 == 0.0


def test_eval_csv_round_trip():
    result = EvalResult({0.25: {0: 1.0, 1: 0.5}, 0.5: {0: 0.25, 1: 0.0}}, {0: 2, 1: 1}, 2)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "eval.csv")
        write_eval_csv(path, result, ["cabinet", "table"])
        per_class, map25, map50 = read_eval_csv(path)
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
    assert header == "class,gt_count,ap25,ap50"
    assert per_class == {"cabinet": (1.0, 0.25), "table": (0.5, 0.0)}
    assert map25 == pytest.approx(0.75) and map50 == pytest.approx(0.125)


def test_supervision_stats_buckets():
    gts = [Annotation(0, Aabb([1, 1, 1], [1, 1, 1])), Annotation(1, Aabb([4, 4, 1], [1, 1, 1]))]
    exact = [Detection(0, g.box, 0.99, class_prob=0.99, iou_est=0.9) for g in gts]
    assert supervision_stats(exact, gts).strong == 1.0
    low = [Detection(0, g.box, 0.1, class_prob=0.99, iou_est=0.9) for g in gts]
    stats = supervision_stats(low, gts)
    assert stats.strong == 0.0 and stats.weak == 0.0 and stats.below_threshold == 1.0

    mixed = [exact[0],
             Detection(0, gts[1].box, 0.7, class_prob=0.5, iou_est=0.9),
             Detection(0, gts[1].box, 0.3),
             Detection(0, Aabb([7, 7, 1], [1, 1, 1]), 0.99, class_prob=0.99, iou_est=0.9)]
    stats = supervision_stats(mixed, gts, tau_obj=0.6)
    assert stats.as_row() == [0.25, 0.25, 0.25, 0.25]
    assert stats.total == 4
    assert supervision_stats(exact, []).invalid == 1.0
    assert supervision_stats([], gts).total == 0


def test_supervision_buckets_partition():
    rng = np.random.default_rng(3)
    gts = [Annotation(0, Aabb(rng.uniform(0, 3, 3), np.ones(3))) for _ in range(4)]
    for _ in range(50):
        dets = [Detection(0, Aabb(rng.uniform(0, 3, 3), np.ones(3)), float(rng.random()),
                          class_prob=float(rng.random()), iou_est=float(rng.random()))
                for _ in range(int(rng.integers(1, 12)))]
        assert sum(supervision_stats(dets, gts).as_row()) == pytest.approx(1.0)


def test_proposals_to_detections_carries_scores():
    props = make_proposals(np.zeros((2, 3)), np.ones((2, 3)), objectness=[0.3, 0.8],
                           class_logits=[[0.0, 5.0, 0.0], [3.0, 0.0, 0.0]], iou_est=[0.4, 0.6])
    dets = proposals_to_detections(props, scene=2)
    assert [d.class_id for d in dets] == [1, 0]
    assert [d.score for d in dets] == pytest.approx([0.3, 0.8])
    assert dets[1].class_prob == pytest.approx(np.exp(3) / (np.exp(3) + 2))
    assert dets[0].iou_est == pytest.approx(0.4) and dets[0].scene == 2


def test_evaluate_is_deterministic():
    arch = ArchConfig(n_points=64, n_seeds=16, n_proposals=4, num_classes=3, knn=4)
    params = init_params(arch, 0)
    scenes = small_scenes(2)
    a = evaluate(params, scenes, seed=5)
    b = evaluate(params, scenes, seed=5)
    assert a.ap == b.ap and a.gt_counts == b.gt_counts
    assert sum(a.gt_counts.values()) == sum(len(s.annotations) for s in scenes)
    assert 0.0 <= a.map25 <= 1.0 and 0.0 <= a.map50 <= 1.0
    hidden = evaluate(params, [s.as_unlabeled() for s in scenes], seed=5)
    assert hidden.gt_counts == a.gt_counts
