"""
Evaluation: class-wise NMS, all-point average precision, mAP at 0.25/0.5 and
the supervision-distribution statistics of teacher detections.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detector import ModelParams, Proposals, forward
from .geometry import Aabb, aabb_iou, box_array_iou
from .ssl import passes_strict
from .synthdata import Annotation, Scene

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.25, 0.5)


@dataclass(frozen=True)
class Detection:
    """One scored box. ``scene`` groups detections for matching."""

    class_id: int
    box: Aabb
    score: float
    scene: int = 0
    class_prob: float = 1.0
    iou_est: float = 1.0


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Aabb
    scene: int = 0


@dataclass
class EvalResult:
    ap: Dict[float, Dict[int, float]]
    gt_counts: Dict[int, int]
    num_classes: int

    def map_at(self, threshold: float) -> float:
        classes = [c for c in range(self.num_classes) if self.gt_counts.get(c, 0) > 0]
        if not classes:
            return 0.0
        return float(np.mean([self.ap[threshold].get(c, 0.0) for c in classes]))

    @property
    def map25(self) -> float:
        return self.map_at(0.25)

    @property
    def map50(self) -> float:
        return self.map_at(0.5)


@dataclass
class SupervisionStats:
    """Fractions of post-NMS teacher detections per supervision bucket."""

    strong: float
    weak: float
    below_threshold: float
    invalid: float
    total: int = 0

    def as_row(self) -> List[float]:
        return [self.strong, self.weak, self.below_threshold, self.invalid]


def proposals_to_detections(proposals: Proposals, scene: int = 0) -> List[Detection]:
    """One detection per proposal slot, labeled with its most likely class."""
    probs = proposals.class_probs()
    classes = probs.argmax(axis=1)
    return [Detection(int(classes[i]), proposals.box(i), float(proposals.objectness[i]), scene,
                      float(probs[i, classes[i]]), float(proposals.iou_est[i]))
            for i in range(len(proposals))]


def nms(detections: Sequence[Detection], iou_threshold: float = 0.25) -> List[Detection]:
    """Greedy class-wise NMS; ties in score keep the earlier detection."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: List[Detection] = []
    for i in order:
        det = detections[i]
        if all(k.class_id != det.class_id or k.scene != det.scene
               or aabb_iou(k.box, det.box) < iou_threshold for k in kept):
            kept.append(det)
    return kept


def predict_detections(params: ModelParams, cloud: np.ndarray,
                       rng: Optional[np.random.Generator] = None,
                       nms_iou: float = 0.25, scene: int = 0) -> List[Detection]:
    """Run the detector on ``cloud`` and return the detections that survive NMS."""
    proposals, _, _ = forward(params, cloud, rng=rng)
    return nms(proposals_to_detections(proposals, scene), nms_iou)


def _class_ap(dets: List[Detection], gts: List[GroundTruth], iou_threshold: float) -> float:
    if not gts:
        return 0.0
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = dets[i]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if matched[j] or gt.scene != det.scene:
                continue
            iou = aabb_iou(det.box, gt.box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                      iou_threshold: float, num_classes: Optional[int] = None) -> Dict[int, float]:
    """All-point interpolated AP per class present among the ground truths."""
    classes = set(g.class_id for g in gts)
    if num_classes is not None:
        classes |= set(range(num_classes))
    return {c: _class_ap([d for d in detections if d.class_id == c],
                         [g for g in gts if g.class_id == c], iou_threshold)
            for c in sorted(classes)}


def scene_ground_truth(scene: Scene, index: int) -> List[GroundTruth]:
    """Evaluation boxes of a scene, tagged with its position in the evaluated set."""
    return [GroundTruth(a.class_id, a.box, index) for a in scene.ground_truth()]


def evaluate(params: ModelParams, scenes: Sequence[Scene], n_points: Optional[int] = None,
             seed: int = 0, nms_iou: float = 0.25) -> EvalResult:
    """Weak sub-sample, forward, NMS and AP at 0.25 and 0.5 over all scenes."""
    from .augment import weak_augment

    n_points = n_points or params.arch.n_points
    rng = np.random.default_rng(seed)
    detections: List[Detection] = []
    gts: List[GroundTruth] = []
    for index, scene in enumerate(scenes):
        cloud = weak_augment(scene, n_points, rng).points
        detections.extend(predict_detections(params, cloud, rng, nms_iou, index))
        gts.extend(scene_ground_truth(scene, index))
    num_classes = params.arch.num_classes
    ap = {t: average_precision(detections, gts, t, num_classes) for t in IOU_THRESHOLDS}
    counts = {c: sum(1 for g in gts if g.class_id == c) for c in range(num_classes)}
    return EvalResult(ap, counts, num_classes)


def supervision_stats(detections: Sequence[Detection], gts: Sequence[Annotation],
                      tau_obj: float = 0.6, tau_obj_strict: float = 0.9,
                      tau_cls: float = 0.9, tau_iou: float = 0.25,
                      match_iou: float = 0.25) -> SupervisionStats:
    """Split detections into strong / weak / below-threshold / invalid buckets."""
    n = len(detections)
    if n == 0:
        return SupervisionStats(0.0, 0.0, 0.0, 0.0, 0)
    gt_array = np.stack([g.box.to_array() for g in gts]) if gts else np.zeros((0, 6))
    det_array = np.stack([d.box.to_array() for d in detections])
    best_iou = (box_array_iou(det_array, gt_array).max(axis=1) if len(gt_array)
                else np.zeros(n))
    counts = np.zeros(4)
    for det, iou in zip(detections, best_iou):
        if iou < match_iou:
            counts[3] += 1
        elif passes_strict(det.score, det.class_prob, det.iou_est,
                           tau_obj_strict, tau_cls, tau_iou):
            counts[0] += 1
        elif det.score >= tau_obj:
            counts[1] += 1
        else:
            counts[2] += 1
    fractions = counts / n
    return SupervisionStats(*(float(f) for f in fractions), total=n)


def write_eval_csv(path: str, result: EvalResult, class_names: Optional[Sequence[str]] = None):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "gt_count", "ap25", "ap50"])
        for c in range(result.num_classes):
            name = class_names[c] if class_names else str(c)
            writer.writerow([name, result.gt_counts.get(c, 0),
                             f"{result.ap[0.25].get(c, 0.0):.6f}",
                             f"{result.ap[0.5].get(c, 0.0):.6f}"])
        writer.writerow(["mAP25", "", f"{result.map25:.6f}", ""])
        writer.writerow(["mAP50", "", "", f"{result.map50:.6f}"])


def read_eval_csv(path: str) -> Tuple[Dict[str, Tuple[float, float]], float, float]:
    """Per-class (ap25, ap50) keyed by class label, plus the two mAP footers."""
    per_class: Dict[str, Tuple[float, float]] = {}
    map25 = map50 = 0.0
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            if row["class"] == "mAP25":
                map25 = float(row["ap25"])
            elif row["class"] == "mAP50":
                map50 = float(row["ap50"])
            else:
                per_class[row["class"]] = (float(row["ap25"]), float(row["ap50"]))
    return per_class, map25, map50
