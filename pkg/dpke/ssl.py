"""
Losses of the student-teacher detector: target assignment, the supervised
detection loss, strict pseudo-label filtering and geometry-aware feature
matching between slot-aligned student and teacher proposals.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, logsumexp, softmax

from .detector import OutputGrads, Proposals
from .errors import InvalidArgumentError
from .geometry import (Aabb, AugRecord, box_array_iou, crop_points_in_box,
                       geometry_weight, inverse_transform_box)

if TYPE_CHECKING:
    from .eval import Detection

logger = logging.getLogger(__name__)

NEGATIVE = -1
IGNORED = -2
GEOMETRY_MODES = ("LCD", "HCD", "constant")
GATE_SOURCES = ("teacher", "student")
SUPERVISED_TERMS = ("objectness", "cls", "center", "size", "vote", "iou_head")


@dataclass
class Assignment:
    """Per-proposal label: a GT index (positive), NEGATIVE or IGNORED."""

    gt_index: np.ndarray
    gt_class: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.gt_index == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.gt_index == IGNORED


@dataclass(frozen=True)
class PseudoLabel:
    box: Aabb
    class_id: int
    objectness: float
    class_prob: float
    iou_est: float


@dataclass(frozen=True)
class LossWeights:
    objectness: float = 1.0
    cls: float = 1.0
    center: float = 1.0
    size: float = 1.0
    vote: float = 1.0
    iou_head: float = 1.0

    def get(self, term: str) -> float:
        return getattr(self, term)


@dataclass
class LossBreakdown:
    objectness: float = 0.0
    cls: float = 0.0
    center: float = 0.0
    size: float = 0.0
    vote: float = 0.0
    iou_head: float = 0.0
    pseudo: float = 0.0
    feature_matching: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_dict().values())


@dataclass
class FeatureMatchResult:
    loss: float
    grad_z: np.ndarray
    n_gated: int
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))


def huber(x: np.ndarray, delta: float = 1.0) -> np.ndarray:
    a = np.abs(x)
    return np.where(a <= delta, 0.5 * x * x, delta * a - 0.5 * delta * delta)


def huber_grad(x: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(x, -delta, delta)


def assign_targets(centers: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                   r_pos: float = 0.3, r_neg: float = 0.6) -> Assignment:
    """Label proposals by the distance from their center to the nearest GT center."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    k = len(centers)
    if len(gt_boxes) == 0:
        return Assignment(np.full(k, NEGATIVE, dtype=np.int64), np.full(k, -1, dtype=np.int64))
    dist = np.sqrt(cdist(centers, gt_boxes[:, :3], "sqeuclidean"))
    nearest = dist.argmin(axis=1)  # first minimum wins ties
    nearest_dist = dist[np.arange(k), nearest]
    gt_index = np.full(k, IGNORED, dtype=np.int64)
    gt_index[nearest_dist <= r_pos] = nearest[nearest_dist <= r_pos]
    gt_index[nearest_dist > r_neg] = NEGATIVE
    gt_class = np.where(gt_index >= 0, np.asarray(gt_classes)[np.maximum(gt_index, 0)], -1)
    return Assignment(gt_index, gt_class.astype(np.int64))


def supervised_loss(proposals: Proposals, assignment: Assignment, gt_boxes: np.ndarray,
                    weights: LossWeights = LossWeights(), delta: float = 1.0,
                    r_vote: float = 1.0, include_iou: bool = True
                    ) -> Tuple[Dict[str, float], OutputGrads]:
    """Detection loss terms and their weighted output gradients.

    Every term is mean-reduced over its contributing set and is 0 when the
    set is empty. The returned gradients are those of sum(weight * term).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    grads = OutputGrads.zeros_like(proposals)
    terms = {name: 0.0 for name in SUPERVISED_TERMS}
    pos = np.flatnonzero(assignment.positive)
    neg = np.flatnonzero(assignment.negative)

    scored = np.concatenate([pos, neg])
    if len(scored):
        logits = proposals.obj_logit[scored]
        target = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        terms["objectness"] = float(np.mean(np.logaddexp(0.0, logits) - target * logits))
        grads.obj_logit[scored] = weights.objectness * (expit(logits) - target) / len(scored)

    if len(pos):
        n = len(pos)
        matched = gt_boxes[assignment.gt_index[pos]]
        cls = assignment.gt_class[pos]
        logits = proposals.class_logits[pos]
        terms["cls"] = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(n), cls]))
        onehot = np.zeros_like(logits)
        onehot[np.arange(n), cls] = 1.0
        grads.class_logits[pos] = weights.cls * (softmax(logits, axis=1) - onehot) / n

        diff = proposals.center[pos] - matched[:, :3]
        terms["center"] = float(huber(diff, delta).mean())
        grads.center[pos] = weights.center * huber_grad(diff, delta) / (3 * n)

        diff = proposals.size[pos] - matched[:, 3:]
        terms["size"] = float(huber(diff, delta).mean())
        grads.size[pos] = weights.size * huber_grad(diff, delta) / (3 * n)

        if include_iou:
            pred = proposals.box_array()[pos]
            target_iou = np.diag(box_array_iou(pred, matched))
            est = proposals.iou_est[pos]
            diff = est - target_iou
            terms["iou_head"] = float(huber(diff, delta).mean())
            grads.iou_logit[pos] = (weights.iou_head * huber_grad(diff, delta)
                                    * est * (1 - est) / n)

    if len(gt_boxes):
        dist = np.sqrt(cdist(proposals.seed_xyz, gt_boxes[:, :3], "sqeuclidean"))
        nearest = dist.argmin(axis=1)
        near = np.flatnonzero(dist[np.arange(len(dist)), nearest] <= r_vote)
        if len(near):
            diff = proposals.votes[near] - gt_boxes[nearest[near], :3]
            terms["vote"] = float(huber(diff, delta).mean())
            grads.votes[near] = weights.vote * huber_grad(diff, delta) / (3 * len(near))
    return terms, grads


def weighted_sum(terms: Dict[str, float], weights: LossWeights) -> float:
    return float(sum(weights.get(name) * value for name, value in terms.items()))


def passes_strict(objectness: float, class_prob: float, iou_est: float,
                  tau_obj_strict: float = 0.9, tau_cls: float = 0.9,
                  tau_iou: float = 0.25) -> bool:
    return objectness >= tau_obj_strict and class_prob >= tau_cls and iou_est >= tau_iou


def filter_pseudo_labels(detections: Sequence["Detection"], tau_obj_strict: float = 0.9,
                         tau_cls: float = 0.9, tau_iou: float = 0.25) -> List[PseudoLabel]:
    """Keep NMS-deduplicated teacher detections that clear every strict threshold."""
    return [PseudoLabel(d.box, d.class_id, d.score, d.class_prob, d.iou_est)
            for d in detections
            if passes_strict(d.score, d.class_prob, d.iou_est, tau_obj_strict, tau_cls, tau_iou)]


def feature_matching_loss(student: Proposals, teacher: Proposals, canonical_cloud: np.ndarray,
                          aug: AugRecord, tau_obj: float = 0.6, delta: float = 1.0,
                          m0: int = 128, w_threshold: float = 0.0,
                          geometry_mode: str = "LCD", gate_source: str = "teacher",
                          reduction: str = "mean",
                          rng: Optional[np.random.Generator] = None) -> FeatureMatchResult:
    """Geometry-weighted Huber consistency on slot-aligned proposal features.

    Slot i is gated by objectness >= tau_obj. Its weight comes from the
    Chamfer similarity of the canonical points inside the teacher box and
    inside the student box mapped back through ``aug``. Gradients go to the
    student features only; the weight is a constant.
    """
    if len(student) != len(teacher):
        raise InvalidArgumentError(
            f"misaligned proposals: {len(student)} student vs {len(teacher)} teacher")
    if geometry_mode not in GEOMETRY_MODES:
        raise InvalidArgumentError(f"unknown geometry mode {geometry_mode!r}")
    if gate_source not in GATE_SOURCES:
        raise InvalidArgumentError(f"unknown gate source {gate_source!r}")

    grad_z = np.zeros_like(student.feature_z)
    gate_scores = teacher.objectness if gate_source == "teacher" else student.objectness
    gated = np.flatnonzero(gate_scores >= tau_obj)
    weights = np.zeros(len(student))
    if len(gated) == 0:
        return FeatureMatchResult(0.0, grad_z, 0, weights)

    dim = student.feature_z.shape[1]
    pair_losses = []
    for i in gated:
        if geometry_mode == "constant":
            w = 1.0
        else:
            p_t, _ = crop_points_in_box(canonical_cloud, teacher.box(i))
            p_s, _ = crop_points_in_box(canonical_cloud,
                                        inverse_transform_box(student.box(i), aug))
            w = geometry_weight(p_t, p_s, m0, w_threshold, reduction, rng)
            if geometry_mode == "HCD":
                w = 1.0 - w
        weights[i] = w
        diff = student.feature_z[i] - teacher.feature_z[i]
        pair_losses.append(w * float(huber(diff, delta).mean()))
        grad_z[i] = w * huber_grad(diff, delta) / (dim * len(gated))
    return FeatureMatchResult(float(np.mean(pair_losses)), grad_z, len(gated), weights)


def total_loss(labeled_terms: Dict[str, float], pseudo: float, feature: float,
               weights: LossWeights = LossWeights(), lambda_u: float = 1.0,
               lambda_f: float = 1.0) -> LossBreakdown:
    """L_labeled + lambda_u * L_pseudo + lambda_f * L_f."""
    breakdown = LossBreakdown(**{name: float(labeled_terms.get(name, 0.0))
                                 for name in SUPERVISED_TERMS})
    breakdown.pseudo = float(pseudo)
    breakdown.feature_matching = float(feature)
    breakdown.total = (weighted_sum({k: labeled_terms.get(k, 0.0) for k in SUPERVISED_TERMS},
                                    weights)
                       + lambda_u * breakdown.pseudo + lambda_f * breakdown.feature_matching)
    return breakdown
