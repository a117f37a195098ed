"""
Data-side knowledge enrichment: the proposal bank cropped from labeled scenes,
running per-class logit statistics, class-probabilistic instance sampling,
collision-checked pasting, and the weak/strong scene augmentations.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .detector import Proposals
from .errors import InvalidArgumentError
from .geometry import (SCALE_RANGE, Aabb, AugRecord, aabb_overlaps, apply_transform,
                       as_points, crop_points_in_box)
from .ssl import Assignment
from .synthdata import Annotation, Scene, scene_to_line

logger = logging.getLogger(__name__)

MIN_BANK_POINTS = 8
SAMPLING_MODES = ("HLS", "LLS", "uniform")


@dataclass(frozen=True, eq=False)
class BankInstance:
    """An object crop whose box center sits at the origin."""

    class_id: int
    points: np.ndarray
    size: np.ndarray

    def box_at(self, center) -> Aabb:
        return Aabb(center, self.size)


class ProposalBank:
    """Object crops indexed by class."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.by_class: Dict[int, List[BankInstance]] = {c: [] for c in range(num_classes)}
        self._lock = threading.Lock()

    def add(self, instance: BankInstance):
        with self._lock:
            self.by_class.setdefault(instance.class_id, []).append(instance)

    def instances(self, class_id: int) -> List[BankInstance]:
        return list(self.by_class.get(class_id, []))

    def classes_available(self) -> List[int]:
        return sorted(c for c, items in self.by_class.items() if items)

    def __len__(self) -> int:
        return sum(len(items) for items in self.by_class.values())

    def to_jsonl(self, path: str) -> int:
        """Export instances in the dataset line format plus a ``cls`` field."""
        count = 0
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for class_id in sorted(self.by_class):
                for i, inst in enumerate(self.by_class[class_id]):
                    box = Annotation(class_id, Aabb(np.zeros(3), inst.size))
                    scene = Scene(f"bank_{class_id}_{i:05d}", inst.points, [box])
                    f.write(scene_to_line(scene, extra={"cls": class_id}))
                    f.write("\n")
                    count += 1
        return count


def build_proposal_bank(scenes: Sequence[Scene], num_classes: int,
                        min_points: int = MIN_BANK_POINTS) -> ProposalBank:
    """Crop every annotated box with at least ``min_points`` interior points."""
    if not scenes:
        raise InvalidArgumentError("the proposal bank needs at least one labeled scene")
    bank = ProposalBank(num_classes)
    skipped = 0
    for scene in scenes:
        for ann in scene.annotations:
            points, _ = crop_points_in_box(scene.points, ann.box)
            if len(points) < min_points:
                skipped += 1
                continue
            bank.add(BankInstance(ann.class_id, points - ann.box.center, ann.box.size.copy()))
    empty = [c for c in range(num_classes) if not bank.by_class.get(c)]
    if empty:
        logger.warning("proposal bank has no instances for classes %s; they are not sampled", empty)
    logger.info("proposal bank: %d instances, %d sparse boxes skipped", len(bank), skipped)
    return bank


@dataclass
class ClassStats:
    """Running mean of the logit each class receives on its own positives."""

    mean_logit: np.ndarray
    count: np.ndarray
    momentum: float = 0.95

    @classmethod
    def zeros(cls, num_classes: int, momentum: float = 0.95) -> "ClassStats":
        return cls(np.zeros(num_classes), np.zeros(num_classes, dtype=np.int64), momentum)

    def copy(self) -> "ClassStats":
        return ClassStats(self.mean_logit.copy(), self.count.copy(), self.momentum)


def update_class_stats(stats: ClassStats, proposals: Proposals,
                       assignment: Assignment) -> ClassStats:
    """Fold the logit each positive proposal gives its GT class into a copy of ``stats``."""
    updated = stats.copy()
    m = stats.momentum
    for i in np.flatnonzero(assignment.positive):
        c = int(assignment.gt_class[i])
        updated.mean_logit[c] = m * updated.mean_logit[c] + (1 - m) * proposals.class_logits[i, c]
        updated.count[c] += 1
    return updated


@dataclass
class ClassProbabilities:
    weights: np.ndarray
    mode: str


def class_probabilities(stats: ClassStats, mode: str = "HLS") -> ClassProbabilities:
    """Min-max normalize the mean logits, then squash with a sigmoid.

    HLS favours high-logit (well-learned) classes, LLS low-logit ones. Only
    classes that have had positives take part in the range; the others get
    0.5, as does every class when the range is degenerate.
    """
    if mode not in SAMPLING_MODES:
        raise InvalidArgumentError(f"unknown sampling mode {mode!r}")
    weights = np.full(len(stats.mean_logit), 0.5)
    seen = stats.count > 0
    if mode == "uniform" or not seen.any():
        return ClassProbabilities(weights, mode)
    values = stats.mean_logit[seen] if mode == "HLS" else -stats.mean_logit[seen]
    lo, hi = float(values.min()), float(values.max())
    if hi - lo > 0:
        weights[seen] = expit((values - lo) / (hi - lo))
    return ClassProbabilities(weights, mode)


def sample_instances(bank: ProposalBank, probs: ClassProbabilities, max_inserts: int,
                     rng: np.random.Generator) -> List[BankInstance]:
    """Draw classes from the normalized weights, then an instance uniformly per class."""
    available = bank.classes_available()
    if max_inserts <= 0 or not available:
        return []
    w = probs.weights[available]
    classes = rng.choice(available, size=max_inserts, p=w / w.sum())
    picked = []
    for c in classes:
        items = bank.by_class[int(c)]
        picked.append(items[int(rng.integers(0, len(items)))])
    return picked


def insert_instances(scene: Scene, instances: Sequence[BankInstance],
                     collision_boxes: Sequence[Aabb], rng: np.random.Generator,
                     room_extent: float = 8.0, attempts: int = 10
                     ) -> Tuple[Scene, List[Annotation]]:
    """Paste instances at random floor positions that collide with nothing.

    Returns the new scene and the accepted placements. They become scene
    annotations only for labeled scenes.
    """
    if not instances:
        return scene, []
    occupied = list(collision_boxes)
    accepted: List[Annotation] = []
    chunks = [scene.points]
    annotations = list(scene.annotations)
    dropped = 0
    for inst in instances:
        half = inst.size[:2] / 2
        if np.any(2 * half >= room_extent):
            dropped += 1
            continue
        for _ in range(attempts):
            xy = rng.uniform(half, room_extent - half)
            box = inst.box_at(np.array([xy[0], xy[1], inst.size[2] / 2]))
            if not any(aabb_overlaps(box, other) for other in occupied):
                occupied.append(box)
                placed = Annotation(inst.class_id, box)
                accepted.append(placed)
                chunks.append(inst.points + box.center)
                if scene.labeled:
                    annotations.append(placed)
                break
        else:
            dropped += 1
    if dropped:
        logger.debug("scene %s: %d of %d placements dropped", scene.id, dropped, len(instances))
    new_scene = Scene(scene.id, np.concatenate(chunks, axis=0), annotations,
                      labeled=scene.labeled, withheld=list(scene.withheld))
    return new_scene, accepted


def weak_augment(scene: Scene, n_points: int, rng: np.random.Generator) -> Scene:
    """Random subset of exactly ``n_points`` points; annotations unchanged."""
    n = len(scene.points)
    if n == 0:
        raise InvalidArgumentError(f"scene {scene.id} has no points")
    if n >= n_points:
        idx = rng.permutation(n)[:n_points]
    else:
        logger.debug("scene %s: filling %d -> %d points by resampling", scene.id, n, n_points)
        idx = np.concatenate([rng.permutation(n), rng.integers(0, n, size=n_points - n)])
    return scene.with_points(scene.points[idx])


def strong_augment(cloud, rng: np.random.Generator,
                   scale_range: Tuple[float, float] = SCALE_RANGE
                   ) -> Tuple[np.ndarray, AugRecord]:
    """Random flips along x/y and a uniform scale, point order preserved."""
    pts = as_points(cloud)
    if len(pts) == 0:
        raise InvalidArgumentError("cannot augment an empty cloud")
    aug = AugRecord(bool(rng.random() < 0.5), bool(rng.random() < 0.5),
                    float(rng.uniform(*scale_range)))
    return apply_transform(pts, aug), aug
