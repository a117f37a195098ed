"""
Training loops: supervised pretraining and the semi-supervised stage with an
EMA teacher, class-probabilistic instance pasting and geometry-aware feature
matching between index-aligned student and teacher proposals.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .augment import (ClassProbabilities, ClassStats, ProposalBank, build_proposal_bank,
                      class_probabilities, insert_instances, sample_instances, strong_augment,
                      update_class_stats, weak_augment)
from .detector import (AdamState, FpsIndices, ModelParams, OutputGrads, accumulate_grads,
                       adam_step, backward, ema_update, forward, init_params, save_checkpoint,
                       zero_grads)
from .errors import InvalidArgumentError, TrainingDivergenceError
from .eval import Detection, nms, predict_detections, proposals_to_detections, supervision_stats
from .geometry import Aabb, AugRecord, transform_box
from .settings import TrainerConfig
from .ssl import (SUPERVISED_TERMS, LossBreakdown, LossWeights, assign_targets,
                  feature_matching_loss, filter_pseudo_labels, supervised_loss, total_loss,
                  weighted_sum)
from .synthdata import Annotation, Scene
from .train_log import StepRecord, TrainLog

logger = logging.getLogger(__name__)

LOSS_WEIGHTS = LossWeights()


@dataclass
class PreparedScene:
    """One scene after insertion and the weak/strong augmentations.

    ``canonical`` is the weak sub-sample in the scene frame; ``student_cloud``
    is the same points, in the same order, after the strong transform.
    """

    scene_id: str
    canonical: np.ndarray
    student_cloud: np.ndarray
    aug: AugRecord
    seed: int
    gt_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    gt_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    diagnostic_gts: List[Annotation] = field(default_factory=list)
    n_inserted: int = 0

    def fps_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0])

    def geometry_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1])


@dataclass
class BatchResult:
    """Loss, parameter gradients and per-step counters of one batch."""

    breakdown: LossBreakdown
    grads: Dict[str, np.ndarray]
    fps: List[FpsIndices]
    n_pseudo: int = 0
    n_gated: int = 0
    supervision_counts: np.ndarray = field(default_factory=lambda: np.zeros(4))
    labeled_outputs: List[Tuple] = field(default_factory=list)


@dataclass
class TrainState:
    """Everything the semi-supervised stage carries from step to step."""

    student: ModelParams
    teacher: ModelParams
    adam: AdamState
    class_stats: ClassStats
    collision_boxes: Dict[str, List[Aabb]] = field(default_factory=dict)


def _scene_seeds(rng: np.random.Generator, n: int) -> List[int]:
    return [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=n)]


def _map_scenes(fn: Callable, items: Sequence, jobs: int) -> List:
    # Each item owns its generator, so results do not depend on scheduling.
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _annotation_arrays(annotations: Sequence[Annotation], aug: AugRecord
                       ) -> Tuple[np.ndarray, np.ndarray]:
    if not annotations:
        return np.zeros((0, 6)), np.zeros(0, dtype=np.int64)
    boxes = np.stack([transform_box(a.box, aug).to_array() for a in annotations])
    return boxes, np.array([a.class_id for a in annotations], dtype=np.int64)


def insertion_active(config: TrainerConfig, epoch: int) -> bool:
    return config.sampling_mode != "off" and epoch < config.n_aug and config.max_inserts > 0


def prepare_scene(scene: Scene, seed: int, config: TrainerConfig,
                  bank: Optional[ProposalBank] = None,
                  probs: Optional[ClassProbabilities] = None,
                  collision_boxes: Optional[Sequence[Aabb]] = None) -> PreparedScene:
    """Insertion (when a bank and weights are given), weak then strong augmentation.

    Labeled scenes collide against their own GT boxes; unlabeled scenes
    against ``collision_boxes``.
    """
    rng = np.random.default_rng([seed, 2])
    inserted: List[Annotation] = []
    if bank is not None and probs is not None:
        instances = sample_instances(bank, probs, config.max_inserts, rng)
        boxes = scene.boxes if scene.labeled else list(collision_boxes or [])
        scene, inserted = insert_instances(scene, instances, boxes, rng, config.room_extent,
                                           config.placement_attempts)
    canonical = weak_augment(scene, config.n_points, rng).points
    student_cloud, aug = strong_augment(canonical, rng)
    prepared = PreparedScene(scene.id, canonical, student_cloud, aug, seed,
                             n_inserted=len(inserted))
    if scene.labeled:
        prepared.gt_boxes, prepared.gt_classes = _annotation_arrays(scene.annotations, aug)
    else:
        prepared.diagnostic_gts = list(scene.withheld) + inserted
    return prepared


def _labeled_objective(student: ModelParams, item: PreparedScene, config: TrainerConfig,
                       reuse: Optional[FpsIndices], weights: LossWeights):
    proposals, fps, trace = forward(student, item.student_cloud, reuse, item.fps_rng())
    assignment = assign_targets(proposals.center, item.gt_boxes, item.gt_classes,
                                config.r_pos, config.r_neg)
    terms, grads = supervised_loss(proposals, assignment, item.gt_boxes, weights,
                                   config.delta, config.r_vote, include_iou=True)
    return terms, grads, proposals, assignment, fps, trace


def _unlabeled_objective(student: ModelParams, teacher: ModelParams, item: PreparedScene,
                         config: TrainerConfig, reuse: Optional[FpsIndices],
                         weights: LossWeights, where: Tuple[str, int, int]):
    """Pseudo-label loss plus feature matching for one unlabeled scene."""
    s_props, s_fps, trace = forward(student, item.student_cloud, reuse, item.fps_rng())
    t_props, t_fps, _ = forward(teacher, item.canonical, reuse=s_fps)
    if not t_fps.same_as(s_fps):
        raise AssertionError(f"scene {item.scene_id}: teacher and student FPS indices differ")
    if not (s_props.decodable() and t_props.decodable()):
        raise TrainingDivergenceError(*where, what=f"model output on scene {item.scene_id}")

    teacher_dets = nms(proposals_to_detections(t_props), config.nms_iou)
    pseudo = filter_pseudo_labels(teacher_dets, config.tau_obj_strict, config.tau_cls,
                                  config.tau_iou)
    grads = OutputGrads.zeros_like(s_props)
    pseudo_loss = 0.0
    if pseudo:
        boxes = np.stack([transform_box(p.box, item.aug).to_array() for p in pseudo])
        classes = np.array([p.class_id for p in pseudo], dtype=np.int64)
        assignment = assign_targets(s_props.center, boxes, classes, config.r_pos, config.r_neg)
        terms, pseudo_grads = supervised_loss(s_props, assignment, boxes, weights,
                                              config.delta, config.r_vote, include_iou=False)
        pseudo_loss = weighted_sum(terms, weights)
        grads.add_(pseudo_grads, config.lambda_u)

    feature_loss, n_gated = 0.0, 0
    if config.feature_matching_enabled:
        fm = feature_matching_loss(s_props, t_props, item.canonical, item.aug, config.tau_obj,
                                   config.delta, config.m0, config.w_threshold,
                                   config.geometry_mode, config.gate_source,
                                   config.chamfer_reduction, item.geometry_rng())
        feature_loss, n_gated = fm.loss, fm.n_gated
        grads.feature_z = grads.feature_z + config.lambda_f * fm.grad_z
    return pseudo_loss, feature_loss, grads, len(pseudo), n_gated, teacher_dets, s_fps, trace


def batch_loss_and_grads(student: ModelParams, teacher: Optional[ModelParams],
                         labeled: Sequence[PreparedScene], unlabeled: Sequence[PreparedScene],
                         config: TrainerConfig,
                         reuse: Optional[Sequence[FpsIndices]] = None,
                         weights: LossWeights = LOSS_WEIGHTS,
                         where: Tuple[str, int, int] = ("batch", 0, 0)) -> BatchResult:
    """Total loss of a batch and its gradient with respect to the student.

    Each part is averaged over its scenes:
    mean supervised + lambda_u * mean pseudo + lambda_f * mean feature term.
    With ``reuse`` (one entry per labeled scene, then per unlabeled scene)
    every forward pass takes the given FPS indices.
    ``weights`` scale the supervised terms of both the labeled and pseudo losses.
    ``where`` (stage, epoch, step) names the step if an output cannot be decoded.
    """
    if unlabeled and teacher is None:
        raise InvalidArgumentError("unlabeled scenes need a teacher model")
    grads = zero_grads(student)
    fps_out: List[FpsIndices] = []
    result = BatchResult(LossBreakdown(), grads, fps_out)

    term_sums = {name: 0.0 for name in SUPERVISED_TERMS}
    for i, item in enumerate(labeled):
        terms, out_grads, proposals, assignment, fps, trace = _labeled_objective(
            student, item, config, reuse[i] if reuse else None, weights)
        for name, value in terms.items():
            term_sums[name] += value / len(labeled)
        accumulate_grads(grads, backward(trace, out_grads.scaled(1.0 / len(labeled))))
        result.labeled_outputs.append((proposals, assignment))
        fps_out.append(fps)

    pseudo_sum = feature_sum = 0.0
    for j, item in enumerate(unlabeled):
        pseudo, feature, out_grads, n_pseudo, n_gated, dets, fps, trace = _unlabeled_objective(
            student, teacher, item, config, reuse[len(labeled) + j] if reuse else None,
            weights, where)
        pseudo_sum += pseudo / len(unlabeled)
        feature_sum += feature / len(unlabeled)
        accumulate_grads(grads, backward(trace, out_grads.scaled(1.0 / len(unlabeled))))
        result.n_pseudo += n_pseudo
        result.n_gated += n_gated
        stats = supervision_stats(dets, item.diagnostic_gts, config.tau_obj,
                                  config.tau_obj_strict, config.tau_cls, config.tau_iou)
        result.supervision_counts += np.array(stats.as_row()) * stats.total
        fps_out.append(fps)

    result.breakdown = total_loss(term_sums, pseudo_sum, feature_sum, weights,
                                  config.lambda_u, config.lambda_f)
    return result


def _check_finite(result: BatchResult, stage: str, epoch: int, step: int):
    if not result.breakdown.is_finite() or not all(
            np.all(np.isfinite(g)) for g in result.grads.values()):
        raise TrainingDivergenceError(stage, epoch, step, result.breakdown.as_dict())


def _check_params(models: Sequence[ModelParams], stage: str, epoch: int, step: int):
    for params in models:
        if not params.all_finite():
            raise TrainingDivergenceError(stage, epoch, step, what="parameter")


def _batches(order: np.ndarray, size: int, n_batches: int) -> List[np.ndarray]:
    """``n_batches`` consecutive slices of ``order``, wrapping around as needed."""
    if len(order) == 0:
        return [order[:0]] * n_batches
    reps = math.ceil(n_batches * size / len(order))
    cyc = np.tile(order, reps)
    return [cyc[b * size:(b + 1) * size] for b in range(n_batches)]


def _record(epoch: int, step: int, result: BatchResult, n_inserted: int) -> StepRecord:
    counts = result.supervision_counts
    total = counts.sum()
    fractions = counts / total if total > 0 else np.zeros(4)
    return StepRecord(epoch, step, result.breakdown, result.n_pseudo, result.n_gated,
                      n_inserted, float(fractions[0]), float(fractions[1]), float(fractions[3]))


def pretrain(config: TrainerConfig, labeled: Sequence[Scene],
             log: Optional[TrainLog] = None, jobs: int = 1) -> ModelParams:
    """Supervised training on labeled scenes only."""
    if not labeled:
        raise InvalidArgumentError("pretraining needs at least one labeled scene")
    params = init_params(config.arch, config.seed)
    adam = AdamState.for_params(params)
    rng = np.random.default_rng([config.seed, 1])
    log = log if log is not None else TrainLog()
    n_batches = math.ceil(len(labeled) / config.batch_labeled)
    for epoch in tqdm(range(config.epochs_pretrain), desc="pretrain", disable=None):
        lr = config.lr_at(epoch)
        for idx in _batches(rng.permutation(len(labeled)), config.batch_labeled, n_batches):
            seeds = _scene_seeds(rng, len(idx))
            items = _map_scenes(lambda a: prepare_scene(labeled[a[0]], a[1], config),
                                list(zip(idx, seeds)), jobs)
            step = log.next_step
            result = batch_loss_and_grads(params, None, items, [], config)
            _check_finite(result, "pretrain", epoch, step)
            params, adam = adam_step(params, result.grads, adam, lr)
            log.append(_record(epoch, step, result, 0))
        summary = log.summarize_epoch(epoch)
        if summary is not None:
            logger.info("pretrain epoch %d: loss %.4f over %d steps (lr %.2g)",
                        epoch, summary.mean_total, summary.steps, lr)
    return params


def refresh_collision_boxes(teacher: ModelParams, unlabeled: Sequence[Scene],
                            config: TrainerConfig, epoch: int,
                            step: int = 0) -> Dict[str, List[Aabb]]:
    """Teacher boxes (after NMS, objectness >= collision threshold) per unlabeled scene."""
    _check_params([teacher], "collision refresh", epoch, step)
    boxes: Dict[str, List[Aabb]] = {}
    for i, scene in enumerate(unlabeled):
        rng = np.random.default_rng([config.seed, 3, epoch, i])
        cloud = weak_augment(scene, config.n_points, rng).points
        dets: List[Detection] = predict_detections(teacher, cloud, rng, config.nms_iou)
        boxes[scene.id] = [d.box for d in dets if d.score >= config.collision_objectness]
    return boxes


def semi_step(state: TrainState, labeled_batch: Sequence[Scene],
              unlabeled_batch: Sequence[Scene], epoch: int, step: int, config: TrainerConfig,
              bank: Optional[ProposalBank], rng: np.random.Generator, lr: float,
              jobs: int = 1) -> Tuple[TrainState, StepRecord]:
    """One optimizer step of the semi-supervised stage.

    Scenes are prepared independently (optionally on ``jobs`` threads); the
    forward/backward/update part runs serially and owns both models.
    """
    state.student.check_compatible(state.teacher)
    _check_params([state.student, state.teacher], "semi", epoch, step)
    inserting = insertion_active(config, epoch) and bank is not None
    probs = class_probabilities(state.class_stats, config.sampling_mode) if inserting else None
    use_bank = bank if inserting else None

    l_seeds = _scene_seeds(rng, len(labeled_batch))
    u_seeds = _scene_seeds(rng, len(unlabeled_batch))
    labeled = _map_scenes(
        lambda a: prepare_scene(a[0], a[1], config, use_bank, probs),
        list(zip(labeled_batch, l_seeds)), jobs)
    unlabeled = _map_scenes(
        lambda a: prepare_scene(a[0], a[1], config, use_bank, probs,
                                state.collision_boxes.get(a[0].id, [])),
        list(zip(unlabeled_batch, u_seeds)), jobs)

    result = batch_loss_and_grads(state.student, state.teacher, labeled, unlabeled, config,
                                  where=("semi", epoch, step))
    _check_finite(result, "semi", epoch, step)

    stats = state.class_stats
    for proposals, assignment in result.labeled_outputs:
        stats = update_class_stats(stats, proposals, assignment)
    student, adam = adam_step(state.student, result.grads, state.adam, lr)
    teacher = ema_update(state.teacher, student, config.ema_alpha)
    n_inserted = sum(item.n_inserted for item in labeled + unlabeled)
    new_state = TrainState(student, teacher, adam, stats, state.collision_boxes)
    return new_state, _record(epoch, step, result, n_inserted)


def train_semi(config: TrainerConfig, labeled: Sequence[Scene], unlabeled: Sequence[Scene],
               pretrained: ModelParams, bank: Optional[ProposalBank] = None,
               checkpoint_dir: Optional[Callable[[int], str]] = None,
               jobs: int = 1) -> Tuple[ModelParams, ModelParams, TrainLog]:
    """Mean-teacher training starting from ``pretrained`` for both models.

    ``checkpoint_dir`` maps a 1-based epoch to a checkpoint path; the student
    is saved every ``checkpoint_every`` epochs when it is given.
    """
    if not labeled:
        raise InvalidArgumentError("the semi-supervised stage needs labeled scenes")
    if bank is None and config.sampling_mode != "off":
        bank = build_proposal_bank(labeled, config.num_classes)
    state = TrainState(pretrained.copy(), pretrained.copy(), AdamState.for_params(pretrained),
                       ClassStats.zeros(config.num_classes, config.stats_momentum))
    rng = np.random.default_rng([config.seed, 4])
    log = TrainLog()
    if unlabeled:
        n_batches = math.ceil(len(unlabeled) / config.batch_unlabeled)
    else:
        n_batches = math.ceil(len(labeled) / config.batch_labeled)
        logger.info("no unlabeled scenes: pseudo-label and feature terms stay inactive")

    for epoch in tqdm(range(config.epochs_semi), desc="semi", disable=None):
        lr = config.lr_at(epoch)
        if insertion_active(config, epoch) and unlabeled:
            state.collision_boxes = refresh_collision_boxes(
                state.teacher, unlabeled, config, epoch, log.next_step)
        l_batches = _batches(rng.permutation(len(labeled)), config.batch_labeled, n_batches)
        u_batches = _batches(rng.permutation(len(unlabeled)), config.batch_unlabeled, n_batches)
        for l_idx, u_idx in zip(l_batches, u_batches):
            state, record = semi_step(state, [labeled[i] for i in l_idx],
                                      [unlabeled[i] for i in u_idx], epoch, log.next_step,
                                      config, bank, rng, lr, jobs)
            log.append(record)
        summary = log.summarize_epoch(epoch)
        logger.info("semi epoch %d: loss %.4f, %d pseudo labels, %d gated pairs, %d inserted",
                    epoch, summary.mean_total, summary.n_pseudo, summary.n_gated,
                    summary.n_inserted)
        if checkpoint_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir(epoch + 1), state.student)
    return state.student, state.teacher, log
