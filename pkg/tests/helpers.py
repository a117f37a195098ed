import os
from typing import List, Optional

import numpy as np

from dpke.detector import Proposals
from dpke.settings import TrainerConfig
from dpke.synthdata import DEFAULT_CLASSES, GeneratorConfig, Scene, generate_dataset


def small_generator(num_classes: int = 3) -> GeneratorConfig:
    return GeneratorConfig(classes=DEFAULT_CLASSES[:num_classes], objects_per_scene=(2, 3),
                           points_per_object=(48, 96), min_scene_points=200,
                           floor_points=48, wall_points=16)


def small_scenes(n: int = 4, seed: int = 7, num_classes: int = 3) -> List[Scene]:
    return generate_dataset(small_generator(num_classes), n, seed)


def tiny_config(**overrides) -> TrainerConfig:
    values = dict(
        epochs_pretrain=1, epochs_semi=2, n_aug=1, batch_labeled=1, batch_unlabeled=1,
        lr=0.001, lr_decay_epochs=(), n_points=64, n_seeds=16, n_proposals=4, knn=4,
        m0=16, max_inserts=2, checkpoint_every=1,
    )
    values.update(overrides)
    return TrainerConfig(**values)


def write_config(path: str, lines: List[str]) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def make_proposals(centers, sizes, objectness=None, feature_z=None,
                   class_logits=None, iou_est=None, num_classes: int = 3) -> Proposals:
    """Hand-built proposals for loss tests; only the fields the loss reads matter."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    k = len(centers)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(k, 3)
    objectness = np.full(k, 0.5) if objectness is None else np.asarray(objectness, float)
    feature_z = np.zeros((k, 4)) if feature_z is None else np.asarray(feature_z, float)
    class_logits = (np.zeros((k, num_classes)) if class_logits is None
                    else np.asarray(class_logits, float))
    iou_est = np.full(k, 0.5) if iou_est is None else np.asarray(iou_est, float)
    obj_logit = np.log(objectness) - np.log1p(-objectness)
    iou_logit = np.log(iou_est) - np.log1p(-iou_est)
    return Proposals(centers, sizes, objectness, class_logits, iou_est, feature_z, obj_logit,
                     iou_logit, centers.copy(), centers.copy(), centers.copy())


def read_bytes(path: str) -> Optional[bytes]:
    if not os.path.exists(path):
        return None
    with open(path, "rb") as f:
        return f.read()
