"""
Settings module for training hyperparameters and run configuration files.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

from .detector import ArchConfig
from .errors import ConfigError
from .geometry import CHAMFER_REDUCTIONS

logger = logging.getLogger(__name__)

SAMPLING_CHOICES = ("HLS", "LLS", "uniform", "off")
GEOMETRY_CHOICES = ("LCD", "HCD", "constant", "off")
GATE_CHOICES = ("teacher", "student")
PATH_KEYS = ("dataset", "val_dataset", "split", "pretrained", "out_dir")

# Fields that only label a run and never change what it computes.
_UNHASHED = ("checkpoint_every",)


@dataclass(frozen=True)
class TrainerConfig:
    """All knobs of pretraining and the semi-supervised stage."""

    epochs_pretrain: int = 30
    epochs_semi: int = 100
    n_aug: int = 60
    batch_labeled: int = 2
    batch_unlabeled: int = 4
    lr: float = 0.003
    lr_decay_epochs: Tuple[int, ...] = (40, 60, 80, 90)
    lr_decay_factor: float = 0.3
    ema_alpha: float = 0.99
    tau_obj: float = 0.6
    tau_obj_strict: float = 0.9
    tau_cls: float = 0.9
    tau_iou: float = 0.25
    delta: float = 1.0
    m0: int = 128
    w_threshold: float = 0.0
    lambda_u: float = 1.0
    lambda_f: float = 1.0
    sampling_mode: str = "HLS"
    geometry_mode: str = "LCD"
    gate_source: str = "teacher"
    chamfer_reduction: str = "mean"
    n_points: int = 1024
    n_seeds: int = 128
    n_proposals: int = 16
    num_classes: int = 6
    knn: int = 16
    cluster_radius: float = 1.0
    max_inserts: int = 4
    placement_attempts: int = 10
    room_extent: float = 8.0
    stats_momentum: float = 0.95
    r_pos: float = 0.3
    r_neg: float = 0.6
    r_vote: float = 1.0
    nms_iou: float = 0.25
    collision_objectness: float = 0.5
    checkpoint_every: int = 10
    seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("tau_obj", "tau_obj_strict", "tau_cls", "tau_iou", "w_threshold",
                     "ema_alpha", "nms_iou", "collision_objectness", "stats_momentum"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.n_aug > self.epochs_semi:
            raise ConfigError(f"n_aug ({self.n_aug}) exceeds epochs_semi ({self.epochs_semi})")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be at least 1")
        if min(self.epochs_pretrain, self.epochs_semi, self.n_aug) < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.m0 < 1 or self.max_inserts < 0 or self.placement_attempts < 1:
            raise ConfigError("m0, max_inserts and placement_attempts are out of range")
        if self.n_proposals > self.n_seeds or self.n_seeds > self.n_points:
            raise ConfigError("need n_proposals <= n_seeds <= n_points")
        if self.knn < 1 or self.knn > self.n_points:
            raise ConfigError(f"knn must be in [1, n_points], got {self.knn}")
        if self.lr <= 0 or self.delta <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("lr, delta and lr_decay_factor must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")
        choices = {"sampling_mode": SAMPLING_CHOICES, "geometry_mode": GEOMETRY_CHOICES,
                   "gate_source": GATE_CHOICES, "chamfer_reduction": CHAMFER_REDUCTIONS}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(self.n_points, self.n_seeds, self.n_proposals, self.num_classes,
                          self.knn, self.cluster_radius)

    @property
    def feature_matching_enabled(self) -> bool:
        return self.geometry_mode != "off" and self.lambda_f > 0

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return data

    def config_hash(self) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)

    def baseline(self) -> "TrainerConfig":
        return self.replace(sampling_mode="off", geometry_mode="off")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 0-based epoch of the current stage."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops


def _coerce(name: str, raw: str, kind: Any, line: int) -> Any:
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if name == "lr_decay_epochs":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"line {line}: bad value {raw!r} for {name}") from None


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainerConfig)}


class RunSettings:
    """A flat ``key = value`` run file: trainer fields plus input/output paths."""

    def __init__(self, config: Optional[TrainerConfig] = None,
                 paths: Optional[Dict[str, str]] = None, source: Optional[str] = None):
        self.config = config or TrainerConfig()
        self.paths: Dict[str, str] = dict(paths or {})
        self.source = source

    @classmethod
    def load(cls, path: str) -> "RunSettings":
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        base = os.path.dirname(os.path.abspath(path))
        values: Dict[str, Any] = {}
        paths: Dict[str, str] = {}
        with open(path, "r", encoding="utf-8") as f:
            for number, raw_line in enumerate(f, start=1):
                text = raw_line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}: line {number}: expected key = value")
                key, value = (part.strip() for part in text.split("=", 1))
                if key in PATH_KEYS:
                    paths[key] = os.path.normpath(os.path.join(base, value))
                elif key in _FIELD_TYPES:
                    values[key] = _coerce(key, value, _FIELD_TYPES[key], number)
                else:
                    raise ConfigError(f"{path}: line {number}: unknown key {key!r}")
        try:
            config = TrainerConfig(**values)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from None
        logger.debug("loaded %d settings and %d paths from %s", len(values), len(paths), path)
        return cls(config, paths, path)

    def path(self, key: str) -> Optional[str]:
        return self.paths.get(key)

    def require_path(self, key: str) -> str:
        value = self.paths.get(key)
        if not value:
            raise ConfigError(f"missing required path {key!r}")
        if key != "out_dir" and not os.path.exists(value):
            raise ConfigError(f"{key} does not exist: {value}")
        return value

    def with_overrides(self, **changes) -> "RunSettings":
        changes = {k: v for k, v in changes.items() if v is not None}
        return RunSettings(self.config.replace(**changes), self.paths, self.source)

    def lines(self) -> List[str]:
        out = []
        for key in PATH_KEYS:
            if key in self.paths:
                out.append(f"{key} = {self.paths[key]}")
        for key, value in self.config.to_dict().items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            out.append(f"{key} = {value}")
        return out

    def save(self, path: str):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(self.lines()) + "\n")
