"""
Run manager module for organizing output directories and their artifacts.
"""

import json
import logging
import os
from typing import Dict, List, Optional

from .errors import OutputExistsError
from .settings import RunSettings, TrainerConfig

logger = logging.getLogger(__name__)

PRETRAINED_CKPT = "pretrained.ckpt"
STUDENT_CKPT = "student.ckpt"
TEACHER_CKPT = "teacher.ckpt"
TRAIN_LOG = "train_log.csv"
PRETRAIN_LOG = "pretrain_log.csv"
EVAL_CSV = "eval.csv"
CONFIG_JSON = "config.json"
RUN_CFG = "run.cfg"


def prepare_output_dir(path: str, force: bool = False) -> str:
    """Create ``path``; a non-empty existing directory needs ``force``."""
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise OutputExistsError(f"{path} is not empty (use --force to overwrite)")
    if os.path.exists(path) and not os.path.isdir(path):
        raise OutputExistsError(f"{path} exists and is not a directory")
    os.makedirs(path, exist_ok=True)
    return path


class RunManager:
    """Owns one output directory and the canonical artifact paths inside it."""

    def __init__(self, out_dir: str, force: bool = False, create: bool = True):
        self.out_dir = os.path.abspath(out_dir)
        self.force = force
        if create:
            prepare_output_dir(self.out_dir, force)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    @property
    def pretrained_ckpt(self) -> str:
        return self.path(PRETRAINED_CKPT)

    @property
    def student_ckpt(self) -> str:
        return self.path(STUDENT_CKPT)

    @property
    def teacher_ckpt(self) -> str:
        return self.path(TEACHER_CKPT)

    @property
    def train_log(self) -> str:
        return self.path(TRAIN_LOG)

    @property
    def pretrain_log(self) -> str:
        return self.path(PRETRAIN_LOG)

    @property
    def eval_csv(self) -> str:
        return self.path(EVAL_CSV)

    @property
    def run_cfg(self) -> str:
        return self.path(RUN_CFG)

    def epoch_ckpt(self, epoch: int) -> str:
        return self.path(f"epoch_{epoch:04d}.ckpt")

    @staticmethod
    def cell_id(row: str, split_seed: int, config: TrainerConfig) -> str:
        return f"{row}-{split_seed}-{config.config_hash()}"

    def cell(self, row: str, split_seed: int, config: TrainerConfig) -> "RunManager":
        """Sub-run for one ablation cell; reruns overwrite only under ``force``."""
        return RunManager(self.path(self.cell_id(row, split_seed, config)), self.force)

    def write_config(self, config: TrainerConfig, paths: Optional[Dict[str, str]] = None,
                     extra: Optional[Dict] = None) -> str:
        payload = {
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "paths": dict(paths or {}),
        }
        payload.update(extra or {})
        target = self.path(CONFIG_JSON)
        with open(target, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        logger.debug("wrote %s", target)
        return target

    def write_settings(self, settings: RunSettings) -> str:
        """Save the resolved run file next to the artifacts."""
        settings.save(self.run_cfg)
        logger.debug("wrote %s", self.run_cfg)
        return self.run_cfg

    def read_config(self) -> Optional[Dict]:
        target = self.path(CONFIG_JSON)
        if not os.path.exists(target):
            return None
        with open(target, "r", encoding="utf-8") as f:
            return json.load(f)

    def artifacts(self) -> List[str]:
        """Files currently in the run directory, sorted."""
        return sorted(name for name in os.listdir(self.out_dir)
                      if os.path.isfile(self.path(name)))
