"""
Error types raised across the dpke package.
"""

from typing import Dict, Optional


class DpkeError(Exception):
    """Base class for every error the package raises on purpose."""


class InvalidArgumentError(DpkeError, ValueError):
    """A kernel or model precondition was violated."""


class SceneGenerationError(DpkeError):
    """Objects could not be placed into a synthetic scene."""

    def __init__(self, seed: int, message: str):
        super().__init__(f"scene generation failed for seed {seed}: {message}")
        self.seed = seed


class SplitError(DpkeError):
    """A labeled/unlabeled split cannot satisfy class coverage."""


class DatasetFormatError(DpkeError):
    """A dataset or split file could not be parsed."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class CheckpointFormatError(DpkeError):
    """A checkpoint container is truncated or has a bad header."""


class ConfigError(DpkeError):
    """A run configuration file holds an unknown key or a bad value."""


class OutputExistsError(DpkeError):
    """Output already exists and overwriting was not requested."""


class TrainingDivergenceError(DpkeError):
    """Training produced a non-finite loss, parameter or model output."""

    def __init__(self, stage: str, epoch: int, step: int,
                 losses: Optional[Dict[str, float]] = None, what: str = "loss"):
        losses = losses or {}
        bad = ", ".join(f"{k}={v}" for k, v in losses.items())
        super().__init__(f"non-finite {what} in {stage} at epoch {epoch}, step {step}"
                         + (f" ({bad})" if bad else ""))
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.losses = losses
        self.what = what
