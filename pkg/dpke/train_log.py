"""
Train log module for storing and retrieving per-step training records.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional

import numpy as np

from .errors import DatasetFormatError
from .ssl import LossBreakdown

logger = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "step", "loss_total", "loss_obj", "loss_cls", "loss_center",
              "loss_size", "loss_vote", "loss_iou", "loss_pseudo", "loss_feat", "n_pseudo",
              "n_gated", "n_inserted", "frac_strong", "frac_weak", "frac_invalid"]

_LOSS_COLUMNS = {
    "loss_total": "total", "loss_obj": "objectness", "loss_cls": "cls",
    "loss_center": "center", "loss_size": "size", "loss_vote": "vote",
    "loss_iou": "iou_head", "loss_pseudo": "pseudo", "loss_feat": "feature_matching",
}


@dataclass
class StepRecord:
    """One optimizer step."""

    epoch: int
    step: int
    losses: LossBreakdown
    n_pseudo: int = 0
    n_gated: int = 0
    n_inserted: int = 0
    frac_strong: float = 0.0
    frac_weak: float = 0.0
    frac_invalid: float = 0.0

    def to_row(self) -> List[str]:
        row = [str(self.epoch), str(self.step)]
        row += [repr(float(getattr(self.losses, _LOSS_COLUMNS[c]))) for c in CSV_HEADER[2:11]]
        row += [str(self.n_pseudo), str(self.n_gated), str(self.n_inserted)]
        row += [repr(float(x)) for x in (self.frac_strong, self.frac_weak, self.frac_invalid)]
        return row

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "StepRecord":
        losses = LossBreakdown(**{field: float(row[column])
                                  for column, field in _LOSS_COLUMNS.items()})
        return cls(int(row["epoch"]), int(row["step"]), losses, int(row["n_pseudo"]),
                   int(row["n_gated"]), int(row["n_inserted"]), float(row["frac_strong"]),
                   float(row["frac_weak"]), float(row["frac_invalid"]))


@dataclass
class EpochSummary:
    epoch: int
    steps: int
    mean_total: float
    n_pseudo: int
    n_gated: int
    n_inserted: int


class TrainLog:
    """Append-only list of step records with CSV persistence."""

    def __init__(self, records: Optional[List[StepRecord]] = None):
        self._records: List[StepRecord] = list(records or [])

    def append(self, record: StepRecord):
        if self._records and record.step <= self._records[-1].step:
            raise ValueError(f"step {record.step} does not follow {self._records[-1].step}")
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[StepRecord]:
        return iter(list(self._records))

    @property
    def records(self) -> List[StepRecord]:
        return list(self._records)

    @property
    def next_step(self) -> int:
        return self._records[-1].step + 1 if self._records else 0

    def for_epoch(self, epoch: int) -> List[StepRecord]:
        return [r for r in self._records if r.epoch == epoch]

    def epochs(self) -> List[int]:
        return sorted(set(r.epoch for r in self._records))

    def summarize_epoch(self, epoch: int) -> Optional[EpochSummary]:
        rows = self.for_epoch(epoch)
        if not rows:
            return None
        return EpochSummary(epoch, len(rows),
                            float(np.mean([r.losses.total for r in rows])),
                            sum(r.n_pseudo for r in rows), sum(r.n_gated for r in rows),
                            sum(r.n_inserted for r in rows))

    def summaries(self) -> List[EpochSummary]:
        return [self.summarize_epoch(e) for e in self.epochs()]

    def save(self, path: str):
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for record in self._records:
                writer.writerow(record.to_row())
        logger.debug("wrote %d log rows to %s", len(self._records), path)

    @classmethod
    def load(cls, path: str) -> "TrainLog":
        log = cls()
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != CSV_HEADER:
                raise DatasetFormatError(path, 1, "unexpected train log header")
            for line, row in enumerate(reader, start=2):
                try:
                    log.append(StepRecord.from_row(row))
                except (KeyError, TypeError, ValueError) as e:
                    raise DatasetFormatError(path, line, str(e)) from None
        return log
