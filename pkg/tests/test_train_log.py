import os
import tempfile

import pytest

from dpke.errors import DatasetFormatError
from dpke.ssl import LossBreakdown
from dpke.train_log import CSV_HEADER, StepRecord, TrainLog


def _record(epoch, step, total=1.0, inserted=0):
    return StepRecord(epoch, step, LossBreakdown(objectness=0.5, pseudo=0.25, total=total),
                      n_pseudo=2, n_gated=3, n_inserted=inserted, frac_strong=0.5,
                      frac_weak=0.25, frac_invalid=0.125)


def test_log_is_append_only_with_increasing_steps():
    log = TrainLog()
    assert log.next_step == 0
    log.append(_record(0, 0))
    log.append(_record(0, 1))
    assert log.next_step == 2
    with pytest.raises(ValueError):
        log.append(_record(1, 1))
    assert len(log) == 2


def test_epoch_summaries():
    log = TrainLog()
    for step, (epoch, total, inserted) in enumerate([(0, 1.0, 2), (0, 3.0, 1), (1, 0.5, 0)]):
        log.append(_record(epoch, step, total, inserted))
    first = log.summarize_epoch(0)
    assert first.steps == 2 and first.mean_total == pytest.approx(2.0)
    assert first.n_inserted == 3 and first.n_pseudo == 4
    assert log.summarize_epoch(5) is None
    assert [s.epoch for s in log.summaries()] == [0, 1]


def test_csv_round_trip_and_header():
    log = TrainLog([_record(0, 0, 1.0 / 3.0), _record(1, 1, 2.0, 4)])
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "train_log.csv")
        log.save(path)
        with open(path, "r", encoding="utf-8") as f:
            assert f.readline().strip().split(",") == CSV_HEADER
        loaded = TrainLog.load(path)
    assert [r.to_row() for r in loaded] == [r.to_row() for r in log]
    assert loaded.records[0].losses.total == 1.0 / 3.0


def test_bad_log_files_are_rejected():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "train_log.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,step\n0,0\n")
        with pytest.raises(DatasetFormatError):
            TrainLog.load(path)
        TrainLog([_record(0, 0)]).save(path)
        with open(path, "a", encoding="utf-8") as f:
            f.write("1,x" + ",0" * (len(CSV_HEADER) - 2) + "\n")
        with pytest.raises(DatasetFormatError) as info:
            TrainLog.load(path)
        assert info.value.line == 3
