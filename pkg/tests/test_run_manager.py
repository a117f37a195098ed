import os
import tempfile

import pytest

from dpke.errors import OutputExistsError
from dpke.run_manager import RunManager, prepare_output_dir
from dpke.settings import TrainerConfig


def test_create_and_reopen_run():
    with tempfile.TemporaryDirectory() as home:
        out = os.path.join(home, "run")
        run = RunManager(out)
        assert os.path.isdir(out)
        config = TrainerConfig(tau_obj=0.5)
        run.write_config(config, {"dataset": "/data/dataset.jsonl"}, {"note": "smoke"})
        payload = run.read_config()
        assert payload["config_hash"] == config.config_hash()
        assert payload["config"]["tau_obj"] == 0.5
        assert payload["paths"] == {"dataset": "/data/dataset.jsonl"}
        assert payload["note"] == "smoke"
        assert run.artifacts() == ["config.json"]

        with pytest.raises(OutputExistsError):
            RunManager(out)
        again = RunManager(out, force=True)
        assert again.read_config() == payload
        assert RunManager(out, create=False).student_ckpt == os.path.join(out, "student.ckpt")


def test_artifact_names():
    with tempfile.TemporaryDirectory() as home:
        run = RunManager(home, force=True)
        assert os.path.basename(run.epoch_ckpt(10)) == "epoch_0010.ckpt"
        assert os.path.basename(run.train_log) == "train_log.csv"
        assert os.path.basename(run.eval_csv) == "eval.csv"
        assert RunManager(os.path.join(home, "empty"), create=False).read_config() is None


def test_ablation_cells_are_named_by_row_seed_and_hash():
    config = TrainerConfig(sampling_mode="uniform", geometry_mode="off")
    cell_id = RunManager.cell_id("b", 2, config)
    assert cell_id == f"b-2-{config.config_hash()}"
    with tempfile.TemporaryDirectory() as home:
        run = RunManager(os.path.join(home, "ablate"))
        cell = run.cell("b", 2, config)
        assert cell.out_dir == os.path.join(run.out_dir, cell_id)
        assert os.path.isdir(cell.out_dir)


def test_output_dir_rules():
    with tempfile.TemporaryDirectory() as home:
        target = os.path.join(home, "fresh")
        assert prepare_output_dir(target) == target
        prepare_output_dir(target)
        with open(os.path.join(target, "x"), "w") as f:
            f.write("x")
        with pytest.raises(OutputExistsError):
            prepare_output_dir(target)
        prepare_output_dir(target, force=True)
        with pytest.raises(OutputExistsError):
            prepare_output_dir(os.path.join(target, "x"), force=True)
