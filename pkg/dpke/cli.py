"""
Command-line interface: data generation, pretraining, semi-supervised
training, evaluation, ablation sweeps and supervision statistics.
"""

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .augment import build_proposal_bank, weak_augment
from .detector import ModelParams, gradient_check, load_checkpoint, save_checkpoint
from .errors import ConfigError, DpkeError
from .eval import (EvalResult, evaluate, predict_detections, supervision_stats,
                   write_eval_csv)
from .plots import per_class_ap, supervision_distribution, threshold_sweep
from .run_manager import RunManager, prepare_output_dir
from .settings import RunSettings, TrainerConfig
from .ssl import LossWeights
from .synthdata import (DEFAULT_CLASSES, DatasetSplit, GeneratorConfig, Scene,
                        generate_dataset, load_dataset, split_filename, write_splits)
from .train_log import TrainLog
from .trainer import batch_loss_and_grads, prepare_scene, pretrain, train_semi

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

SPLIT_RATIOS = (0.05, 0.1, 0.2, 1.0)
SPLIT_SEEDS = (0, 1, 2)
STATS_THRESHOLDS = (0.5, 0.6, 0.7)
CLASS_NAMES = tuple(c.name for c in DEFAULT_CLASSES)

# Ablation rows: label -> (sampling_mode, geometry_mode, extra overrides).
ABLATION_GRID: Dict[str, Tuple[str, str, Dict]] = {
    "a": ("off", "off", {}),
    "b": ("uniform", "off", {}),
    "c": ("HLS", "off", {}),
    "d": ("uniform", "LCD", {}),
    "e": ("HLS", "LCD", {}),
    "g": ("off", "constant", {}),
    "h": ("off", "LCD", {}),
    "i": ("HLS", "constant", {}),
    "LLS": ("LLS", "LCD", {}),
    "HCD": ("HLS", "HCD", {}),
    "tau0.5": ("HLS", "LCD", {"tau_obj": 0.5}),
    "tau0.7": ("HLS", "LCD", {"tau_obj": 0.7}),
    "a0.5": ("off", "off", {"tau_obj_strict": 0.5}),
    "a0.6": ("off", "off", {"tau_obj_strict": 0.6}),
    "a0.7": ("off", "off", {"tau_obj_strict": 0.7}),
}
PER_CLASS_ROWS = ("a", "b", "c")
# Threshold sweep curves: the full method moves its feature-matching gate, the
# baseline moves its strict pseudo-label objectness threshold.
SWEEP_CURVES: Dict[str, Tuple[Tuple[str, float], ...]] = {
    "full": (("tau0.5", 0.5), ("e", 0.6), ("tau0.7", 0.7)),
    "baseline": (("a0.5", 0.5), ("a0.6", 0.6), ("a0.7", 0.7)),
}
ABLATION_HEADER = ["row", "sampling_mode", "geometry_mode", "tau_obj", "tau_obj_strict",
                   "map25_mean", "map25_std", "map50_mean", "map50_std", "n_seeds"]


def configure_logging():
    """Install one stderr handler at the level named by ``DPKE_LOG``."""
    name = os.environ.get("DPKE_LOG", "info").strip().lower()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(LOG_LEVELS.get(name, logging.INFO))
    if name not in LOG_LEVELS:
        logger.warning("unknown DPKE_LOG value %r, using info", name)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _settings(args) -> RunSettings:
    settings = RunSettings.load(args.config) if args.config else RunSettings()
    settings = settings.with_overrides(seed=args.seed)
    if args.out:
        settings.paths["out_dir"] = os.path.abspath(args.out)
    return settings


def _out_dir(settings: RunSettings) -> str:
    out = settings.path("out_dir")
    if not out:
        raise ConfigError("no output directory (set out_dir or pass --out)")
    return out


def _load_split(settings: RunSettings, split_path: Optional[str] = None
                ) -> Tuple[List[Scene], List[Scene]]:
    scenes = load_dataset(settings.require_path("dataset"))
    split = DatasetSplit.load(split_path or settings.require_path("split"))
    return split.apply(scenes)


def _eval_scenes(settings: RunSettings, labeled: Sequence[Scene]) -> List[Scene]:
    val = settings.path("val_dataset")
    if val:
        return load_dataset(settings.require_path("val_dataset"))
    logger.warning("no val_dataset configured; evaluating on the labeled training scenes")
    return list(labeled)


def _print_paths(paths: Sequence[str]):
    for path in paths:
        print(path)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = prepare_output_dir(args.out or "data", args.force)
    spec = GeneratorConfig()
    dataset_path = os.path.join(out, "dataset.jsonl")
    scenes = generate_dataset(spec, args.scenes, args.seed, dataset_path, jobs=args.jobs)
    val_seed = int(np.random.SeedSequence([args.seed, 1]).generate_state(1)[0])
    val_path = os.path.join(out, "val.jsonl")
    generate_dataset(spec, args.val_scenes, val_seed, val_path, prefix="val", jobs=args.jobs)
    split_paths = write_splits(out, scenes, SPLIT_RATIOS, SPLIT_SEEDS)
    _print_paths([dataset_path, val_path] + split_paths)
    return 0


def _pretrain_into(run: RunManager, config: TrainerConfig, labeled: Sequence[Scene],
                   jobs: int) -> ModelParams:
    log = TrainLog()
    params = pretrain(config, labeled, log, jobs)
    save_checkpoint(run.pretrained_ckpt, params)
    log.save(run.pretrain_log)
    return params


def cmd_pretrain(args) -> int:
    settings = _settings(args)
    labeled, _ = _load_split(settings)
    run = RunManager(_out_dir(settings), args.force)
    run.write_config(settings.config, settings.paths)
    run.write_settings(settings)
    _pretrain_into(run, settings.config, labeled, args.jobs)
    _print_paths([run.pretrained_ckpt, run.pretrain_log])
    return 0


def _train_run(run: RunManager, config: TrainerConfig, labeled: Sequence[Scene],
               unlabeled: Sequence[Scene], eval_scenes: Sequence[Scene],
               pretrained: Optional[ModelParams], jobs: int) -> EvalResult:
    if pretrained is None:
        pretrained = _pretrain_into(run, config, labeled, jobs)
    bank = build_proposal_bank(labeled, config.num_classes) \
        if config.sampling_mode != "off" else None
    student, teacher, log = train_semi(config, labeled, unlabeled, pretrained, bank,
                                       run.epoch_ckpt, jobs)
    save_checkpoint(run.student_ckpt, student)
    save_checkpoint(run.teacher_ckpt, teacher)
    log.save(run.train_log)
    result = evaluate(student, eval_scenes, config.n_points, config.seed, config.nms_iou)
    write_eval_csv(run.eval_csv, result, CLASS_NAMES[:config.num_classes])
    logger.info("mAP@0.25 %.4f, mAP@0.5 %.4f", result.map25, result.map50)
    return result


def cmd_train(args) -> int:
    settings = _settings(args)
    labeled, unlabeled = _load_split(settings)
    run = RunManager(_out_dir(settings), args.force)
    run.write_config(settings.config, settings.paths)
    run.write_settings(settings)
    pretrained = None
    if settings.path("pretrained"):
        pretrained = load_checkpoint(settings.require_path("pretrained"))
    _train_run(run, settings.config, labeled, unlabeled, _eval_scenes(settings, labeled),
               pretrained, args.jobs)
    _print_paths([run.student_ckpt, run.teacher_ckpt, run.train_log, run.eval_csv])
    return 0


def cmd_eval(args) -> int:
    settings = _settings(args)
    checkpoint = args.checkpoint or settings.require_path("pretrained")
    params = load_checkpoint(checkpoint)
    if settings.path("val_dataset"):
        scenes = load_dataset(settings.require_path("val_dataset"))
    else:
        scenes = load_dataset(settings.require_path("dataset"))
    run = RunManager(_out_dir(settings), args.force)
    config = settings.config
    result = evaluate(params, scenes, params.arch.n_points, config.seed, config.nms_iou)
    write_eval_csv(run.eval_csv, result, CLASS_NAMES[:params.arch.num_classes])
    _print_paths([run.eval_csv])
    return 0


def _ablation_config(base: TrainerConfig, row: str, split_seed: int) -> TrainerConfig:
    sampling, geometry, extra = ABLATION_GRID[row]
    return base.replace(sampling_mode=sampling, geometry_mode=geometry, split_seed=split_seed,
                        **extra)


def _pretrain_cell(task) -> str:
    config, dataset, split_path, out_dir, force = task
    labeled, _ = DatasetSplit.load(split_path).apply(load_dataset(dataset))
    run = RunManager(out_dir, force)
    _pretrain_into(run, config, labeled, 1)
    return run.pretrained_ckpt


def _ablation_cell(task) -> Tuple[str, int, List[float], List[float], float, float]:
    row, config, dataset, val_dataset, split_path, pretrained_path, cell_dir = task
    labeled, unlabeled = DatasetSplit.load(split_path).apply(load_dataset(dataset))
    eval_scenes = load_dataset(val_dataset) if val_dataset else labeled
    run = RunManager(cell_dir, force=True, create=False)
    paths = {"dataset": dataset, "split": split_path, "pretrained": pretrained_path}
    if val_dataset:
        paths["val_dataset"] = val_dataset
    run.write_config(config, paths)
    run.write_settings(RunSettings(config, paths))
    result = _train_run(run, config, labeled, unlabeled, eval_scenes,
                        load_checkpoint(pretrained_path), 1)
    ap25 = [result.ap[0.25].get(c, 0.0) for c in range(config.num_classes)]
    ap50 = [result.ap[0.5].get(c, 0.0) for c in range(config.num_classes)]
    return row, config.split_seed, ap25, ap50, result.map25, result.map50


def _run_pool(fn, tasks: List, jobs: int, desc: str) -> List:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(tqdm(pool.map(fn, tasks), total=len(tasks), desc=desc, disable=None))
    return [fn(t) for t in tqdm(tasks, desc=desc, disable=None)]


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def cmd_ablate(args) -> int:
    settings = _settings(args)
    base = settings.config
    dataset = settings.require_path("dataset")
    val_dataset = settings.require_path("val_dataset") if settings.path("val_dataset") else None
    data_dir = os.path.dirname(dataset)
    rows = args.rows or list(ABLATION_GRID)
    unknown = [r for r in rows if r not in ABLATION_GRID]
    if unknown:
        raise ConfigError(f"unknown ablation rows: {unknown}")
    split_paths = {s: os.path.join(data_dir, split_filename(args.ratio, s))
                   for s in args.split_seeds}
    for path in split_paths.values():
        if not os.path.exists(path):
            raise ConfigError(f"split file not found: {path}")

    run = RunManager(_out_dir(settings), args.force)
    run.write_config(base, settings.paths, {"rows": rows, "ratio": args.ratio,
                                            "split_seeds": list(args.split_seeds)})
    pre_tasks = [(base.replace(split_seed=s), dataset, split_paths[s],
                  run.path(f"pretrain-{s}"), args.force) for s in args.split_seeds]
    pretrained = dict(zip(args.split_seeds,
                          _run_pool(_pretrain_cell, pre_tasks, args.jobs, "pretrain")))

    tasks = []
    for row in rows:
        for s in args.split_seeds:
            config = _ablation_config(base, row, s)
            cell = run.cell(row, s, config)
            tasks.append((row, config, dataset, val_dataset, split_paths[s], pretrained[s],
                          cell.out_dir))
    results = _run_pool(_ablation_cell, tasks, args.jobs, "ablation")

    by_row: Dict[str, List] = {row: [] for row in rows}
    for row, _, ap25, ap50, m25, m50 in results:
        by_row[row].append((ap25, ap50, m25, m50))
    table = []
    for row in rows:
        sampling, geometry, extra = ABLATION_GRID[row]
        m25, s25 = _mean_std([r[2] for r in by_row[row]])
        m50, s50 = _mean_std([r[3] for r in by_row[row]])
        table.append([row, sampling, geometry, extra.get("tau_obj", base.tau_obj),
                      extra.get("tau_obj_strict", base.tau_obj_strict),
                      f"{m25:.6f}", f"{s25:.6f}", f"{m50:.6f}", f"{s50:.6f}",
                      len(by_row[row])])
    table_path = run.path("ablation.csv")
    _write_csv(table_path, ABLATION_HEADER, table)
    outputs = [table_path]

    curves = {}
    for label, points in SWEEP_CURVES.items():
        present = [(tau, _mean_std([r[2] for r in by_row[row]])) for row, tau in points
                   if row in by_row]
        if present:
            curves[label] = present
    if curves:
        path = run.path("threshold_sweep.svg")
        threshold_sweep(path, curves)
        outputs.append(path)
    bars = {row: np.mean([r[0] for r in by_row[row]], axis=0)
            for row in PER_CLASS_ROWS if row in by_row}
    if bars:
        path = run.path("per_class_ap.svg")
        per_class_ap(path, CLASS_NAMES[:base.num_classes], bars)
        outputs.append(path)
    _print_paths(outputs)
    return 0


def _gradcheck(params: ModelParams, labeled: Sequence[Scene], unlabeled: Sequence[Scene],
               config: TrainerConfig, n_scenes: int) -> List[List]:
    # The IoU head feeds nothing back to the trunk and the geometry weight is a
    # constant, so both are held out of the comparison.
    weights = LossWeights(iou_head=0.0)
    if config.feature_matching_enabled:
        config = config.replace(geometry_mode="constant")
    rows = []
    for i in range(n_scenes):
        lab = [prepare_scene(labeled[i % len(labeled)], 1000 + i, config)]
        unl = [prepare_scene(unlabeled[i % len(unlabeled)], 2000 + i, config)] if unlabeled else []
        first = batch_loss_and_grads(params, params, lab, unl, config, weights=weights)

        def loss_and_grads(p, lab=lab, unl=unl, fps=first.fps):
            result = batch_loss_and_grads(p, params, lab, unl, config, fps, weights)
            return result.breakdown.total, result.grads

        report = gradient_check(loss_and_grads, params, num_checks=20, seed=i)
        rows.append([i, f"{report['max_rel_error']:.3e}", f"{report['mean_rel_error']:.3e}"])
        logger.info("gradient check scene %d: max relative error %.3e", i,
                    report["max_rel_error"])
    return rows


def cmd_stats(args) -> int:
    settings = _settings(args)
    config = settings.config
    checkpoint = args.checkpoint or settings.require_path("pretrained")
    teacher = load_checkpoint(checkpoint)
    labeled, unlabeled = _load_split(settings)
    if not unlabeled:
        raise ConfigError("the split has no unlabeled scenes")
    run = RunManager(_out_dir(settings), args.force)

    rng = np.random.default_rng([config.seed, 5])
    per_scene = []
    for scene in unlabeled:
        cloud = weak_augment(scene, teacher.arch.n_points, rng).points
        per_scene.append((predict_detections(teacher, cloud, rng, config.nms_iou),
                          scene.withheld))
    rows, chart = [], {}
    for tau in STATS_THRESHOLDS:
        counts, total = np.zeros(4), 0
        for dets, gts in per_scene:
            s = supervision_stats(dets, gts, tau, config.tau_obj_strict, config.tau_cls,
                                  config.tau_iou)
            counts += np.array(s.as_row()) * s.total
            total += s.total
        fractions = counts / total if total else np.zeros(4)
        rows.append([tau] + [f"{f:.6f}" for f in fractions] + [total])
        chart[f"tau={tau:g}"] = fractions
    csv_path = run.path("supervision_stats.csv")
    _write_csv(csv_path, ["tau_obj", "frac_strong", "frac_weak", "frac_below", "frac_invalid",
                          "n_detections"], rows)
    svg_path = run.path("supervision_stats.svg")
    supervision_distribution(svg_path, chart)
    outputs = [csv_path, svg_path]
    if args.gradcheck:
        grad_path = run.path("gradcheck.csv")
        _write_csv(grad_path, ["scene", "max_rel_error", "mean_rel_error"],
                   _gradcheck(teacher, labeled, unlabeled, config.replace(
                       n_points=teacher.arch.n_points, n_seeds=teacher.arch.n_seeds,
                       n_proposals=teacher.arch.n_proposals, knn=teacher.arch.knn,
                       cluster_radius=teacher.arch.cluster_radius), args.gradcheck))
        outputs.append(grad_path)
    _print_paths(outputs)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file (key = value)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=_non_negative, default=None, help="master seed")
    common.add_argument("--jobs", type=_positive, default=1, help="parallel workers")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(
        prog="dpke", description="Semi-supervised 3D detection on synthetic indoor scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a dataset and its splits")
    p.add_argument("--scenes", type=_positive, required=True, help="number of training scenes")
    p.add_argument("--val-scenes", type=_non_negative, default=50,
                   help="number of held-out scenes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="supervised pretraining")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="semi-supervised training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--ratio", type=float, default=0.1, help="label ratio of the splits")
    p.add_argument("--split-seeds", type=_non_negative, nargs="+", default=list(SPLIT_SEEDS),
                   help="split seeds to average over")
    p.add_argument("--rows", nargs="+", choices=list(ABLATION_GRID), help="subset of rows")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", parents=[common], help="supervision distribution statistics")
    p.add_argument("--checkpoint", metavar="PATH", help="teacher checkpoint")
    p.add_argument("--gradcheck", type=_non_negative, default=0, metavar="N",
                   help="also run gradient checks on N scenes")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()
    if args.command == "gen-data" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except DpkeError as e:
        print(f"dpke: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\ninterrupted", file=sys.stderr)
        return 130
