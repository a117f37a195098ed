"""
Synthetic indoor scenes: class catalogue, deterministic scene generator,
JSON-lines dataset files and labeled/unlabeled splits.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .errors import DatasetFormatError, InvalidArgumentError, SceneGenerationError, SplitError
from .geometry import Aabb, aabb_overlaps, as_points

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = ("box_shell", "table_like", "thin_panel", "cylinder_shell")


@dataclass(frozen=True)
class ClassSpec:
    """One object category of the synthetic world."""

    class_id: int
    name: str
    shape_family: str
    size_range: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]
    frequency_weight: float
    surface_noise: float = 0.01


# Frequencies decay roughly geometrically; "window" is rare and noisy on purpose.
DEFAULT_CLASSES: Tuple[ClassSpec, ...] = (
    ClassSpec(0, "cabinet", "box_shell", ((0.8, 1.4), (0.5, 0.9), (0.8, 1.6)), 8.0, 0.01),
    ClassSpec(1, "table", "table_like", ((1.0, 1.8), (0.7, 1.2), (0.7, 0.9)), 5.0, 0.01),
    ClassSpec(2, "door", "thin_panel", ((0.8, 1.2), (0.06, 0.12), (1.6, 2.1)), 3.0, 0.01),
    ClassSpec(3, "bin", "cylinder_shell", ((0.3, 0.6), (0.3, 0.6), (0.4, 0.8)), 2.0, 0.01),
    ClassSpec(4, "sofa", "box_shell", ((1.6, 2.2), (0.8, 1.0), (0.6, 0.9)), 1.3, 0.015),
    ClassSpec(5, "window", "thin_panel", ((0.6, 1.4), (0.05, 0.1), (0.6, 1.2)), 0.8, 0.06),
)


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the scene generator."""

    classes: Tuple[ClassSpec, ...] = DEFAULT_CLASSES
    room_extent: float = 8.0
    objects_per_scene: Tuple[int, int] = (4, 12)
    points_per_object: Tuple[int, int] = (256, 1024)
    min_scene_points: int = 2048
    floor_points: int = 1024
    wall_points: int = 256
    wall_height: float = 3.0
    placement_retries: int = 500

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self):
        if len(self.classes) < 2:
            raise InvalidArgumentError("the generator needs at least two classes")
        weights = np.array([c.frequency_weight for c in self.classes])
        if np.any(weights <= 0) or weights.sum() <= 0:
            raise InvalidArgumentError("class frequency weights must be positive")
        for spec in self.classes:
            if spec.shape_family not in SHAPE_FAMILIES:
                raise InvalidArgumentError(f"unknown shape family {spec.shape_family!r}")
            lows = np.array([lo for lo, _ in spec.size_range])
            highs = np.array([hi for _, hi in spec.size_range])
            if np.any(lows <= 0) or np.any(highs < lows):
                raise InvalidArgumentError(f"bad size range for class {spec.name}")
            if np.max(highs) >= self.room_extent:
                raise InvalidArgumentError(
                    f"class {spec.name} does not fit a room of extent {self.room_extent}")


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: Aabb


@dataclass
class Scene:
    """A point cloud plus its box annotations.

    Unlabeled scenes carry no usable annotations; the ground truth they were
    generated with is kept in ``withheld`` for diagnostics only.
    """

    id: str
    points: np.ndarray
    annotations: List[Annotation] = field(default_factory=list)
    labeled: bool = True
    withheld: List[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.points = as_points(self.points)

    @property
    def boxes(self) -> List[Aabb]:
        return [a.box for a in self.annotations]

    def class_ids(self) -> np.ndarray:
        return np.array([a.class_id for a in self.annotations], dtype=np.int64)

    def ground_truth(self) -> List[Annotation]:
        """Annotations for evaluation, whether or not they are visible to training."""
        return list(self.annotations) if self.labeled else list(self.withheld)

    def with_points(self, points: np.ndarray) -> "Scene":
        return replace(self, points=points, annotations=list(self.annotations),
                       withheld=list(self.withheld))

    def as_unlabeled(self) -> "Scene":
        if not self.labeled:
            return self
        return Scene(self.id, self.points, [], labeled=False, withheld=list(self.annotations))

    def same_as(self, other: "Scene") -> bool:
        """Field-for-field equality, comparing arrays exactly."""
        if self.id != other.id or self.labeled != other.labeled:
            return False
        if not np.array_equal(self.points, other.points):
            return False
        mine = self.annotations + self.withheld
        theirs = other.annotations + other.withheld
        return len(mine) == len(theirs) and all(
            a.class_id == b.class_id and a.box == b.box for a, b in zip(mine, theirs))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _sample_box_shell(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    sx, sy, sz = size
    # top plus four sides, picked by area
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random((n, 3)) * size
    pts = u.copy()
    pts[face == 0, 2] = sz
    pts[face == 1, 1] = 0.0
    pts[face == 2, 1] = sy
    pts[face == 3, 0] = 0.0
    pts[face == 4, 0] = sx
    return pts


def _sample_table(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    sx, sy, sz = size
    slab = min(0.06, 0.1 * sz)
    n_top = int(round(0.7 * n))
    top = rng.random((n_top, 3)) * np.array([sx, sy, slab])
    top[:, 2] += sz - slab
    inset = np.minimum(0.08, 0.2 * np.array([sx, sy]))
    legs_xy = np.array([[inset[0], inset[1]], [sx - inset[0], inset[1]],
                        [inset[0], sy - inset[1]], [sx - inset[0], sy - inset[1]]])
    n_leg = n - n_top
    which = rng.integers(0, 4, size=n_leg)
    legs = np.empty((n_leg, 3))
    legs[:, :2] = legs_xy[which] + rng.normal(0.0, 0.015, size=(n_leg, 2))
    legs[:, 2] = rng.random(n_leg) * (sz - slab)
    return np.concatenate([top, legs], axis=0)


def _sample_cylinder(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    sx, sy, sz = size
    n_top = n // 5
    theta = rng.random(n) * 2 * np.pi
    radial = np.ones(n)
    radial[:n_top] = np.sqrt(rng.random(n_top))
    pts = np.empty((n, 3))
    pts[:, 0] = sx / 2 * (1 + radial * np.cos(theta))
    pts[:, 1] = sy / 2 * (1 + radial * np.sin(theta))
    pts[:, 2] = rng.random(n) * sz
    pts[:n_top, 2] = sz
    return pts


_SURFACE_SAMPLERS = {
    "box_shell": _sample_box_shell,
    "table_like": _sample_table,
    "thin_panel": _sample_box_shell,
    "cylinder_shell": _sample_cylinder,
}


def _sample_object(spec: ClassSpec, box: Aabb, n: int, rng: np.random.Generator) -> np.ndarray:
    local = _SURFACE_SAMPLERS[spec.shape_family](box.size, n, rng)
    local += rng.normal(0.0, spec.surface_noise, size=local.shape)
    np.clip(local, 0.0, box.size, out=local)
    return box.min_corner + local


def _draw_size(spec: ClassSpec, rng: np.random.Generator) -> np.ndarray:
    size = np.array([rng.uniform(lo, hi) for lo, hi in spec.size_range])
    if spec.shape_family == "thin_panel" and rng.random() < 0.5:
        size[[0, 1]] = size[[1, 0]]
    if spec.shape_family == "cylinder_shell":
        size[1] = size[0]
    return size


def layout_objects(spec: GeneratorConfig, rng: np.random.Generator, seed: int) -> List[Annotation]:
    """Draw classes and sizes, then place boxes on the floor without overlaps."""
    weights = np.array([c.frequency_weight for c in spec.classes])
    lo, hi = spec.objects_per_scene
    n_objects = int(rng.integers(lo, hi + 1))
    placed: List[Annotation] = []
    for _ in range(n_objects):
        cls = spec.classes[int(rng.choice(len(spec.classes), p=weights / weights.sum()))]
        size = _draw_size(cls, rng)
        for _attempt in range(spec.placement_retries):
            xy = rng.uniform(size[:2] / 2, spec.room_extent - size[:2] / 2)
            box = Aabb(np.array([xy[0], xy[1], size[2] / 2]), size)
            if not any(aabb_overlaps(box, other.box) for other in placed):
                placed.append(Annotation(cls.class_id, box))
                break
        else:
            raise SceneGenerationError(
                seed, f"could not place object {len(placed) + 1} of {n_objects} "
                      f"after {spec.placement_retries} attempts")
    return placed


def generate_scene(spec: GeneratorConfig, seed: int, scene_id: Optional[str] = None) -> Scene:
    """Generate one scene; equal (spec, seed) always give the same scene."""
    spec.validate()
    rng = np.random.default_rng(seed)
    annotations = layout_objects(spec, rng, seed)
    by_id = {c.class_id: c for c in spec.classes}

    chunks = []
    lo, hi = spec.points_per_object
    for ann in annotations:
        n = int(rng.integers(lo, hi + 1))
        chunks.append(_sample_object(by_id[ann.class_id], ann.box, n, rng))

    extent = spec.room_extent
    n_object_points = sum(len(c) for c in chunks)
    n_floor = max(spec.floor_points,
                  spec.min_scene_points - n_object_points - 2 * spec.wall_points)
    floor = np.column_stack([rng.random((n_floor, 2)) * extent, np.zeros(n_floor)])
    wall_x = np.column_stack([np.zeros(spec.wall_points),
                              rng.random(spec.wall_points) * extent,
                              rng.random(spec.wall_points) * spec.wall_height])
    wall_y = np.column_stack([rng.random(spec.wall_points) * extent,
                              np.zeros(spec.wall_points),
                              rng.random(spec.wall_points) * spec.wall_height])
    points = np.concatenate(chunks + [floor, wall_x, wall_y], axis=0)
    points = points[rng.permutation(len(points))]
    return Scene(scene_id or f"seed_{seed}", points, annotations)


def scene_seeds(seed: int, n_scenes: int) -> List[int]:
    """Independent per-scene seeds derived from one dataset seed."""
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    return [int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for child in children]


def _generate_indexed(args) -> Scene:
    spec, seed, scene_id = args
    return generate_scene(spec, seed, scene_id)


def generate_dataset(spec: GeneratorConfig, n_scenes: int, seed: int,
                     path: Optional[str] = None, prefix: str = "scene",
                     jobs: int = 1) -> List[Scene]:
    """Generate ``n_scenes`` scenes and optionally write them to ``path``."""
    if n_scenes < 0:
        raise InvalidArgumentError("n_scenes must be non-negative")
    spec.validate()
    tasks = [(spec, s, f"{prefix}_{i:05d}") for i, s in enumerate(scene_seeds(seed, n_scenes))]
    if jobs > 1 and n_scenes > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenes = list(tqdm(pool.map(_generate_indexed, tasks), total=n_scenes,
                               desc="generating scenes", disable=None))
    else:
        scenes = [_generate_indexed(t) for t in tqdm(tasks, desc="generating scenes", disable=None)]
    if path is not None:
        write_dataset(path, scenes)
    return scenes


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _fmt_vec(values) -> str:
    return "[" + ",".join(_fmt(v) for v in values) + "]"


def scene_to_line(scene: Scene, extra: Optional[Dict[str, int]] = None) -> str:
    """Serialize one scene as a JSON object on a single line (no newline)."""
    annotations = scene.annotations if scene.labeled else scene.withheld
    boxes = ",".join(
        '{"cls":%d,"c":%s,"s":%s}' % (a.class_id, _fmt_vec(a.box.center), _fmt_vec(a.box.size))
        for a in annotations)
    head = '{"id":' + json.dumps(scene.id, ensure_ascii=False)
    for key, value in (extra or {}).items():
        head += f',"{key}":{int(value)}'
    points = ",".join(_fmt_vec(p) for p in scene.points)
    return head + ',"points":[' + points + '],"boxes":[' + boxes + ']}'


def _scene_from_record(record, path: str, line: int) -> Scene:
    try:
        scene_id = record["id"]
        points = np.asarray(record["points"], dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be triples, got shape {points.shape}")
        annotations = [Annotation(int(b["cls"]), Aabb(b["c"], b["s"])) for b in record["boxes"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(path, line, f"bad scene record: {e}") from e
    if not isinstance(scene_id, str):
        raise DatasetFormatError(path, line, "scene id must be a string")
    return Scene(scene_id, points, annotations)


def write_dataset(path: str, scenes: Iterable[Scene]) -> int:
    """Write scenes as JSON lines; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for scene in scenes:
            f.write(scene_to_line(scene))
            f.write("\n")
            count += 1
    return count


def read_dataset(path: str) -> Iterator[Scene]:
    """Stream scenes from a JSON-lines dataset file."""
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise DatasetFormatError(path, line_no, "truncated record (missing newline)")
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(path, line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(record, dict):
                raise DatasetFormatError(path, line_no, "record is not a JSON object")
            yield _scene_from_record(record, path, line_no)


def load_dataset(path: str) -> List[Scene]:
    return list(read_dataset(path))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    """Disjoint labeled/unlabeled scene ids for one label ratio and split seed."""

    ratio: float
    labeled_ids: List[str]
    unlabeled_ids: List[str]

    def save(self, path: str):
        payload = {"ratio": self.ratio, "labeled": self.labeled_ids,
                   "unlabeled": self.unlabeled_ids}
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, ensure_ascii=False)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "DatasetSplit":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
            return cls(float(payload["ratio"]), list(payload["labeled"]),
                       list(payload["unlabeled"]))
        except json.JSONDecodeError as e:
            raise DatasetFormatError(path, e.lineno, f"invalid JSON: {e.msg}") from e
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(path, 1, f"bad split file: {e}") from e

    def apply(self, scenes: Sequence[Scene]) -> Tuple[List[Scene], List[Scene]]:
        """Partition scenes; unlabeled ones have their annotations withheld."""
        by_id = {s.id: s for s in scenes}
        missing = [i for i in self.labeled_ids + self.unlabeled_ids if i not in by_id]
        if missing:
            raise SplitError(f"split refers to {len(missing)} unknown scenes, e.g. {missing[0]}")
        labeled = [by_id[i] for i in self.labeled_ids]
        unlabeled = [by_id[i].as_unlabeled() for i in self.unlabeled_ids]
        return labeled, unlabeled


def split_filename(ratio: float, split_seed: int) -> str:
    return f"split_{ratio:g}_s{split_seed}.json"


def split_dataset(scenes: Sequence[Scene], ratio: float, split_seed: int,
                  max_attempts: int = 1000) -> DatasetSplit:
    """Draw a class-covering labeled subset of size round(ratio * n)."""
    if not 0.0 < ratio <= 1.0:
        raise InvalidArgumentError(f"ratio must be in (0, 1], got {ratio}")
    n = len(scenes)
    if n == 0:
        return DatasetSplit(ratio, [], [])
    n_labeled = min(n, max(1, int(round(ratio * n))))
    class_sets = [set(s.class_ids().tolist()) for s in scenes]
    all_classes = set().union(*class_sets)

    rng = np.random.default_rng(split_seed)
    for attempt in range(max_attempts):
        chosen = np.sort(rng.permutation(n)[:n_labeled])
        covered = set().union(*(class_sets[i] for i in chosen))
        if covered == all_classes:
            chosen_set = set(chosen.tolist())
            return DatasetSplit(
                ratio,
                [scenes[i].id for i in chosen],
                [scenes[i].id for i in range(n) if i not in chosen_set])
        logger.debug("split attempt %d misses classes %s", attempt, sorted(all_classes - covered))
    raise SplitError(f"no class-covering split with {n_labeled} labeled scenes "
                     f"after {max_attempts} attempts (ratio {ratio}, seed {split_seed})")


def write_splits(dataset_dir: str, scenes: Sequence[Scene], ratios: Sequence[float],
                 split_seeds: Sequence[int]) -> List[str]:
    """Write one split file per (ratio, seed); returns the paths."""
    paths = []
    for ratio in ratios:
        for split_seed in split_seeds:
            path = os.path.join(dataset_dir, split_filename(ratio, split_seed))
            split_dataset(scenes, ratio, split_seed).save(path)
            paths.append(path)
    return paths
