import os
import tempfile

import numpy as np
import pytest

from dpke.errors import DatasetFormatError, SplitError
from dpke.geometry import Aabb, aabb_overlaps
from dpke.synthdata import (Annotation, DatasetSplit, Scene, generate_scene, load_dataset,
                            split_dataset, split_filename, write_dataset, write_splits)
from tests.helpers import small_generator, small_scenes


def test_generation_is_deterministic_and_valid():
    spec = small_generator()
    a = generate_scene(spec, 11, "s")
    b = generate_scene(spec, 11, "s")
    assert a.same_as(b)
    assert not a.same_as(generate_scene(spec, 12, "s"))
    assert len(a.points) >= spec.min_scene_points
    boxes = a.boxes
    for i in range(len(boxes)):
        assert boxes[i].min_corner[2] == pytest.approx(0.0)
        assert np.all(boxes[i].min_corner[:2] >= 0)
        assert np.all(boxes[i].max_corner[:2] <= spec.room_extent)
        for j in range(i):
            assert not aabb_overlaps(boxes[i], boxes[j])


def test_dataset_ids_and_file_round_trip():
    scenes = small_scenes(3)
    assert [s.id for s in scenes] == ["scene_00000", "scene_00001", "scene_00002"]
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "d.jsonl")
        assert write_dataset(path, scenes) == 3
        loaded = load_dataset(path)
        assert all(a.same_as(b) for a, b in zip(scenes, loaded))


def test_truncated_dataset_is_rejected():
    scenes = small_scenes(2)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "d.jsonl")
        write_dataset(path, scenes)
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[:-1])
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(path)
        assert info.value.line == 2
        with open(path, "w", encoding="utf-8") as f:
            f.write('{"id": "x", "points": [[0, 0]], "boxes": []}\n')
        with pytest.raises(DatasetFormatError):
            load_dataset(path)


def test_split_is_disjoint_and_covers_classes():
    scenes = small_scenes(12)
    split = split_dataset(scenes, 0.5, 3)
    assert len(split.labeled_ids) == 6
    assert set(split.labeled_ids).isdisjoint(split.unlabeled_ids)
    assert sorted(split.labeled_ids + split.unlabeled_ids) == sorted(s.id for s in scenes)
    every = set().union(*(set(s.class_ids().tolist()) for s in scenes))
    labeled, unlabeled = split.apply(scenes)
    assert set().union(*(set(s.class_ids().tolist()) for s in labeled)) == every
    assert all(not s.labeled and not s.annotations and s.withheld for s in unlabeled)
    assert split_dataset(scenes, 0.5, 3) == split


def _single_class_scene(class_id):
    return Scene(f"only_{class_id}", np.zeros((4, 3)),
                 [Annotation(class_id, Aabb([1, 1, 0.5], [1, 1, 1]))])


def test_split_files():
    scenes = small_scenes(6)
    with tempfile.TemporaryDirectory() as tmpdir:
        paths = write_splits(tmpdir, scenes, (0.5, 1.0), (0, 1))
        assert [os.path.basename(p) for p in paths] == [
            "split_0.5_s0.json", "split_0.5_s1.json", "split_1_s0.json", "split_1_s1.json"]
        loaded = DatasetSplit.load(paths[0])
        assert loaded == split_dataset(scenes, 0.5, 0)
        assert split_filename(0.05, 2) == "split_0.05_s2.json"


def test_split_error_when_coverage_is_impossible():
    # one labeled scene cannot hold three classes that never share a scene
    scenes = [_single_class_scene(c) for c in range(3)]
    with pytest.raises(SplitError):
        split_dataset(scenes, 0.1, 0, max_attempts=5)
