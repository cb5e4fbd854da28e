"""
Tests for the synthetic multi-task scenes, batching and the dataset cache
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan import data
from mtscan.data import (
    cached_dataset,
    class_transitions,
    dilate,
    generate_scene,
    iterate_batches,
    load_dataset,
    make_batch,
    make_dataset,
    normals_from_depth,
    save_dataset,
    sequential_batches,
    task_target,
)
from mtscan.errors import CheckpointError, ShapeError


@pytest.fixture
def scene():
    return generate_scene(seed=3, height=32, width=48, num_classes=4, index=2)


class TestScene:
    def test_shapes_and_ranges(self, scene):
        assert scene.image.shape == (32, 48, 3)
        assert scene.semseg.shape == scene.depth.shape == scene.boundary.shape == (32, 48)
        assert scene.normal.shape == (32, 48, 3)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert scene.semseg.min() >= 0 and scene.semseg.max() <= 4
        assert set(np.unique(scene.boundary)) <= {0, 1}

    def test_deterministic(self, scene):
        again = generate_scene(seed=3, height=32, width=48, num_classes=4, index=2)
        np.testing.assert_array_equal(scene.image, again.image)
        np.testing.assert_array_equal(scene.depth, again.depth)

    def test_indices_are_independent_streams(self):
        a = generate_scene(seed=3, height=32, width=32, index=0)
        b = generate_scene(seed=3, height=32, width=32, index=1)
        assert not np.array_equal(a.image, b.image)

    def test_normals_are_unit_length(self, scene):
        np.testing.assert_allclose(np.linalg.norm(scene.normal, axis=-1), 1.0, atol=1e-12)

    def test_depth_layout(self, scene):
        assert np.all(scene.depth[scene.semseg == 0] == 1.0)
        foreground = scene.depth[scene.semseg > 0]
        assert np.all((foreground > 0.0) & (foreground < 1.0))

    def test_empty_scene(self):
        empty = generate_scene(seed=0, height=32, width=32, n_shapes=0)
        assert not empty.semseg.any()
        assert not empty.boundary.any()
        np.testing.assert_allclose(empty.normal[..., 2], 1.0)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            generate_scene(seed=0, height=16, width=32)


class TestLabelDerivations:
    def test_transitions_mark_both_sides(self):
        semseg = np.zeros((4, 4), dtype=np.int64)
        semseg[:, 2:] = 1
        edges = class_transitions(semseg)
        assert edges[:, 1].all() and edges[:, 2].all()
        assert not edges[:, 0].any() and not edges[:, 3].any()

    def test_dilate_grows_by_one_pixel(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, 2] = True
        assert dilate(mask).sum() == 9

    def test_flat_depth_normals_point_up(self):
        np.testing.assert_allclose(normals_from_depth(np.full((4, 4), 0.5)), np.broadcast_to([0, 0, 1.0], (4, 4, 3)))


class TestBatching:
    def test_targets(self):
        scenes = make_dataset(seed=1, count=3, height=32, width=32)
        image, targets = make_batch(scenes, ["semseg", "depth", "normal", "boundary"])
        assert image.shape == (3, 32, 32, 3)
        assert targets["semseg"].shape == (3, 32, 32) and targets["semseg"].dtype.kind == "i"
        assert targets["depth"].shape == (3, 1, 32, 32)
        assert targets["normal"].shape == (3, 3, 32, 32)

    def test_unknown_task(self):
        with pytest.raises(KeyError):
            task_target("saliency", make_dataset(seed=1, count=1, height=32, width=32))

    def test_shuffled_batches_cover_an_epoch(self):
        scenes = list(range(6))
        batches = iterate_batches(scenes, 2, np.random.default_rng(0))
        epoch = [next(batches) for _ in range(3)]
        assert sorted(x for batch in epoch for x in batch) == scenes

    def test_sequential_batches_keep_partial_tail(self):
        assert [len(b) for b in sequential_batches(list(range(5)), 2)] == [2, 2, 1]

    def test_batch_larger_than_dataset(self):
        with pytest.raises(ValueError):
            next(iterate_batches([1], 2, np.random.default_rng(0)))

    def test_threaded_generation_matches_serial(self):
        serial = make_dataset(seed=4, count=3, height=32, width=32, workers=1)
        from mtscan.config import Config
        original = Config.MTK_THREADS
        Config.MTK_THREADS = 2
        try:
            threaded = make_dataset(seed=4, count=3, height=32, width=32, workers=2)
        finally:
            Config.MTK_THREADS = original
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.image, b.image)


class TestCache:
    def test_round_trip(self, tmp_path):
        scenes = make_dataset(seed=2, count=2, height=32, width=32)
        index = save_dataset(tmp_path, scenes, seed=2, num_classes=4)
        assert index.count == 2 and (index.H, index.W) == (32, 32)
        loaded_index, loaded = load_dataset(tmp_path)
        assert loaded_index == index
        for a, b in zip(scenes, loaded):
            np.testing.assert_array_equal(a.semseg, b.semseg)
            np.testing.assert_array_equal(a.normal, b.normal)

    def test_missing_index(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_dataset(tmp_path)

    def test_cached_dataset_generates_once(self, tmp_path, monkeypatch):
        first = cached_dataset(tmp_path, seed=4, count=2, height=32, width=32, num_classes=3)
        assert len(list(tmp_path.iterdir())) == 1

        def fail(*args, **kwargs):
            raise AssertionError("cache miss")

        monkeypatch.setattr(data, "make_dataset", fail)
        second = cached_dataset(tmp_path, seed=4, count=2, height=32, width=32, num_classes=3)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.semseg, b.semseg)

    def test_cached_dataset_keys_on_arguments(self, tmp_path):
        cached_dataset(tmp_path, seed=4, count=1, height=32, width=32, num_classes=3)
        other = cached_dataset(tmp_path, seed=5, count=1, height=32, width=32, num_classes=3)
        assert len(list(tmp_path.iterdir())) == 2
        np.testing.assert_array_equal(other[0].semseg, make_dataset(5, 1, 32, 32, 3)[0].semseg)

    def test_mismatched_index_is_regenerated(self, tmp_path):
        cached_dataset(tmp_path, seed=4, count=1, height=32, width=32, num_classes=3)
        (directory,) = tmp_path.iterdir()
        index_path = directory / "index.json"
        index_path.write_text(index_path.read_text().replace('"seed": 4', '"seed": 9'))
        scenes = cached_dataset(tmp_path, seed=4, count=1, height=32, width=32, num_classes=3)
        np.testing.assert_array_equal(scenes[0].semseg, make_dataset(4, 1, 32, 32, 3)[0].semseg)
        assert '"seed": 4' in index_path.read_text()
