#!/usr/bin/env python3

"""Unit tests for the datasets module."""

import numpy as np
import pytest

from datasets import (
    LABELS_FILE,
    Dataset,
    DatasetError,
    class_pattern,
    load_raw_dir,
    save_raw_dir,
    synth_dataset,
)


class TestSynthDataset:
    """Tests for the synthetic generator."""

    def test_shapes_and_balance(self):
        """Samples have the requested shape and classes are balanced."""
        dataset = synth_dataset(4, 40, seed=7, image_size=16, channels=3)
        assert len(dataset) == 40
        assert dataset.image_shape == (3, 16, 16)
        assert dataset.images.dtype == np.float32
        assert np.bincount(dataset.labels).tolist() == [10, 10, 10, 10]

    def test_seeded(self):
        """The same seed reproduces the same data; another seed does not."""
        a = synth_dataset(3, 12, seed=1, image_size=16)
        b = synth_dataset(3, 12, seed=1, image_size=16)
        c = synth_dataset(3, 12, seed=2, image_size=16)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, c.images)

    def test_noise_free_images_are_patterns(self):
        """With zero noise every image is exactly its class pattern."""
        dataset = synth_dataset(4, 8, seed=0, image_size=16, channels=3, noise=0.0)
        for image, label in dataset:
            np.testing.assert_array_equal(image, class_pattern(label, 4, 16, 3))

    def test_patterns_differ(self):
        """Every class draws a distinct pattern."""
        patterns = [class_pattern(c, 4, 32, 3) for c in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(patterns[i], patterns[j])

    @pytest.mark.parametrize("classes, samples, image_size", [(1, 10, 32), (4, 0, 32), (16, 10, 8)])
    def test_invalid(self, classes, samples, image_size):
        """Too few classes, no samples, or images too small for the grid are rejected."""
        with pytest.raises(DatasetError):
            synth_dataset(classes, samples, seed=0, image_size=image_size)


class TestDataset:
    """Tests for the in-memory dataset."""

    def test_subset_and_split(self):
        """subset picks rows; split cuts at an index."""
        dataset = synth_dataset(2, 6, seed=0, image_size=16)
        first, second = dataset.split(4)
        assert (len(first), len(second)) == (4, 2)
        picked = dataset.subset([5, 0])
        np.testing.assert_array_equal(picked.labels, dataset.labels[[5, 0]])

    def test_mismatched_lengths(self):
        """Images and labels must have equal length."""
        with pytest.raises(DatasetError):
            Dataset(images=np.zeros((2, 1, 4, 4), dtype=np.float32), labels=np.zeros(3, dtype=np.int64))


class TestRawDir:
    """Tests for the raw directory format."""

    def test_save_then_load(self, tmp_path):
        """A saved dataset loads back unchanged and in order."""
        dataset = synth_dataset(3, 9, seed=4, image_size=16, channels=2)
        save_raw_dir(dataset, str(tmp_path))
        loaded = load_raw_dir(str(tmp_path), channels=2, image_size=16)
        np.testing.assert_array_equal(loaded.images, dataset.images)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)
        assert (tmp_path / "sample_00000.f32").stat().st_size == 2 * 16 * 16 * 4

    def test_missing_labels_file(self, tmp_path):
        """A directory without labels.csv is rejected."""
        with pytest.raises(DatasetError, match=LABELS_FILE):
            load_raw_dir(str(tmp_path), channels=1, image_size=4)

    def test_wrong_sample_size(self, tmp_path):
        """A sample with the wrong byte count names the file."""
        np.zeros(10, dtype="<f4").tofile(tmp_path / "a.f32")
        (tmp_path / LABELS_FILE).write_text("a.f32,0\n")
        with pytest.raises(DatasetError, match="a.f32"):
            load_raw_dir(str(tmp_path), channels=1, image_size=4)

    def test_bad_label_names_the_line(self, tmp_path):
        """A non-integer label is reported with its line number."""
        np.zeros(16, dtype="<f4").tofile(tmp_path / "a.f32")
        (tmp_path / LABELS_FILE).write_text("a.f32,0\na.f32,cat\n")
        with pytest.raises(DatasetError, match=":2:"):
            load_raw_dir(str(tmp_path), channels=1, image_size=4)

    def test_missing_sample(self, tmp_path):
        """A listed file that does not exist is rejected."""
        (tmp_path / LABELS_FILE).write_text("gone.f32,1\n")
        with pytest.raises(DatasetError, match="gone.f32"):
            load_raw_dir(str(tmp_path), channels=1, image_size=4)

    def test_empty_listing(self, tmp_path):
        """An empty labels file is rejected."""
        (tmp_path / LABELS_FILE).write_text("")
        with pytest.raises(DatasetError, match="No samples"):
            load_raw_dir(str(tmp_path), channels=1, image_size=4)
