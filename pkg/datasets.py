#!/usr/bin/env python3

"""
Desk-scale datasets: a seeded synthetic image generator and a raw directory format.

Raw directory layout:
    labels.csv         one "filename,label" row per sample, no header
    <filename>         channels x H x W little-endian float32, row-major
"""

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"
SAMPLE_DTYPE = "<f4"


class DatasetError(Exception):
    """Raised when a dataset cannot be generated or loaded"""

    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"Images must be [samples, channels, H, W], got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int]]:
        for image, label in zip(self.images, self.labels):
            yield image, int(label)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(images=self.images[idx], labels=self.labels[idx])

    def split(self, first: int) -> Tuple["Dataset", "Dataset"]:
        return self.subset(range(first)), self.subset(range(first, len(self)))


def class_pattern(label: int, classes: int, image_size: int, channels: int) -> np.ndarray:
    """
    The bright rectangle drawn for a class.

    Class c sits in its own cell of a ceil(sqrt(classes)) grid; rectangle height
    and the brightest channel both vary with c.
    """
    grid = math.ceil(math.sqrt(classes))
    cell = image_size // grid
    if cell < 4:
        raise DatasetError(f"{image_size}px images are too small for {classes} class cells")
    row, col = divmod(label, grid)
    height = max(1, cell * (3 + label % 4) // 8)
    width = max(1, cell // 2)
    top = row * cell + (cell - height) // 2
    left = col * cell + (cell - width) // 2

    profile = np.full(channels, 0.4, dtype=np.float32)
    profile[label % channels] = 1.0
    pattern = np.zeros((channels, image_size, image_size), dtype=np.float32)
    pattern[:, top : top + height, left : left + width] = profile[:, None, None]
    return pattern


def synth_dataset(
    classes: int,
    samples: int,
    seed: int,
    image_size: int = 32,
    channels: int = 3,
    noise: float = 0.1,
) -> Dataset:
    """Balanced, deterministic class-pattern images over Gaussian noise."""
    if classes < 2:
        raise DatasetError(f"Need at least 2 classes, got {classes}")
    if samples < 1:
        raise DatasetError(f"Need at least one sample, got {samples}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(samples) % classes).astype(np.int64)
    patterns = np.stack([class_pattern(c, classes, image_size, channels) for c in range(classes)])
    images = rng.normal(0.0, noise, size=(samples, channels, image_size, image_size)).astype(np.float32)
    images += patterns[labels]
    logger.debug(f"Generated {samples} synthetic samples over {classes} classes (seed {seed})")
    return Dataset(images=images, labels=labels)


def save_raw_dir(dataset: Dataset, directory: str) -> None:
    """Write a dataset in the raw directory format."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, LABELS_FILE), "w", newline="") as f:
        writer = csv.writer(f)
        for i, (image, label) in enumerate(dataset):
            filename = f"sample_{i:05d}.f32"
            image.astype(SAMPLE_DTYPE).tofile(os.path.join(directory, filename))
            writer.writerow([filename, label])
    logger.info(f"Wrote {len(dataset)} samples to {directory}")


def load_raw_dir(path: str, channels: int, image_size: int) -> Dataset:
    """
    Load a raw directory in the order of labels.csv.

    Raises:
        DatasetError: Naming the offending file (and line for label parse errors)
    """
    labels_path = os.path.join(path, LABELS_FILE)
    if not os.path.isfile(labels_path):
        raise DatasetError(f"Missing labels file: {labels_path}")

    shape = (channels, image_size, image_size)
    expected_bytes = channels * image_size * image_size * 4
    images = []
    labels = []
    with open(labels_path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"{labels_path}:{lineno}: expected 'filename,label', got {row}")
            filename, raw_label = row[0].strip(), row[1].strip()
            try:
                label = int(raw_label)
            except ValueError:
                raise DatasetError(f"{labels_path}:{lineno}: label {raw_label!r} is not an integer")

            sample_path = os.path.join(path, filename)
            if not os.path.isfile(sample_path):
                raise DatasetError(f"Missing sample file: {sample_path}")
            size = os.path.getsize(sample_path)
            if size != expected_bytes:
                raise DatasetError(
                    f"Sample file {sample_path} has {size} bytes, expected {expected_bytes} for shape {shape}"
                )
            images.append(np.fromfile(sample_path, dtype=SAMPLE_DTYPE).reshape(shape).astype(np.float32))
            labels.append(label)

    if not images:
        raise DatasetError(f"No samples listed in {labels_path}")
    logger.info(f"Loaded {len(images)} samples from {path}")
    return Dataset(images=np.stack(images), labels=np.asarray(labels, dtype=np.int64))
