#!/usr/bin/env python3

import hashlib
import time
from typing import Any, Callable, Iterable, Tuple

import numpy as np
from scipy.stats import truncnorm


def trunc_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02, dtype: Any = np.float32
) -> np.ndarray:
    """Normal(0, std) samples truncated at two standard deviations"""
    size = int(np.prod(shape)) if shape else 1
    if size == 0:
        return np.zeros(shape, dtype=dtype)
    samples = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=size, random_state=rng)
    return np.asarray(samples, dtype=dtype).reshape(shape)


def calculate_tensor_hash(arrays: Iterable[Tuple[str, np.ndarray]]) -> str:
    """Calculate SHA256 hash over named arrays (names, shapes, dtypes and bytes)"""
    hash_obj = hashlib.sha256()

    # Sort for determinism
    for name, array in sorted(arrays, key=lambda item: item[0]):
        hash_obj.update(name.encode("utf-8"))
        hash_obj.update(str(array.shape).encode("utf-8"))
        hash_obj.update(array.dtype.str.encode("utf-8"))
        hash_obj.update(np.ascontiguousarray(array).tobytes())

    return hash_obj.hexdigest()


def best_of(fn: Callable[[], Any], repeats: int) -> float:
    """Minimum wall time of `repeats` calls to fn, in seconds"""
    if repeats < 1:
        raise ValueError(f"repeats must be positive, got {repeats}")
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best
