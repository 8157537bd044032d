"""Image-to-class Naive Bayes Nearest Neighbor with exhaustive search."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np


class ClassDescriptorStore:
    """Per-class pools of training descriptors."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self._chunks: list[list[np.ndarray]] = [[] for _ in range(k)]
        self._pools: list[np.ndarray | None] = [None] * k

    @property
    def k(self) -> int:
        return len(self._chunks)

    def add(self, label: int, descriptors) -> None:
        d = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
        if not 0 <= label < self.k:
            raise ValueError(f"label {label} out of range for k={self.k}")
        self._chunks[label].append(d)
        self._pools[label] = None

    def pool(self, label: int) -> np.ndarray:
        if self._pools[label] is None:
            if not self._chunks[label]:
                raise ValueError(f"class {label} has no descriptors")
            self._pools[label] = np.concatenate(self._chunks[label], axis=0)
        return self._pools[label]

    @classmethod
    def from_pools(cls, pools: Sequence) -> ClassDescriptorStore:
        store = cls(len(pools))
        for y, p in enumerate(pools):
            store.add(y, p)
        return store


def _sq_dists(z: np.ndarray, pool: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2 - 2ab + |b|^2 expansion,
    # so an exact match gives exactly 0
    diff = z[:, None, :] - pool[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def nn_distance(z, pool) -> float:
    """Euclidean distance from ``z`` to its nearest neighbour in ``pool``."""
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if pool.shape[0] == 0 or pool.size == 0:
        raise ValueError("nearest-neighbour search over an empty set")
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != pool.shape[1]:
        raise ValueError(f"descriptor dim {z.shape[1]} != pool dim {pool.shape[1]}")
    return float(np.sqrt(_sq_dists(z, pool).min()))


def image_to_class_distances(descriptors, store: ClassDescriptorStore, chunk: int = 256) -> np.ndarray:
    """``sum_z d(z, Phi_y)^2`` for every class ``y``."""
    z = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if z.shape[0] == 0 or z.size == 0:
        raise ValueError("query image has no descriptors")
    totals = np.zeros(store.k)
    for y in range(store.k):
        pool = store.pool(y)
        for i in range(0, z.shape[0], chunk):
            totals[y] += _sq_dists(z[i : i + chunk], pool).min(axis=1).sum()
    return totals


def classify_nbnn(descriptors, store: ClassDescriptorStore) -> int:
    """Class minimizing the summed squared nearest-neighbour distances.

    ``np.argmin`` returns the first minimum, so ties go to the lowest label.
    """
    return int(np.argmin(image_to_class_distances(descriptors, store)))
