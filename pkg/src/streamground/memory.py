"""Query-vector memory banks and the two selection strategies.

A bank holds K partitions, one per decoder block. Each processed frame
appends exactly one vector per partition (insertion doubles as the bank
update; nothing is removed unless an explicit capacity cap is configured).

Selection:

* spatial: score every stored vector against the mean-pooled query text by
  cosine (or dot product) and keep the top N_s, ties broken toward earlier
  frames, returned in frame order;
* temporal: split the partition at similarity dips between adjacent frames
  (a lexical-cohesion-style boundary rule) and keep only the contiguous
  suffix after the last boundary, i.e. the event nearest the current frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .tensor import Tensor

_SIGMA_FLOOR = 1e-12  # stddev below this counts as "no variation"


@dataclass
class SelectedMemory:
    vectors: list                 # Tensor or ndarray rows, (1, C) each
    source_indices: list[int]     # frame indices, strictly increasing


class MemoryBank:
    """K partitions of stored query vectors of width C."""

    def __init__(self, k: int, c: int, kind: str = "spatial",
                 capacity: int | None = None):
        if k < 1:
            raise ValueError("bank needs at least one partition")
        if kind not in ("spatial", "temporal"):
            raise ValueError(f"unknown bank kind {kind!r}")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1 when set")
        self.k = k
        self.c = c
        self.kind = kind
        self.capacity = capacity
        self._vectors: list[list] = [[] for _ in range(k)]
        self._stacks: list[np.ndarray] = [np.empty((0, c)) for _ in range(k)]
        self._counts = [0] * k
        self._bases = [0] * k     # frame index of the oldest retained vector

    def _check_k(self, k: int) -> int:
        if not 1 <= k <= self.k:
            raise IndexError(f"partition {k} out of range 1..{self.k}")
        return k - 1

    def insert(self, k: int, vec) -> None:
        """Append a vector to partition k (1-indexed); evict FIFO if capped."""
        i = self._check_k(k)
        data = vec.data if isinstance(vec, Tensor) else np.asarray(vec, dtype=float)
        row = data.reshape(-1)
        if row.shape != (self.c,):
            raise ValueError(f"memory vector must have width {self.c}, got {data.shape}")
        if self._counts[i] == self._stacks[i].shape[0]:
            grown = np.empty((max(8, 2 * self._counts[i]), self.c))
            grown[:self._counts[i]] = self._stacks[i][:self._counts[i]]
            self._stacks[i] = grown
        self._stacks[i][self._counts[i]] = row
        self._counts[i] += 1
        self._vectors[i].append(vec)
        if self.capacity is not None and self._counts[i] > self.capacity:
            self._vectors[i].pop(0)
            self._stacks[i][:self._counts[i] - 1] = self._stacks[i][1:self._counts[i]]
            self._counts[i] -= 1
            self._bases[i] += 1

    def size(self, k: int) -> int:
        return self._counts[self._check_k(k)]

    def vectors(self, k: int) -> list:
        return self._vectors[self._check_k(k)]

    def matrix(self, k: int) -> np.ndarray:
        i = self._check_k(k)
        return self._stacks[i][:self._counts[i]]

    def base(self, k: int) -> int:
        return self._bases[self._check_k(k)]

    def nbytes(self) -> int:
        return sum(c * self.c * 8 for c in self._counts)

    def state_arrays(self) -> list[np.ndarray]:
        """Partition contents as plain arrays (for stream serialization)."""
        return [self.matrix(k).copy() for k in range(1, self.k + 1)]

    def load_state_arrays(self, arrays: list[np.ndarray],
                          bases: list[int] | None = None) -> None:
        if len(arrays) != self.k:
            raise ValueError(f"expected {self.k} partitions, got {len(arrays)}")
        for i, arr in enumerate(arrays):
            arr = np.asarray(arr, dtype=float).reshape(-1, self.c)
            self._stacks[i] = arr.copy()
            self._counts[i] = arr.shape[0]
            self._vectors[i] = [arr[j:j + 1].copy() for j in range(arr.shape[0])]
            self._bases[i] = 0 if bases is None else bases[i]


def meanpool_text(text: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of unmasked text rows; zero vector when the mask is empty."""
    if mask.any():
        return text[mask].mean(axis=0)
    return np.zeros(text.shape[1])


def _subset(bank: MemoryBank, k: int, local_indices) -> SelectedMemory:
    vecs = bank.vectors(k)
    base = bank.base(k)
    return SelectedMemory(vectors=[vecs[j] for j in local_indices],
                          source_indices=[base + int(j) for j in local_indices])


def select_all(bank: MemoryBank, k: int) -> SelectedMemory:
    if bank.size(k) == 0:
        raise ValueError(f"partition {k} is empty")
    return _subset(bank, k, range(bank.size(k)))


def select_spatial(bank: MemoryBank, k: int, text: np.ndarray,
                   mask: np.ndarray, n_s: int,
                   similarity: str = "cosine") -> SelectedMemory:
    """Top-N_s memories by text similarity, in frame order.

    Ties keep the earlier frame; fewer than N_s stored vectors are all
    returned.
    """
    if bank.size(k) == 0:
        raise ValueError(f"partition {k} is empty")
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    mat = bank.matrix(k)
    ref = meanpool_text(text, mask)
    if similarity == "cosine":
        scores = backend.cosine_scores(mat, ref)
    elif similarity == "dot":
        scores = mat @ ref
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    if mat.shape[0] <= n_s:
        return _subset(bank, k, range(mat.shape[0]))
    top = np.argsort(-scores, kind="stable")[:n_s]
    return _subset(bank, k, np.sort(top))


def detect_boundaries(vectors: np.ndarray, alpha: float = 1.0,
                      threshold: float = float("nan")) -> list[int]:
    """Event boundaries from adjacent-frame similarity dips.

    Returns positions j (0-indexed) meaning "between memories j and j+1".
    A position is a boundary when its similarity falls below
    mean - alpha*std of all adjacent similarities, or below the absolute
    ``threshold`` when one is given. Fewer than 3 memories, or a similarity
    sequence with no variation, yields no boundaries.
    """
    mat = np.asarray(vectors, dtype=float)
    if mat.ndim != 2:
        raise ValueError(f"expected a (T, C) stack, got shape {mat.shape}")
    t = mat.shape[0]
    if t < 3:
        return []
    sims = backend.adjacent_cosine(mat)
    if np.isnan(threshold):
        sd = float(sims.std())
        if sd <= _SIGMA_FLOOR:
            return []
        thr = float(sims.mean()) - alpha * sd
    else:
        thr = threshold
    return [int(j) for j in np.nonzero(sims < thr)[0]]


def select_temporal(bank: MemoryBank, k: int, alpha: float = 1.0,
                    threshold: float = float("nan")) -> SelectedMemory:
    """The contiguous suffix after the last detected boundary."""
    if bank.size(k) == 0:
        raise ValueError(f"partition {k} is empty")
    bounds = detect_boundaries(bank.matrix(k), alpha=alpha, threshold=threshold)
    start = bounds[-1] + 1 if bounds else 0
    return _subset(bank, k, range(start, bank.size(k)))
