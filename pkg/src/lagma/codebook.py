"""Value annotations and top-k trajectory memory keyed by codebook index.

CodeValueTable keeps, per code, a bounded FIFO of discounted returns whose
exact mean serves as that code's value estimate. SequenceBuffer keeps, per
code, the k best quantized-index trajectories seen starting at that code,
as a min-heap keyed by return so the worst kept entry is evicted first.
"""

from __future__ import annotations

import heapq
import math
from collections import deque

import numpy as np

QuantizedTrajectory = tuple[int, ...]


class CodeValueTable:
    """Per-code FIFO return buffers with exact cached means."""

    def __init__(self, n_codes: int, capacity: int = 100):
        if n_codes < 1 or capacity < 1:
            raise ValueError("n_codes and capacity must be at least 1")
        self.n_codes = n_codes
        self.capacity = capacity
        self._buffers: list[deque[float]] = [deque(maxlen=capacity) for _ in range(n_codes)]
        self._visits = np.zeros(n_codes, dtype=np.int64)
        self._values = np.full(n_codes, np.nan)

    def _check_code(self, z: int) -> int:
        z = int(z)
        if not 0 <= z < self.n_codes:
            raise IndexError(f"code {z} out of range [0, {self.n_codes})")
        return z

    def update(self, z: int, discounted_return: float) -> float:
        """Append a return, evicting the oldest past capacity; returns the new mean."""
        z = self._check_code(z)
        r = float(discounted_return)
        if not math.isfinite(r):
            raise ValueError(f"non-finite return {r!r} rejected for code {z}")
        buf = self._buffers[z]
        buf.append(r)
        self._visits[z] += 1
        # Recomputed, not incremented: the cached mean must equal the exact
        # mean of current contents with no drift across evictions.
        self._values[z] = sum(buf) / len(buf)
        return float(self._values[z])

    def value(self, z: int) -> float | None:
        z = self._check_code(z)
        if self._visits[z] == 0:
            return None
        return float(self._values[z])

    def visits(self, z: int) -> int:
        return int(self._visits[self._check_code(z)])

    def values_array(self) -> np.ndarray:
        """Per-code values with NaN where never updated (diagnostics only)."""
        return self._values.copy()

    def state(self) -> list[list[float]]:
        return [list(buf) for buf in self._buffers]

    def load_state(self, buffers: list[list[float]], visits: list[int]) -> None:
        if len(buffers) != self.n_codes or len(visits) != self.n_codes:
            raise ValueError("state size does not match n_codes")
        for z, items in enumerate(buffers):
            buf = deque(items[-self.capacity:], maxlen=self.capacity)
            self._buffers[z] = buf
            self._visits[z] = int(visits[z])
            self._values[z] = sum(buf) / len(buf) if buf else np.nan


class SequenceBuffer:
    """Per-code bounded best-k trajectory heaps keyed by return."""

    def __init__(self, n_codes: int, k: int):
        if n_codes < 1 or k < 1:
            raise ValueError("n_codes and k must be at least 1")
        self.n_codes = n_codes
        self.k = k
        self._heaps: list[list[tuple[float, int, QuantizedTrajectory]]] = [
            [] for _ in range(n_codes)
        ]
        self._insert_count = 0

    def _check_code(self, z: int) -> int:
        z = int(z)
        if not 0 <= z < self.n_codes:
            raise IndexError(f"code {z} out of range [0, {self.n_codes})")
        return z

    def update(self, key: float, trajectory) -> None:
        """Offer a trajectory under its return key.

        The heap for the trajectory's first code accepts it while under
        capacity, or replaces its current minimum when the key is strictly
        greater; equal-key ties never evict.
        """
        key = float(key)
        if not math.isfinite(key):
            raise ValueError(f"non-finite key {key!r} rejected")
        traj = tuple(int(z) for z in trajectory)
        if not traj:
            raise ValueError("empty trajectory rejected")
        z0 = self._check_code(traj[0])
        heap = self._heaps[z0]
        self._insert_count += 1
        entry = (key, self._insert_count, traj)
        if len(heap) < self.k:
            heapq.heappush(heap, entry)
        elif key > heap[0][0]:
            heapq.heapreplace(heap, entry)

    def sample(self, z: int, rng: np.random.Generator) -> QuantizedTrajectory | None:
        """Uniform draw among stored trajectories for code z; None when empty."""
        heap = self._heaps[self._check_code(z)]
        if not heap:
            return None
        return heap[int(rng.integers(len(heap)))][2]

    def size(self, z: int) -> int:
        return len(self._heaps[self._check_code(z)])

    def keys(self, z: int) -> list[float]:
        return sorted(entry[0] for entry in self._heaps[self._check_code(z)])

    def entries(self, z: int) -> list[tuple[float, QuantizedTrajectory]]:
        heap = self._heaps[self._check_code(z)]
        return [(e[0], e[2]) for e in sorted(heap)]

    def state(self) -> list[list[list]]:
        return [
            [[e[0], e[1], list(e[2])] for e in heap] for heap in self._heaps
        ]

    def load_state(self, heaps: list[list[list]], insert_count: int) -> None:
        if len(heaps) != self.n_codes:
            raise ValueError("state size does not match n_codes")
        self._heaps = [
            [(float(k), int(c), tuple(int(z) for z in t)) for k, c, t in heap]
            for heap in heaps
        ]
        for heap in self._heaps:
            heapq.heapify(heap)
        self._insert_count = int(insert_count)


def traj_value_cq0(rewards) -> float:
    """Undiscounted reward sum used as the alternative buffer key."""
    total = 0.0
    for r in rewards:
        total += float(r)
    return total
