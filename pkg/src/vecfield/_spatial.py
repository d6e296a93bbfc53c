"""Uniform-grid spatial hash for fixed-radius neighbour queries in 3D."""

from __future__ import annotations

import itertools
from collections import defaultdict

import numpy as np

_OFFSETS = list(itertools.product((-1, 0, 1), repeat=3))


class SpatialHash:
    """Bucket points into cubic cells of edge ``cell``.

    Any query radius ``r <= cell`` only needs the 27 surrounding cells, so a
    full neighbour sweep costs O(n * local density) rather than O(n^2).
    """

    def __init__(self, points, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        self.keys = np.floor(self.points / self.cell).astype(np.int64)
        buckets = defaultdict(list)
        for idx, key in enumerate(map(tuple, self.keys)):
            buckets[key].append(idx)
        self.buckets = {k: np.array(v, dtype=np.intp) for k, v in buckets.items()}

    def _candidates(self, key) -> np.ndarray:
        parts = [
            self.buckets[k]
            for k in ((key[0] + a, key[1] + b, key[2] + c) for a, b, c in _OFFSETS)
            if k in self.buckets
        ]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)

    def neighbor_lists(self, r: float) -> list[np.ndarray]:
        """For every point, sorted indices of points within ``r`` (itself included)."""
        if r > self.cell:
            raise ValueError("query radius exceeds cell size")
        out: list[np.ndarray] = [None] * len(self.points)  # type: ignore[list-item]
        r2 = r * r
        for key, members in self.buckets.items():
            cand = np.sort(self._candidates(key))
            diff = self.points[members][:, None, :] - self.points[cand][None, :, :]
            close = np.einsum("ijk,ijk->ij", diff, diff) <= r2
            for row, idx in enumerate(members):
                out[idx] = cand[close[row]]
        return out

    def pairs_within(self, r: float) -> list[tuple[int, int]]:
        pairs = []
        for i, nbrs in enumerate(self.neighbor_lists(r)):
            pairs.extend((i, int(j)) for j in nbrs if j > i)
        pairs.sort()
        return pairs
