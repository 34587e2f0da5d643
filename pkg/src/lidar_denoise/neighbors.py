"""Uniform voxel-grid index for fixed and per-point radius queries."""

from __future__ import annotations

import itertools

import numpy as np

_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
# pair-distance block budget, in matrix entries
_BLOCK = 4_000_000


def squared_distances(a, b):
    """Elementwise squared Euclidean distance between broadcastable ``(..., 3)`` arrays.

    Written component-wise so every caller rounds identically.
    """
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return dx * dx + dy * dy + dz * dz


class VoxelGrid:
    """Points bucketed into cubic cells of side ``cell_size``.

    Any query radius up to ``cell_size`` is answered exactly by scanning the
    3x3x3 block of cells around the query point's cell.
    """

    def __init__(self, points, cell_size):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be an (N, 3) array")
        if not cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        cells = np.floor(self.points / self.cell_size).astype(np.int64)
        self._origin = cells.min(axis=0) - 1 if len(cells) else np.zeros(3, np.int64)
        cells -= self._origin
        self._dims = cells.max(axis=0) + 2 if len(cells) else np.ones(3, np.int64)
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]
        self.cells = cells

    def _key(self, cells):
        d = self._dims
        return (cells[:, 0] * d[1] + cells[:, 1]) * d[2] + cells[:, 2]

    def _cell_members(self, key):
        lo = np.searchsorted(self.sorted_keys, key, side="left")
        hi = np.searchsorted(self.sorted_keys, key, side="right")
        return lo, hi

    def count_within(self, radii, exclude_self=True):
        """Number of indexed points within ``radii[i]`` of point ``i`` (``<=``, Euclidean)."""
        n = len(self.points)
        radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (n,))
        if n and radii.max() > self.cell_size:
            raise ValueError("query radius exceeds grid cell size")
        counts = np.zeros(n, dtype=np.int64)
        if n == 0:
            return counts
        uniq, starts = np.unique(self.sorted_keys, return_index=True)
        ends = np.append(starts[1:], n)
        cell_of = self.cells[self.order[starts]]
        for c, s, e in zip(cell_of, starts, ends):
            query = self.order[s:e]
            nb_keys = self._key(c + _OFFSETS)
            spans = [self._cell_members(k) for k in nb_keys]
            cand = np.concatenate([self.order[lo:hi] for lo, hi in spans if hi > lo])
            counts[query] = self._count_block(query, cand, radii)
        if exclude_self:
            counts -= 1
        return counts

    def _count_block(self, query, cand, radii):
        out = np.empty(len(query), dtype=np.int64)
        step = max(1, _BLOCK // max(len(cand), 1))
        pc = self.points[cand]
        for a in range(0, len(query), step):
            q = query[a:a + step]
            d2 = squared_distances(self.points[q][:, None, :], pc[None, :, :])
            out[a:a + step] = np.count_nonzero(d2 <= (radii[q] ** 2)[:, None], axis=1)
        return out

    def neighbors_within(self, i, radius):
        """Indices of points within ``radius`` of point ``i`` (self included), sorted."""
        if radius > self.cell_size:
            raise ValueError("query radius exceeds grid cell size")
        c = self.cells[i]
        cand = np.concatenate([self.order[slice(*self._cell_members(k))] for k in self._key(c + _OFFSETS)])
        d2 = squared_distances(self.points[i][None, :], self.points[cand])
        return np.sort(cand[d2 <= radius * radius])


def brute_force_counts(points, radii, exclude_self=True):
    """All-pairs reference for :meth:`VoxelGrid.count_within`."""
    points = np.asarray(points, dtype=np.float64)
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (len(points),))
    counts = np.empty(len(points), dtype=np.int64)
    for i in range(len(points)):
        d2 = squared_distances(points[i][None, :], points)
        counts[i] = np.count_nonzero(d2 <= radii[i] ** 2)
    return counts - 1 if exclude_self else counts
