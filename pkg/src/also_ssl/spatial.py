"""Uniform hash grid for exact fixed-radius neighbor search.

Two metrics are supported: the 3D ball and the infinite vertical cylinder
(2D distance on x, y), the latter for bird's-eye-view supports.
"""

from __future__ import annotations

import itertools

import numpy as np

BALL3D = "ball3d"
CYLINDER_BEV = "cylinder_bev"

_BIAS = 1 << 20  # cell coordinates must lie in [-2^20, 2^20)
_BITS = 21


def metric_distance(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    """Row-wise distance between paired points under the index metric."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if mode == CYLINDER_BEV:
        d = d[..., :2]
    return np.sqrt((d * d).sum(axis=-1))


def _pack(cells: np.ndarray) -> np.ndarray:
    if (cells < -_BIAS).any() or (cells >= _BIAS).any():
        raise ValueError("coordinates too far from the origin for this cell size")
    shifted = cells + _BIAS
    key = np.zeros(len(cells), dtype=np.int64)
    for j in range(cells.shape[1]):
        key = (key << _BITS) | shifted[:, j]
    return key


class SpatialIndex:
    """Hash grid over support points; immutable once built."""

    def __init__(self, points, cell_size: float, mode: str = BALL3D):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if mode not in (BALL3D, CYLINDER_BEV):
            raise ValueError(f"unknown mode {mode!r}")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        self.cell_size = float(cell_size)
        self.mode = mode
        self.dims = 2 if mode == CYLINDER_BEV else 3
        self.indexed_points = pts
        self.indexed_points.setflags(write=False)
        self.cells = self.cell_of(pts)
        keys = _pack(self.cells)
        self._order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self._order]
        self._keys, self._starts, self._counts = np.unique(
            sorted_keys, return_index=True, return_counts=True
        )

    def __len__(self) -> int:
        return len(self.indexed_points)

    def cell_of(self, pts: np.ndarray) -> np.ndarray:
        return np.floor(pts[:, : self.dims] / self.cell_size).astype(np.int64)

    @property
    def buckets(self) -> dict:
        """Map from integer cell coordinates to sorted lists of point indices."""
        out = {}
        for start, count in zip(self._starts, self._counts):
            members = self._order[start : start + count]
            out[tuple(int(c) for c in self.cells[members[0]])] = sorted(members.tolist())
        return out

    def _candidates(self, queries: np.ndarray, r: float):
        # pad the probe range so rounding in the cell assignment never drops a pair
        pad = 1e-9 * (np.abs(queries[:, : self.dims]) + r)
        lo = np.floor((queries[:, : self.dims] - r - pad) / self.cell_size).astype(np.int64)
        hi = np.floor((queries[:, : self.dims] + r + pad) / self.cell_size).astype(np.int64)
        span = int((hi - lo).max()) + 1
        q_out, s_out = [], []
        for offset in itertools.product(range(span), repeat=self.dims):
            cell = lo + np.asarray(offset)
            valid = (cell <= hi).all(axis=1)
            if not valid.any():
                continue
            qi = np.nonzero(valid)[0]
            keys = _pack(cell[qi])
            pos = np.searchsorted(self._keys, keys)
            pos_c = np.minimum(pos, len(self._keys) - 1)
            found = self._keys[pos_c] == keys
            qi, pos_c = qi[found], pos_c[found]
            if len(qi) == 0:
                continue
            counts = self._counts[pos_c]
            starts = self._starts[pos_c]
            rep_q = np.repeat(qi, counts)
            # position within each bucket run
            within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
            s_out.append(self._order[np.repeat(starts, counts) + within])
            q_out.append(rep_q)
        if not q_out:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(q_out), np.concatenate(s_out)

    def radius_pairs(self, queries, r: float) -> np.ndarray:
        """All (query_index, support_index) with distance <= r, sorted lexicographically."""
        if r <= 0:
            raise ValueError("r must be positive")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.empty((0, 2), dtype=np.int64)
        qi, si = self._candidates(q, r)
        keep = metric_distance(q[qi], self.indexed_points[si], self.mode) <= r
        qi, si = qi[keep], si[keep]
        order = np.lexsort((si, qi))
        return np.stack([qi[order], si[order]], axis=1)


def build(points, cell_size: float, mode: str = BALL3D) -> SpatialIndex:
    return SpatialIndex(points, cell_size, mode)


def radius_pairs(index: SpatialIndex, queries, r: float) -> np.ndarray:
    return index.radius_pairs(queries, r)
