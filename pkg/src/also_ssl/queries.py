"""Visibility-derived occupancy queries along sensor lines of sight."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import rng
from .geometry import PointCloud

log = logging.getLogger(__name__)

FRONT, BEHIND, SIGHT = 0, 1, 2
KIND_NAMES = ("front", "behind", "sight")
NO_INTENSITY = -1.0
DEFAULT_DELTA = 0.1


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Query positions with occupancy (1 = full) and intensity targets.

    ``intensity`` holds -1.0 where there is no target (sight queries, or
    clouds without intensity).
    """

    positions: np.ndarray
    occupancy: np.ndarray
    intensity: np.ndarray
    kind: np.ndarray
    source_index: np.ndarray
    delta: float = DEFAULT_DELTA
    offset_mode: str = "uniform"
    seed: int = 0
    skipped: int = 0

    def __post_init__(self):
        n = len(self.positions)
        cast = {
            "positions": np.float64,
            "occupancy": np.uint8,
            "intensity": np.float64,
            "kind": np.uint8,
            "source_index": np.int64,
        }
        for name, dtype in cast.items():
            a = np.array(getattr(self, name), dtype=dtype)
            if len(a) != n:
                raise ValueError(f"{name} has length {len(a)}, expected {n}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if n and self.positions.shape[1:] != (3,):
            raise ValueError("positions must have shape (n, 3)")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def intensity_mask(self) -> np.ndarray:
        return self.intensity >= 0.0

    def select(self, idx) -> "QuerySet":
        return QuerySet(
            self.positions[idx],
            self.occupancy[idx],
            self.intensity[idx],
            self.kind[idx],
            self.source_index[idx],
            self.delta,
            self.offset_mode,
            self.seed,
            self.skipped,
        )

    def transformed(self, rot: np.ndarray) -> "QuerySet":
        return QuerySet(
            self.positions @ rot.T,
            self.occupancy,
            self.intensity,
            self.kind,
            self.source_index,
            self.delta,
            self.offset_mode,
            self.seed,
            self.skipped,
        )

    def quantized(self) -> "QuerySet":
        """Round positions and intensity targets to float32 (the on-disk precision)."""
        return QuerySet(
            self.positions.astype(np.float32).astype(np.float64),
            self.occupancy,
            self.intensity.astype(np.float32).astype(np.float64),
            self.kind,
            self.source_index,
            self.delta,
            self.offset_mode,
            self.seed,
            self.skipped,
        )


def generate_queries(
    cloud: PointCloud, delta: float = DEFAULT_DELTA, offset_mode: str = "uniform", seed: int = 0
) -> QuerySet:
    """Three queries per point: just in front (empty), just behind (full),
    and somewhere on the line of sight (empty).

    Offsets are drawn per point from a generator keyed by (seed, point index),
    so the result does not depend on the cloud's pose or on evaluation order.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if offset_mode not in ("fixed", "uniform"):
        raise ValueError(f"unknown offset mode {offset_mode!r}")
    c = cloud.sensor_origin
    p = cloud.points
    idx = np.arange(len(p))
    ray = p - c
    dist = np.linalg.norm(ray, axis=1)
    u = ray / dist[:, None]  # sensor -> point
    if offset_mode == "fixed":
        d_front = np.full(len(p), float(delta))
        d_behind = d_front.copy()
    else:
        # 1 - U(0,1) lies in (0, 1): offsets in (0, delta]
        d_front = delta * (1.0 - rng.keyed_uniform(rng.derive_seed(seed, "front"), idx))
        d_behind = delta * (1.0 - rng.keyed_uniform(rng.derive_seed(seed, "behind"), idx))
    t_sight = rng.keyed_uniform(rng.derive_seed(seed, "sight"), idx)

    keep = dist > d_front
    skipped = int((~keep).sum())
    if skipped:
        log.debug("skipped %d points closer than their front offset to the sensor", skipped)
    idx, u, ray = idx[keep], u[keep], ray[keep]
    d_front, d_behind, t_sight = d_front[keep], d_behind[keep], t_sight[keep]
    pk = p[keep]

    front = pk - d_front[:, None] * u
    behind = pk + d_behind[:, None] * u
    sight = c + t_sight[:, None] * ray
    positions = np.stack([front, behind, sight], axis=1).reshape(-1, 3)

    n = len(idx)
    occupancy = np.tile(np.array([0, 1, 0], dtype=np.uint8), n)
    kind = np.tile(np.array([FRONT, BEHIND, SIGHT], dtype=np.uint8), n)
    if cloud.intensities is not None:
        i = cloud.intensities[idx]
        intensity = np.stack([i, i, np.full(n, NO_INTENSITY)], axis=1).reshape(-1)
    else:
        intensity = np.full(3 * n, NO_INTENSITY)
    source = np.repeat(idx, 3)
    stored_seed = int(seed) if np.isscalar(seed) else rng.derive_seed(seed)
    return QuerySet(
        positions, occupancy, intensity, kind, source, float(delta), offset_mode, stored_seed, skipped
    )


def subsample_queries(qs: QuerySet, max_queries: int, seed) -> QuerySet:
    """Uniform random subset of at most ``max_queries`` queries (order kept)."""
    if max_queries < 1:
        raise ValueError("max_queries must be >= 1")
    if len(qs) <= max_queries:
        return qs
    idx = rng.generator(seed, "subsample_queries").choice(len(qs), max_queries, replace=False)
    return qs.select(np.sort(idx))
