"""Point-cloud container and rigid data augmentations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng

EPS_GEOM = 1e-6  # meters; points closer than this to the sensor are rejected


def _frozen(a: Optional[np.ndarray], dtype) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A single lidar sweep: sensor origin, points, optional intensity/labels."""

    sensor_origin: np.ndarray
    points: np.ndarray
    intensities: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        origin = _frozen(self.sensor_origin, np.float64).reshape(3)
        origin.setflags(write=False)
        pts = _frozen(self.points, np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("point cloud is empty")
        if not (np.isfinite(pts).all() and np.isfinite(origin).all()):
            raise ValueError("non-finite coordinates")
        dist = np.linalg.norm(pts - origin, axis=1)
        if (dist <= EPS_GEOM).any():
            raise ValueError("point coincides with the sensor origin")
        inten = _frozen(self.intensities, np.float64)
        if inten is not None:
            if inten.shape != (len(pts),):
                raise ValueError("intensities length mismatch")
            if not ((inten >= 0.0) & (inten <= 1.0)).all():
                raise ValueError("intensities must lie in [0, 1]")
        labels = _frozen(self.labels, np.int64)
        if labels is not None:
            if labels.shape != (len(pts),):
                raise ValueError("labels length mismatch")
            if (labels < 0).any():
                raise ValueError("labels must be non-negative")
        object.__setattr__(self, "sensor_origin", origin)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_intensity(self) -> bool:
        return self.intensities is not None

    def select(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.sensor_origin,
            self.points[idx],
            None if self.intensities is None else self.intensities[idx],
            None if self.labels is None else self.labels[idx],
        )

    def transformed(self, rot: np.ndarray) -> "PointCloud":
        """Apply a linear map (about the world origin) to points and sensor."""
        return PointCloud(
            rot @ self.sensor_origin, self.points @ rot.T, self.intensities, self.labels
        )

    def quantized(self) -> "PointCloud":
        """Round coordinates and intensities to float32, as stored on disk."""
        q = lambda a: None if a is None else a.astype(np.float32).astype(np.float64)
        return PointCloud(q(self.sensor_origin), q(self.points), q(self.intensities), self.labels)

    def without_intensity(self) -> "PointCloud":
        return PointCloud(self.sensor_origin, self.points, None, self.labels)


def rigid_transform(
    seed, enable_rotation: bool = True, enable_flips: bool = True
) -> np.ndarray:
    """Draw the augmentation matrix: z-rotation followed by optional x/y flips."""
    g = rng.generator(seed, "augment")
    theta = g.uniform(0.0, 2.0 * np.pi)
    flip_x, flip_y = g.random(2) < 0.5
    mat = np.eye(3)
    if enable_rotation:
        mat = rotation_z(theta)
    if enable_flips:
        flips = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
        mat = flips @ mat
    return mat


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(
    cloud: PointCloud, seed, enable_rotation: bool = True, enable_flips: bool = True
) -> PointCloud:
    if not (enable_rotation or enable_flips):
        return cloud
    return cloud.transformed(rigid_transform(seed, enable_rotation, enable_flips))


def downsample(cloud: PointCloud, max_points: int, seed) -> PointCloud:
    """Uniform random subset of at most ``max_points`` points (order kept)."""
    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    if len(cloud) <= max_points:
        return cloud
    idx = rng.generator(seed, "downsample").choice(len(cloud), max_points, replace=False)
    return cloud.select(np.sort(idx))
