"""Synthetic rotating-lidar scans of scenes built from simple solids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .geometry import EPS_GEOM, PointCloud

GROUND, BOX, CYLINDER, SPHERE = "ground_plane", "box", "vertical_cylinder", "sphere"
KINDS = (GROUND, BOX, CYLINDER, SPHERE)
CLASS_NAMES = ("ground", "box", "cylinder", "sphere")

_HIT_EPS = 1e-9


class NoReturnsError(RuntimeError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    """One solid of the scene.

    ``center`` is the plane point (only z used) for the ground, the centroid
    for box/cylinder/sphere. ``size`` holds half extents for a box,
    ``(radius, height)`` for a cylinder and ``(radius,)`` for a sphere.
    """

    kind: str
    center: tuple
    size: tuple = ()
    yaw: float = 0.0
    class_id: int = 0
    base_intensity: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        expected = {GROUND: 0, BOX: 3, CYLINDER: 2, SPHERE: 1}[self.kind]
        if len(self.size) != expected:
            raise ValueError(f"{self.kind} needs {expected} size values")
        if any(s <= 0 for s in self.size):
            raise ValueError("extents must be strictly positive")
        if not 0.0 <= self.base_intensity <= 1.0:
            raise ValueError("base_intensity must lie in [0, 1]")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @classmethod
    def ground(cls, height=0.0, class_id=0, base_intensity=0.15):
        return cls(GROUND, (0.0, 0.0, height), (), 0.0, class_id, base_intensity)

    @classmethod
    def box(cls, center, half_extents, yaw=0.0, class_id=1, base_intensity=0.45):
        return cls(BOX, center, tuple(half_extents), yaw, class_id, base_intensity)

    @classmethod
    def cylinder(cls, center, radius, height, class_id=2, base_intensity=0.70):
        return cls(CYLINDER, center, (radius, height), 0.0, class_id, base_intensity)

    @classmethod
    def sphere(cls, center, radius, class_id=3, base_intensity=0.90):
        return cls(SPHERE, center, (radius,), 0.0, class_id, base_intensity)

    def _to_local(self, x: np.ndarray) -> np.ndarray:
        d = np.asarray(x, dtype=np.float64) - np.asarray(self.center)
        if self.yaw == 0.0:
            return d
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        # inverse z-rotation
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], -1)

    def _dir_to_local(self, d: np.ndarray) -> np.ndarray:
        if self.yaw == 0.0:
            return d
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], -1)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Closed-solid membership test for an array of points (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == GROUND:
            return x[..., 2] <= self.center[2]
        loc = self._to_local(x)
        if self.kind == BOX:
            return (np.abs(loc) <= np.asarray(self.size)).all(axis=-1)
        if self.kind == CYLINDER:
            r, h = self.size
            return (loc[..., 0] ** 2 + loc[..., 1] ** 2 <= r * r) & (np.abs(loc[..., 2]) <= h / 2)
        return (loc**2).sum(axis=-1) <= self.size[0] ** 2

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Exact signed distance to the surface (negative inside)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == GROUND:
            return x[..., 2] - self.center[2]
        loc = self._to_local(x)
        if self.kind == SPHERE:
            return np.linalg.norm(loc, axis=-1) - self.size[0]
        if self.kind == BOX:
            q = np.abs(loc) - np.asarray(self.size)
        else:
            r, h = self.size
            q = np.stack([np.hypot(loc[..., 0], loc[..., 1]) - r, np.abs(loc[..., 2]) - h / 2], -1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance along each unit ray to the first entry point, inf on miss."""
        origin = np.asarray(origin, dtype=np.float64)
        n = len(dirs)
        t = np.full(n, np.inf)
        if self.kind == GROUND:
            h = self.center[2]
            if origin[2] <= h:
                return t
            down = dirs[:, 2] < 0
            t[down] = (h - origin[2]) / dirs[down, 2]
            return t
        o = self._to_local(origin)
        d = self._dir_to_local(dirs)
        if self.kind == SPHERE:
            return _first_root(
                (d * d).sum(1), 2.0 * (d @ o), float(o @ o) - self.size[0] ** 2, t
            )
        if self.kind == BOX:
            return _slab(o, d, np.asarray(self.size), t)
        r, h = self.size
        side = _first_root(
            d[:, 0] ** 2 + d[:, 1] ** 2,
            2.0 * (d[:, 0] * o[0] + d[:, 1] * o[1]),
            o[0] ** 2 + o[1] ** 2 - r * r,
            np.full(n, np.inf),
        )
        z_side = o[2] + side * d[:, 2]
        side[np.abs(z_side) > h / 2] = np.inf
        t = side
        nz = d[:, 2] != 0
        for zc in (-h / 2, h / 2):
            tc = np.full(n, np.inf)
            tc[nz] = (zc - o[2]) / d[nz, 2]
            fin = np.isfinite(tc)
            px = np.where(fin, o[0] + np.where(fin, tc, 0.0) * d[:, 0], np.inf)
            py = np.where(fin, o[1] + np.where(fin, tc, 0.0) * d[:, 1], np.inf)
            ok = (tc > _HIT_EPS) & fin & (px * px + py * py <= r * r)
            t = np.where(ok & (tc < t), tc, t)
        return t


def _first_root(a, b, c, out):
    """Smallest positive root of a t^2 + b t + c (vectorized), else inf."""
    a = np.broadcast_to(a, out.shape)
    b = np.broadcast_to(b, out.shape)
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable pair of roots
    qv = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(ok, qv / a, np.inf)
        r2 = np.where(ok & (qv != 0), c / qv, np.inf)
    # the far root is an exit; a ray starting inside never counts as a hit
    lo = np.minimum(r1, r2)
    out[:] = np.where(ok & (lo > _HIT_EPS), lo, np.inf)
    return out


def _slab(o, d, half, out):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    par = d == 0
    inside_slab = np.abs(o) <= half
    t1 = np.where(par, np.where(inside_slab, -np.inf, np.inf), t1)
    t2 = np.where(par, np.inf, t2)
    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    hit = (tnear <= tfar) & (tnear > _HIT_EPS) & np.isfinite(tnear)
    out[:] = np.where(hit, tnear, np.inf)
    return out


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    bounds: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax))

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", tuple(self.primitives))


@dataclass(frozen=True)
class SensorModel:
    n_azimuth: int = 1024
    elevation_angles: tuple = tuple(np.deg2rad(np.linspace(-25.0, 5.0, 32)).tolist())
    max_range: float = 60.0
    origin: tuple = (0.0, 0.0, 1.8)
    range_noise_sigma: float = 0.01
    intensity_noise_sigma: float = 0.03

    def __post_init__(self):
        el = np.asarray(self.elevation_angles, dtype=np.float64)
        if self.n_azimuth < 1:
            raise ValueError("n_azimuth must be >= 1")
        if len(el) == 0 or (np.diff(el) <= 0).any():
            raise ValueError("elevation angles must be strictly increasing")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.range_noise_sigma < 0 or self.intensity_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        object.__setattr__(self, "elevation_angles", tuple(float(e) for e in el))
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    def ray_directions(self) -> np.ndarray:
        """Unit directions ordered channel-major (ray = channel * n_azimuth + step)."""
        el = np.asarray(self.elevation_angles)[:, None]
        az = (2.0 * np.pi / self.n_azimuth) * np.arange(self.n_azimuth)[None, :]
        d = np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], -1
        )
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class SceneConfig:
    half_extent: float = 25.0
    ground_height: float = 0.0
    n_boxes: int = 10
    n_cylinders: int = 8
    n_spheres: int = 6
    box_half_xy: tuple = (0.5, 2.5)
    box_half_z: tuple = (0.5, 1.5)
    cylinder_radius: tuple = (0.15, 0.6)
    cylinder_height: tuple = (1.0, 4.0)
    sphere_radius: tuple = (0.4, 1.2)
    clear_radius: float = 2.0
    class_ids: tuple = (0, 1, 2, 3)
    class_intensity: tuple = (0.15, 0.45, 0.70, 0.90)
    intensity_spread: float = 0.05
    max_retries: int = 100


def _base_intensity(config: SceneConfig, g, kind_idx: int) -> float:
    c = config.class_intensity[kind_idx]
    return float(np.clip(g.uniform(c - config.intensity_spread, c + config.intensity_spread), 0.0, 1.0))


def sample_scene(config: SceneConfig, seed, sensor_origin=(0.0, 0.0, 1.8)) -> Scene:
    """Ground plane plus randomly placed boxes, cylinders and spheres."""
    g = rng.generator(seed, "scene")
    origin = np.asarray(sensor_origin, dtype=np.float64)
    he, z0 = config.half_extent, config.ground_height
    bounds = ((-he, -he, z0 - 1.0), (he, he, z0 + 10.0))
    ids = config.class_ids
    prims = [Primitive.ground(z0, ids[0], _base_intensity(config, g, 0))]
    if origin[2] <= z0:
        raise PlacementError("sensor origin lies below the ground")

    def place(make):
        for _ in range(config.max_retries):
            xy = g.uniform(-he, he, 2)
            if np.hypot(*(xy - origin[:2])) < config.clear_radius:
                continue
            p = make(xy)
            if not p.contains(origin):
                return p
        raise PlacementError("could not keep the sensor outside the solids")

    for _ in range(config.n_boxes):
        hx, hy = g.uniform(*config.box_half_xy, 2)
        hz = g.uniform(*config.box_half_z)
        yaw = g.uniform(0.0, np.pi)
        inten = _base_intensity(config, g, 1)
        prims.append(place(lambda xy: Primitive.box((xy[0], xy[1], z0 + hz), (hx, hy, hz), yaw, ids[1], inten)))
    for _ in range(config.n_cylinders):
        r = g.uniform(*config.cylinder_radius)
        h = g.uniform(*config.cylinder_height)
        inten = _base_intensity(config, g, 2)
        prims.append(place(lambda xy: Primitive.cylinder((xy[0], xy[1], z0 + h / 2), r, h, ids[2], inten)))
    for _ in range(config.n_spheres):
        r = g.uniform(*config.sphere_radius)
        inten = _base_intensity(config, g, 3)
        prims.append(place(lambda xy: Primitive.sphere((xy[0], xy[1], z0 + r), r, ids[3], inten)))
    return Scene(tuple(prims), bounds)


def first_hits(scene: Scene, origin, dirs: np.ndarray):
    """Brute-force nearest hit over all primitives: (distance, primitive index)."""
    ts = np.stack([p.intersect(origin, dirs) for p in scene.primitives])
    which = np.argmin(ts, axis=0)
    return ts[which, np.arange(len(dirs))], which


def cast_scan(scene: Scene, sensor: SensorModel, seed) -> PointCloud:
    origin = np.asarray(sensor.origin)
    dirs = sensor.ray_directions()
    t, which = first_hits(scene, origin, dirs)
    ray_idx = np.nonzero(t <= sensor.max_range)[0]
    if len(ray_idx) == 0:
        raise NoReturnsError("no ray hit the scene")
    t, which = t[ray_idx], which[ray_idx]
    if sensor.range_noise_sigma > 0:
        t = t + sensor.range_noise_sigma * rng.keyed_normal(rng.derive_seed(seed, "range"), ray_idx)
        t = np.clip(t, 2 * EPS_GEOM, sensor.max_range)
    points = origin + t[:, None] * dirs[ray_idx]
    base = np.array([p.base_intensity for p in scene.primitives])[which]
    labels = np.array([p.class_id for p in scene.primitives])[which]
    if sensor.intensity_noise_sigma > 0:
        base = base + sensor.intensity_noise_sigma * rng.keyed_normal(
            rng.derive_seed(seed, "intensity"), ray_idx
        )
    return PointCloud(origin, points, np.clip(base, 0.0, 1.0), labels)


def true_occupancy(scene: Scene, x: np.ndarray) -> np.ndarray:
    """1 where x lies inside any solid (the ground is the half-space below it)."""
    x = np.asarray(x, dtype=np.float64)
    occ = np.zeros(x.shape[:-1], dtype=bool)
    for p in scene.primitives:
        occ |= p.contains(x)
    return occ.astype(np.uint8)
