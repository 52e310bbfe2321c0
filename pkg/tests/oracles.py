"""Independent reference implementations used only by the tests."""

import numpy as np


def brute_force_pairs(supports, queries, r, mode="ball3d"):
    """Every (query, support) pair within r, by exhaustive double loop."""
    s = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    dims = 2 if mode == "cylinder_bev" else 3
    out = []
    for i in range(len(q)):
        d = np.linalg.norm(s[:, :dims] - q[i, :dims], axis=1)
        out.extend((i, j) for j in np.flatnonzero(d <= r))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f with respect to array x (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def segment_is_free(scene, origin, point, n=400, margin=1e-6):
    """True if no primitive contains a point strictly inside the segment
    (origin, point), sampled densely and stopping short of the endpoint."""
    origin = np.asarray(origin, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    length = np.linalg.norm(point - origin)
    t = np.linspace(0.0, 1.0, n, endpoint=False)[1:]
    t = t[t * length < length - margin]
    x = origin + t[:, None] * (point - origin)
    return not any(p.contains(x).any() for p in scene.primitives)


def implicit_residual(prim, x):
    """|f(x)| for the primitive's defining surface equation (not the SDF code path)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(prim.center)
    if prim.kind == "ground_plane":
        return np.abs(x[..., 2] - c[2])
    d = x - c
    ca, sa = np.cos(prim.yaw), np.sin(prim.yaw)
    loc = np.stack([ca * d[..., 0] + sa * d[..., 1], -sa * d[..., 0] + ca * d[..., 1], d[..., 2]], -1)
    if prim.kind == "sphere":
        return np.abs(np.sqrt((loc**2).sum(-1)) - prim.size[0])
    if prim.kind == "box":
        # on a face: max normalized coordinate equals 1
        return np.abs(np.max(np.abs(loc) - np.asarray(prim.size), axis=-1))
    r, h = prim.size
    radial = np.sqrt(loc[..., 0] ** 2 + loc[..., 1] ** 2) - r
    axial = np.abs(loc[..., 2]) - h / 2
    return np.abs(np.maximum(radial, axial))
