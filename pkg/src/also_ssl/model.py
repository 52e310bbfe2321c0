"""Point-feature encoder, occupancy/intensity decoder and the pretext loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from . import nn
from .geometry import PointCloud
from .spatial import BALL3D, CYLINDER_BEV, SpatialIndex, metric_distance

log = logging.getLogger(__name__)

LATENT_DIM = 128
# scale of the decoder's output layer at init, so untrained predictions start near zero
OUTPUT_INIT_GAIN = 0.1
POINT_SUPPORTS, BEV_GRID = "point_supports", "bev_grid"
HEADS = ("per_point_ball", "ball_avg", "ball_max")


class Encoder:
    """Local PointNet: shared MLP on (dx, dy, dz, intensity) of the k nearest
    neighbors, max-pool, then a post-pool MLP producing the latent."""

    def __init__(self, k: int = 16, latent_dim: int = LATENT_DIM, seed=0, dtype=np.float32):
        self.k = k
        self.latent_dim = latent_dim
        self.point_mlp = nn.MLP([4, 64, 64, latent_dim], (seed, "encoder.point"), True, dtype)
        self.post_mlp = nn.MLP([latent_dim, latent_dim, latent_dim], (seed, "encoder.post"), False, dtype)

    def forward(self, features: np.ndarray):
        """features: (S, k, 4) -> latents (S, D) and a cache for backward."""
        s, k, c = features.shape
        dtype = self.point_mlp.layers[0].weight.dtype
        h, point_acts = self.point_mlp.forward(features.reshape(s * k, c).astype(dtype, copy=False))
        pooled, arg = nn.maxpool_rows(h, np.arange(0, s * k, k))
        z, post_acts = self.post_mlp.forward(pooled)
        return z, (point_acts, post_acts, arg, s * k)

    def backward(self, cache, dz: np.ndarray):
        point_acts, post_acts, arg, n_rows = cache
        dpooled = self.post_mlp.backward(post_acts, dz)
        dh = nn.maxpool_rows_backward(arg, dpooled, n_rows)
        self.point_mlp.backward(point_acts, dh, need_input_grad=False)

    def parameters(self):
        yield from self.point_mlp.parameters("encoder.point")
        yield from self.post_mlp.parameters("encoder.post")


class AlsoModel:
    """Encoder plus a 4-layer decoder emitting (occupancy logit, intensity)."""

    def __init__(self, seed=0, k: int = 16, latent_dim: int = LATENT_DIM, dtype=np.float32):
        self.seed = seed
        self.encoder = Encoder(k, latent_dim, seed, dtype)
        self.decoder = nn.MLP([latent_dim + 3, 128, 128, 128, 2], (seed, "decoder"), False, dtype)
        self.decoder.layers[-1].weight *= OUTPUT_INIT_GAIN

    @property
    def dtype(self):
        return self.decoder.layers[0].weight.dtype

    def named_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters("decoder")

    def params(self) -> Dict[str, np.ndarray]:
        return {n: p for n, p, _ in self.named_parameters()}

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: g for n, _, g in self.named_parameters()}

    def encoder_params(self) -> Dict[str, np.ndarray]:
        return {n: p for n, p, _ in self.encoder.parameters()}

    def zero_grad(self):
        self.encoder.point_mlp.zero_grad()
        self.encoder.post_mlp.zero_grad()
        self.decoder.zero_grad()

    def astype(self, dtype):
        self.encoder.point_mlp.astype(dtype)
        self.encoder.post_mlp.astype(dtype)
        self.decoder.astype(dtype)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.copy() for n, p in self.params().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = self.params()
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"architecture mismatch on parameters {missing[:4]}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {state[name].shape}")
            p[...] = state[name]


# ---------------------------------------------------------------- encoding


def knn(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to each center, ties broken by index."""
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    d, idx = cKDTree(points).query(centers, k=k)
    d = np.asarray(d).reshape(len(centers), k)
    idx = np.asarray(idx).reshape(len(centers), k)
    order = np.lexsort((idx, d), axis=-1)
    return np.take_along_axis(idx, order, axis=1)


def neighbor_features(
    cloud: PointCloud, support_idx: np.ndarray, k: int, use_intensity: bool = True
) -> np.ndarray:
    """(S, k, 4) array of neighbor offsets and intensities (0 when absent)."""
    centers = cloud.points[support_idx]
    nbr = knn(cloud.points, centers, k)
    feats = np.zeros((len(support_idx), k, 4))
    feats[..., :3] = cloud.points[nbr] - centers[:, None, :]
    if use_intensity and cloud.intensities is not None:
        feats[..., 3] = cloud.intensities[nbr]
    return feats


@dataclass
class LatentField:
    support_positions: np.ndarray
    latents: np.ndarray
    mode: str = POINT_SUPPORTS
    grid_origin: Optional[np.ndarray] = None
    pitch: Optional[float] = None
    cache: object = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.support_positions) != len(self.latents):
            raise ValueError("one latent per support position required")

    @property
    def metric(self) -> str:
        return CYLINDER_BEV if self.mode == BEV_GRID else BALL3D


def encode(
    cloud: PointCloud,
    model: AlsoModel,
    support_idx: Optional[np.ndarray] = None,
    use_intensity: bool = True,
) -> LatentField:
    """One latent per support point (all points by default)."""
    if support_idx is None:
        support_idx = np.arange(len(cloud))
    feats = neighbor_features(cloud, support_idx, model.encoder.k, use_intensity)
    z, cache = model.encoder.forward(feats)
    return LatentField(cloud.points[support_idx], z, POINT_SUPPORTS, cache=("points", cache))


def bev_cells(points: np.ndarray, pitch: float) -> np.ndarray:
    return np.floor(points[:, :2] / pitch).astype(np.int64)


def encode_bev(
    cloud: PointCloud, model: AlsoModel, pitch: float, use_intensity: bool = True
) -> LatentField:
    """Max-pool point latents into occupied BEV cells; supports sit at cell
    centers with z = 0."""
    if pitch <= 0:
        raise ValueError("pitch must be positive")
    point_field = encode(cloud, model, None, use_intensity)
    cells = bev_cells(cloud.points, pitch)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(len(uniq)))
    pooled, arg = nn.maxpool_rows(point_field.latents[order], starts)
    centers = np.column_stack([(uniq + 0.5) * pitch, np.zeros(len(uniq))])
    cache = ("bev", point_field.cache[1], order, arg, len(cloud))
    return LatentField(centers, pooled, BEV_GRID, np.zeros(2), float(pitch), cache)


def encode_backward(model: AlsoModel, field: LatentField, dlatents: np.ndarray):
    if field.cache[0] == "points":
        model.encoder.backward(field.cache[1], dlatents)
        return
    _, enc_cache, order, arg, n = field.cache
    dsorted = nn.maxpool_rows_backward(arg, dlatents, n)
    dpoint = np.empty_like(dsorted)
    dpoint[order] = dsorted
    model.encoder.backward(enc_cache, dpoint)


# ---------------------------------------------------------------- decoding


def scatter_rows_add(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """out[index[i]] += rows[i], summed in a fixed (row-major CSR) order."""
    if len(index) == 0:
        return np.zeros((n, rows.shape[1]), dtype=rows.dtype)
    m = csr_matrix(
        (np.ones(len(index), dtype=rows.dtype), (index, np.arange(len(index)))), shape=(n, len(index))
    )
    return np.asarray(m @ rows)


@dataclass
class Predictions:
    """Decoder outputs with (query, support) provenance per row."""

    pairs: np.ndarray  # (P, 2): query index, support index
    logits: np.ndarray
    intensity_raw: np.ndarray
    head: str
    n_supports: int
    cache: object = field(default=None, repr=False)

    @property
    def occupancy(self) -> np.ndarray:
        return nn.sigmoid_forward(self.logits)

    @property
    def intensity(self) -> np.ndarray:
        return np.clip(self.intensity_raw, 0.0, 1.0)


def find_pairs(supports: np.ndarray, queries: np.ndarray, r: float, metric: str = BALL3D) -> np.ndarray:
    """(query, support) pairs within r, sorted; the grid is built on the larger set."""
    if len(supports) == 0 or len(queries) == 0:
        return np.empty((0, 2), dtype=np.int64)
    if len(supports) >= len(queries):
        return SpatialIndex(supports, r, metric).radius_pairs(queries, r)
    sq = SpatialIndex(queries, r, metric).radius_pairs(supports, r)
    order = np.lexsort((sq[:, 0], sq[:, 1]))
    return sq[order][:, ::-1].copy()


def decode(
    field: LatentField,
    query_positions: np.ndarray,
    r: float,
    head: str,
    model: AlsoModel,
    pairs: Optional[np.ndarray] = None,
) -> Predictions:
    """Predict occupancy/intensity for queries from in-range supports.

    ``per_point_ball`` emits one prediction per (query, support) pair from
    z_s concatenated with q - s. The pooled heads pool the latents of all
    in-range supports and emit one prediction per query, relative to the
    nearest in-range support.
    """
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    if r <= 0:
        raise ValueError("r must be positive")
    q = np.asarray(query_positions, dtype=np.float64).reshape(-1, 3)
    if pairs is None:
        pairs = find_pairs(field.support_positions, q, r, field.metric)
    z = field.latents
    dtype = z.dtype
    qi, si = pairs[:, 0], pairs[:, 1]
    pool = None
    if head == "per_point_ball" or len(pairs) == 0:
        rel = q[qi] - field.support_positions[si]
        lat = z[si]
        out_pairs = pairs
    else:
        starts = np.flatnonzero(np.r_[True, qi[1:] != qi[:-1]])
        dist = metric_distance(q[qi], field.support_positions[si], field.metric)
        # nearest support per query; ties resolve to the lowest support index
        seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(qi)]))
        order = np.lexsort((si, dist, seg))
        nearest = si[order[starts]]
        qs = qi[starts]
        rel = q[qs] - field.support_positions[nearest]
        if head == "ball_avg":
            lat = nn.avgpool_rows(z[si], starts)
            arg = None
        else:
            lat, arg = nn.maxpool_rows(z[si], starts)
        out_pairs = np.stack([qs, nearest], axis=1)
        pool = (starts, arg, si)
    x = np.concatenate([lat, rel.astype(dtype)], axis=1)
    out, acts = model.decoder.forward(x)
    return Predictions(
        out_pairs, out[:, 0], out[:, 1], head, len(z), cache=(acts, pool, len(pairs))
    )


def decode_backward(
    model: AlsoModel, pred: Predictions, dlogits: np.ndarray, dintensity: np.ndarray
) -> np.ndarray:
    """Accumulate decoder gradients; return d loss / d latents (S, D)."""
    acts, pool, n_pairs = pred.cache
    dout = np.stack([dlogits, dintensity], axis=1).astype(acts[0].dtype)
    dx = model.decoder.backward(acts, dout)
    dlat = dx[:, : model.encoder.latent_dim]
    if pool is None:
        return scatter_rows_add(pred.pairs[:, 1], dlat, pred.n_supports)
    starts, arg, si = pool
    if arg is None:
        dpair = nn.avgpool_rows_backward(starts, dlat, n_pairs)
    else:
        dpair = nn.maxpool_rows_backward(arg, dlat, n_pairs)
    return scatter_rows_add(si, dpair, pred.n_supports)


# ---------------------------------------------------------------- loss


class EmptyLossError(ValueError):
    pass


@dataclass
class LossResult:
    total: float
    occupancy: float
    intensity: float
    dlogits: np.ndarray
    dintensity: np.ndarray
    n_active_supports: int
    n_pairs: int
    accuracy: float


def _group_weights(support: np.ndarray, mask: np.ndarray, weighting: str) -> np.ndarray:
    w = np.zeros(len(support))
    m = int(mask.sum())
    if m == 0:
        return w
    if weighting == "flat":
        w[mask] = 1.0 / m
        return w
    sup = support[mask]
    uniq, inv, counts = np.unique(sup, return_inverse=True, return_counts=True)
    w[mask] = 1.0 / (len(uniq) * counts[inv.reshape(-1)])
    return w


def also_loss(
    pred: Predictions,
    occupancy_targets: np.ndarray,
    intensity_targets: np.ndarray,
    lam: float = 1.0,
    intensity_metric: str = "l1",
    weighting: str = "per_ball",
) -> LossResult:
    """Occupancy BCE plus ``lam`` times the intensity error.

    ``per_ball`` averages inside each support's ball and then over supports
    with at least one query (for the intensity term, at least one front or
    behind query); ``flat`` is a single mean over all predictions.
    Targets are indexed by query.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if weighting not in ("per_ball", "flat"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if len(pred.pairs) == 0:
        raise EmptyLossError("no support has a query within range")
    qi, si = pred.pairs[:, 0], pred.pairs[:, 1]
    occ_t = np.asarray(occupancy_targets, dtype=np.float64)[qi]
    int_t = np.asarray(intensity_targets, dtype=np.float64)[qi]
    all_mask = np.ones(len(qi), dtype=bool)
    w_occ = _group_weights(si, all_mask, weighting)
    occ_loss, dlogits = nn.bce_with_logits(pred.logits, occ_t, w_occ)
    int_mask = int_t >= 0.0
    w_int = _group_weights(si, int_mask, weighting)
    metric = {"l1": nn.l1_loss, "l2": nn.l2_loss}[intensity_metric]
    int_loss, dint = metric(pred.intensity_raw, np.where(int_mask, int_t, 0.0), int_mask, w_int)
    n_active = len(np.unique(si))
    if n_active < pred.n_supports:
        log.debug("%d supports without queries excluded", pred.n_supports - n_active)
    acc = float(np.mean((pred.logits > 0) == (occ_t > 0.5)))
    return LossResult(
        occ_loss + lam * int_loss,
        occ_loss,
        int_loss,
        dlogits,
        (lam * dint).astype(dint.dtype, copy=False),
        n_active,
        len(qi),
        acc,
    )
