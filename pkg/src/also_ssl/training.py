"""Pretraining loop, scene streams and held-out occupancy evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import nn, rng
from .geometry import PointCloud, downsample, rigid_transform
from .lidar import Scene, SceneConfig, SensorModel, cast_scan, sample_scene, true_occupancy
from .model import (
    AlsoModel,
    BEV_GRID,
    HEADS,
    LatentField,
    POINT_SUPPORTS,
    also_loss,
    bev_cells,
    decode,
    decode_backward,
    find_pairs,
    knn,
)
from .queries import QuerySet, generate_queries, subsample_queries
from .spatial import BALL3D, CYLINDER_BEV

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 4
    max_points: int = 8192
    max_queries: int = 2048
    supports_per_scan: int = 128
    delta: float = 0.1
    offset_mode: str = "uniform"
    radius: float = 1.0
    lam: float = 1.0
    intensity_metric: str = "l1"
    head: str = "per_point_ball"
    loss_weighting: str = "per_ball"
    use_intensity: bool = True
    support_mode: str = "points"
    bev_pitch: float = 0.5
    k: int = 16
    augment_rotation: bool = True
    augment_flips: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "max_points", "max_queries", "supports_per_scan", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.radius <= 0 or self.delta <= 0:
            raise ValueError("radius and delta must be positive")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.support_mode not in ("points", "bev"):
            raise ValueError(f"unknown support mode {self.support_mode!r}")
        if self.offset_mode not in ("fixed", "uniform"):
            raise ValueError(f"unknown offset mode {self.offset_mode!r}")
        if self.loss_weighting not in ("per_ball", "flat"):
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")
        if self.intensity_metric not in ("l1", "l2"):
            raise ValueError(f"unknown intensity metric {self.intensity_metric!r}")


@dataclass
class DataConfig:
    """Scene index ranges per split; each scene is keyed by (seed, index)."""

    seed: int = 0
    train_start: int = 0
    n_train: int = 256
    eval_start: int = 100_000
    n_eval: int = 16
    probe_train_start: int = 200_000
    n_probe_train: int = 64
    probe_eval_start: int = 300_000
    n_probe_eval: int = 32

    def ranges(self) -> Dict[str, range]:
        return {
            "train": range(self.train_start, self.train_start + self.n_train),
            "eval": range(self.eval_start, self.eval_start + self.n_eval),
            "probe_train": range(self.probe_train_start, self.probe_train_start + self.n_probe_train),
            "probe_eval": range(self.probe_eval_start, self.probe_eval_start + self.n_probe_eval),
        }

    def check_disjoint(self):
        items = list(self.ranges().items())
        for i, (na, a) in enumerate(items):
            for nb, b in items[i + 1 :]:
                if a.start < b.stop and b.start < a.stop:
                    raise ValueError(f"scene ranges {na} and {nb} overlap")


@dataclass
class MetricsReport:
    """Loss curves, scalar metrics, and the configuration that produced them."""

    curves: Dict[str, List[float]] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    seed: int = 0
    wall_clock_s: float = 0.0

    def write(self, directory, stem: str = "metrics"):
        """CSV of the curves plus a JSON summary. Wall-clock time is kept out
        of both files so reruns hash identically."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        if self.curves:
            names = list(self.curves)
            p = directory / f"{stem}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch"] + names)
                for i in range(len(self.curves[names[0]])):
                    w.writerow([i] + [repr(float(self.curves[n][i])) for n in names])
            paths.append(p)
        p = directory / f"{stem}.json"
        summary = {"seed": self.seed, "metrics": self.metrics, "config": self.config}
        p.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
        paths.append(p)
        return paths


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


# ---------------------------------------------------------------- scene streams


class SyntheticScenes:
    """Deterministic simulated scans keyed by (data seed, scene index).

    Scans are rounded to float32 exactly as the scan file format stores them,
    so in-process and file-mediated pipelines see identical inputs.
    """

    def __init__(self, scene_config: SceneConfig, sensor: SensorModel, seed: int = 0, cache: bool = True):
        self.scene_config = scene_config
        self.sensor = sensor
        self.seed = seed
        self._cache: Dict[int, PointCloud] = {} if cache else None

    def scene(self, index: int) -> Scene:
        return sample_scene(self.scene_config, (self.seed, "scene", index), self.sensor.origin)

    def scan(self, index: int) -> PointCloud:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        cloud = cast_scan(self.scene(index), self.sensor, (self.seed, "scan", index)).quantized()
        if self._cache is not None:
            self._cache[index] = cloud
        return cloud

    def queries(self, index: int, delta: float, offset_mode: str) -> QuerySet:
        seed = rng.derive_seed(self.seed, "queries", index)
        return generate_queries(self.scan(index), delta, offset_mode, seed).quantized()


class FileScenes:
    """Scans (and optionally precomputed query sets) read from directories.

    Files are named by scene index: ``{index:06d}.bin`` (+ ``.hdr``/``.label``)
    and ``{index:06d}.q``. Without a query directory, queries are generated
    exactly as :class:`SyntheticScenes` does.
    """

    def __init__(self, scan_dir, query_dir=None, seed: int = 0):
        from .formats import read_queries, read_scan

        self._read_scan, self._read_queries = read_scan, read_queries
        self.scan_dir = Path(scan_dir)
        self.query_dir = None if query_dir is None else Path(query_dir)
        self.seed = seed
        self._cache: Dict[int, PointCloud] = {}

    def indices(self) -> List[int]:
        return sorted(int(p.stem) for p in self.scan_dir.glob("*.bin"))

    def scan(self, index: int) -> PointCloud:
        if index not in self._cache:
            path = self.scan_dir / f"{index:06d}.bin"
            if not path.exists():
                raise FileNotFoundError(f"missing scan {path}")
            self._cache[index] = self._read_scan(path)
        return self._cache[index]

    def queries(self, index: int, delta: float, offset_mode: str) -> QuerySet:
        if self.query_dir is None:
            seed = rng.derive_seed(self.seed, "queries", index)
            return generate_queries(self.scan(index), delta, offset_mode, seed).quantized()
        path = self.query_dir / f"{index:06d}.q"
        if not path.exists():
            raise FileNotFoundError(f"missing query set {path}")
        qs = self._read_queries(path)
        if qs.delta != delta or qs.offset_mode != offset_mode:
            raise ValueError(f"{path} was generated with delta={qs.delta}, mode={qs.offset_mode}")
        return qs


# ---------------------------------------------------------------- batching


@dataclass
class _SceneInputs:
    feats: np.ndarray  # (R, k, 4) encoder rows
    groups: Optional[np.ndarray]  # BEV: start row of each cell; None for point supports
    supports: np.ndarray  # (S, 3)
    queries: np.ndarray  # (Q, 3)
    occupancy: np.ndarray
    intensity: np.ndarray
    pairs: np.ndarray  # (P, 2) local (query, support)


def _prepare(cloud: PointCloud, qs: QuerySet, cfg: PretrainConfig, key) -> _SceneInputs:
    cloud = downsample(cloud, cfg.max_points, key)
    qs = subsample_queries(qs, cfg.max_queries, key)
    rot = rigid_transform(key, cfg.augment_rotation, cfg.augment_flips)
    cloud = cloud.transformed(rot)
    qpos = qs.positions @ rot.T
    g = rng.generator(key, "supports")
    inten = cloud.intensities if (cfg.use_intensity and cloud.intensities is not None) else None
    if cfg.support_mode == "points":
        n_sup = min(cfg.supports_per_scan, len(cloud))
        sup_idx = np.sort(g.choice(len(cloud), n_sup, replace=False))
        rows, groups = sup_idx, None
        supports = cloud.points[sup_idx]
        metric = BALL3D
    else:
        cells = bev_cells(cloud.points, cfg.bev_pitch)
        uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        chosen = np.sort(g.choice(len(uniq), min(cfg.supports_per_scan, len(uniq)), replace=False))
        remap = np.full(len(uniq), -1)
        remap[chosen] = np.arange(len(chosen))
        member = remap[inverse]
        rows = np.nonzero(member >= 0)[0]
        rows = rows[np.argsort(member[rows], kind="stable")]
        groups = np.searchsorted(member[rows], np.arange(len(chosen)))
        supports = np.column_stack([(uniq[chosen] + 0.5) * cfg.bev_pitch, np.zeros(len(chosen))])
        metric = CYLINDER_BEV
    nbr = knn(cloud.points, cloud.points[rows], cfg.k)
    feats = np.zeros((len(rows), cfg.k, 4))
    feats[..., :3] = cloud.points[nbr] - cloud.points[rows][:, None, :]
    if inten is not None:
        feats[..., 3] = inten[nbr]
    pairs = find_pairs(supports, qpos, cfg.radius, metric)
    return _SceneInputs(feats, groups, supports, qpos, qs.occupancy, qs.intensity, pairs)


@dataclass
class _Batch:
    feats: np.ndarray
    groups: Optional[np.ndarray]
    field: LatentField
    queries: np.ndarray
    occupancy: np.ndarray
    intensity: np.ndarray
    pairs: np.ndarray


def _collate(items: List[_SceneInputs], mode: str) -> _Batch:
    feats = np.concatenate([it.feats for it in items])
    groups = None
    if items[0].groups is not None:
        offs = np.cumsum([0] + [len(it.feats) for it in items[:-1]])
        groups = np.concatenate([it.groups + o for it, o in zip(items, offs)])
    s_off = np.cumsum([0] + [len(it.supports) for it in items[:-1]])
    q_off = np.cumsum([0] + [len(it.queries) for it in items[:-1]])
    pairs = np.concatenate([it.pairs + np.array([qo, so]) for it, qo, so in zip(items, q_off, s_off)])
    supports = np.concatenate([it.supports for it in items])
    field = LatentField(supports, np.zeros((len(supports), 0)), mode)
    return _Batch(
        feats,
        groups,
        field,
        np.concatenate([it.queries for it in items]),
        np.concatenate([it.occupancy for it in items]),
        np.concatenate([it.intensity for it in items]),
        pairs,
    )


def _encode_batch(model: AlsoModel, batch: _Batch):
    z, enc_cache = model.encoder.forward(batch.feats)
    pool = None
    if batch.groups is not None:
        z, arg = nn.maxpool_rows(z, batch.groups)
        pool = (arg, len(batch.feats))
    batch.field.latents = z
    return enc_cache, pool


def _encode_batch_backward(model: AlsoModel, enc_cache, pool, dz: np.ndarray):
    if pool is not None:
        arg, n = pool
        dz = nn.maxpool_rows_backward(arg, dz, n)
    model.encoder.backward(enc_cache, dz)


class TrainingDiverged(RuntimeError):
    pass


def _adamw_state(cfg: PretrainConfig) -> nn.AdamWState:
    return nn.AdamWState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def train_step(model, state, stream, indices, epoch, cfg: PretrainConfig, step: int):
    """One optimizer step on a batch of scenes; returns the LossResult."""
    items = []
    for idx in indices:
        key = (cfg.seed, "step", epoch, int(idx))
        qs = stream.queries(int(idx), cfg.delta, cfg.offset_mode)
        items.append(_prepare(stream.scan(int(idx)), qs, cfg, key))
    mode = BEV_GRID if cfg.support_mode == "bev" else POINT_SUPPORTS
    batch = _collate(items, mode)
    model.zero_grad()
    enc_cache, pool = _encode_batch(model, batch)
    pred = decode(batch.field, batch.queries, cfg.radius, cfg.head, model, pairs=batch.pairs)
    res = also_loss(pred, batch.occupancy, batch.intensity, cfg.lam, cfg.intensity_metric, cfg.loss_weighting)
    if not math.isfinite(res.total):
        raise TrainingDiverged(f"non-finite loss at step {step}")
    dz = decode_backward(model, pred, res.dlogits, res.dintensity)
    _encode_batch_backward(model, enc_cache, pool, dz)
    nn.adamw_step(model.params(), model.grads(), state)
    return res


def pretrain(
    cfg: PretrainConfig,
    stream,
    scene_indices: Sequence[int],
    checkpoint_dir=None,
    on_epoch: Optional[Callable[[int, Dict[str, float]], None]] = None,
):
    """Optimize the occupancy (+ intensity) objective over ``scene_indices``.

    Returns (model, optimizer state, MetricsReport). The learning rate is
    constant; every random choice is keyed by (seed, epoch, scene index).
    """
    from .formats import write_checkpoint

    t0 = time.perf_counter()
    model = AlsoModel(cfg.seed, cfg.k)
    state = _adamw_state(cfg)
    scene_indices = np.asarray(list(scene_indices), dtype=np.int64)
    curves = {k: [] for k in ("loss", "occupancy_loss", "intensity_loss", "occupancy_accuracy")}
    step = 0
    for epoch in range(cfg.epochs):
        order = scene_indices[rng.generator(cfg.seed, "epoch_order", epoch).permutation(len(scene_indices))]
        sums = np.zeros(4)
        n_steps = 0
        for b in range(0, len(order), cfg.batch_size):
            try:
                res = train_step(model, state, stream, order[b : b + cfg.batch_size], epoch, cfg, step)
            except (TrainingDiverged, nn.NonFiniteError) as err:
                if checkpoint_dir is not None:
                    dump = Path(checkpoint_dir) / f"diverged_step{step:06d}.ckpt"
                    write_checkpoint(dump, model, state, {"epoch": epoch, "step": step})
                    raise TrainingDiverged(f"{err}; state dumped to {dump}") from err
                raise TrainingDiverged(str(err)) from err
            sums += (res.total, res.occupancy, res.intensity, res.accuracy)
            n_steps += 1
            step += 1
        means = sums / n_steps
        for k, v in zip(curves, means):
            curves[k].append(float(v))
        log.info("epoch %d loss %.4f occ %.4f int %.4f acc %.3f", epoch, *means)
        if on_epoch is not None:
            on_epoch(epoch, {k: curves[k][-1] for k in curves})
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            write_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt", model, state, {"epoch": epoch + 1})
    report = MetricsReport(
        curves,
        {
            "final_loss": curves["loss"][-1],
            "final_occupancy_accuracy": curves["occupancy_accuracy"][-1],
            "steps": step,
        },
        asdict(cfg),
        cfg.seed,
        time.perf_counter() - t0,
    )
    return model, state, report


# ---------------------------------------------------------------- evaluation


def predict_query_occupancy(
    model: AlsoModel,
    cloud: PointCloud,
    query_positions: np.ndarray,
    radius: float,
    use_intensity: bool = True,
    max_supports: Optional[int] = None,
    seed=0,
):
    """Per-query probability of being full: the mean of the per-support
    predictions over all in-range supports. NaN where no support is in range."""
    from .model import encode

    sup = None
    if max_supports is not None and len(cloud) > max_supports:
        sup = np.sort(rng.generator(seed, "eval_supports").choice(len(cloud), max_supports, replace=False))
    field = encode(cloud, model, sup, use_intensity)
    pred = decode(field, query_positions, radius, "per_point_ball", model)
    prob = pred.occupancy.astype(np.float64)
    nq = len(query_positions)
    sums = np.bincount(pred.pairs[:, 0], weights=prob, minlength=nq)
    counts = np.bincount(pred.pairs[:, 0], minlength=nq)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / counts, np.nan)


def binary_metrics(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    n = len(pred)
    return {
        "accuracy": float((pred == truth).mean()) if n else float("nan"),
        "precision": tp / (tp + fp) if tp + fp else float("nan"),
        "recall": tp / (tp + fn) if tp + fn else float("nan"),
    }


def threshold_sweep(prob: np.ndarray, truth: np.ndarray, thresholds: Sequence[float]):
    """Precision/recall at each threshold (prediction = prob > threshold)."""
    return [dict(threshold=float(t), **binary_metrics(prob > t, truth)) for t in thresholds]


def evaluate_occupancy(
    model: AlsoModel,
    stream,
    scene_indices: Sequence[int],
    cfg: PretrainConfig,
    seed: int = 12345,
    max_supports: Optional[int] = 4096,
    offset_mode: Optional[str] = None,
) -> MetricsReport:
    """Held-out occupancy accuracy against query labels and simulator truth."""
    t0 = time.perf_counter()
    probs, labels, truths = [], [], []
    n_total = 0
    for idx in scene_indices:
        key = (seed, "eval", int(idx))
        scan = stream.scan(int(idx))
        cloud = downsample(scan, cfg.max_points, key)
        qs = generate_queries(scan, cfg.delta, offset_mode or cfg.offset_mode, rng.derive_seed(key, "queries"))
        qs = subsample_queries(qs, cfg.max_queries, key).quantized()
        p = predict_query_occupancy(model, cloud, qs.positions, cfg.radius, cfg.use_intensity, max_supports, key)
        covered = ~np.isnan(p)
        n_total += len(p)
        probs.append(p[covered])
        labels.append(qs.occupancy[covered])
        if hasattr(stream, "scene"):
            truths.append(true_occupancy(stream.scene(int(idx)), qs.positions[covered]))
    prob = np.concatenate(probs)
    lab = np.concatenate(labels).astype(bool)
    m = {f"query_{k}": v for k, v in binary_metrics(prob > 0.5, lab).items()}
    majority = max(lab.mean(), 1 - lab.mean())
    m["majority_baseline"] = float(majority)
    m["coverage"] = float(len(prob) / max(n_total, 1))
    m["n_queries"] = int(len(prob))
    if truths:
        truth = np.concatenate(truths).astype(bool)
        m.update({f"true_{k}": v for k, v in binary_metrics(prob > 0.5, truth).items()})
        m["label_noise_rate"] = float((truth != lab).mean())
    return MetricsReport({}, m, asdict(cfg), cfg.seed, time.perf_counter() - t0)
