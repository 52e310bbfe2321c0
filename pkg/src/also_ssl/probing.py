"""Downstream evaluation: linear probe / fine-tune for per-point semantic
labels, binary separability probes, and the ablation harness."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn, rng
from .geometry import PointCloud, downsample
from .lidar import CLASS_NAMES
from .model import AlsoModel, neighbor_features
from .training import DataConfig, MetricsReport, PretrainConfig, pretrain

log = logging.getLogger(__name__)

# label fraction -> downstream epochs
EPOCH_TABLE = ((0.001, 1000), (0.01, 500), (0.1, 100), (0.5, 50), (1.0, 30))
LINEAR_PROBE, FINETUNE = "linear_probe", "finetune"


def epochs_for_fraction(fraction: float) -> int:
    """Epoch count of the smallest tabulated fraction that is >= ``fraction``."""
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    for f, e in EPOCH_TABLE:
        if fraction <= f + 1e-12:
            return e
    return EPOCH_TABLE[-1][1]


@dataclass
class ProbeConfig:
    mode: str = LINEAR_PROBE
    epochs: int = 0  # 0 selects the count from EPOCH_TABLE
    base_lr: float = 1e-3
    label_fraction: float = 1.0
    seed: int = 0
    batch_points: int = 1024
    points_per_scan: int = 2048
    eval_points_per_scan: int = 4096
    max_points: int = 8192
    n_classes: int = len(CLASS_NAMES)
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.mode not in (LINEAR_PROBE, FINETUNE):
            raise ValueError(f"unknown probe mode {self.mode!r}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label fraction must lie in (0, 1]")
        if self.epochs < 0 or self.batch_points < 1 or self.points_per_scan < 1:
            raise ValueError("invalid probe counts")

    @property
    def n_epochs(self) -> int:
        return self.epochs or epochs_for_fraction(self.label_fraction)


# ---------------------------------------------------------------- features


@dataclass
class _ProbeScene:
    feats: np.ndarray  # (n, k, 4) encoder inputs
    labels: np.ndarray
    x: np.ndarray  # sensor-relative x, for the left/right probe
    index: int = 0


def _probe_scene(cloud: PointCloud, n_points, max_points, k, use_intensity, key, index=0) -> _ProbeScene:
    if cloud.labels is None:
        raise ValueError("probe scenes must carry point labels")
    cloud = downsample(cloud, max_points, key)
    n = min(n_points, len(cloud))
    idx = np.sort(rng.generator(key, "probe_points").choice(len(cloud), n, replace=False))
    feats = neighbor_features(cloud, idx, k, use_intensity)
    return _ProbeScene(feats, cloud.labels[idx], cloud.points[idx, 0] - cloud.sensor_origin[0], index)


def _scenes(stream, indices, n_points, max_points, k, use_intensity, seed) -> List[_ProbeScene]:
    return [
        _probe_scene(stream.scan(int(i)), n_points, max_points, k, use_intensity, (seed, "probe", int(i)), int(i))
        for i in indices
    ]


def _latents(model: AlsoModel, scene: _ProbeScene) -> np.ndarray:
    return model.encoder.forward(scene.feats)[0]


def confusion(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both truth and prediction."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


# ---------------------------------------------------------------- probe training


def _train_classifier(
    model: AlsoModel,
    train: List[_ProbeScene],
    labels: List[np.ndarray],
    n_classes: int,
    cfg: ProbeConfig,
    finetune: bool,
) -> nn.Linear:
    head = nn.Linear(model.encoder.latent_dim, n_classes, (cfg.seed, "probe_head"), 1.0, model.dtype)
    state = nn.AdamWState(lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    y_all = np.concatenate(labels)
    if finetune:
        x_all = np.concatenate([s.feats for s in train])
    else:
        x_all = np.concatenate([_latents(model, s) for s in train])
    epochs = cfg.n_epochs
    for epoch in range(epochs):
        lr = nn.cosine_lr(epoch, epochs, cfg.base_lr)
        order = rng.generator(cfg.seed, "probe_order", epoch).permutation(len(y_all))
        for b in range(0, len(order), cfg.batch_points):
            rows = order[b : b + cfg.batch_points]
            head.zero_grad()
            if finetune:
                model.zero_grad()
                z, cache = model.encoder.forward(x_all[rows])
            else:
                z = x_all[rows]
            logits = head.forward(z)
            _, dlogits = nn.softmax_cross_entropy(logits, y_all[rows])
            dz = head.backward(z, dlogits, need_input_grad=finetune)
            params = {"head.weight": head.weight, "head.bias": head.bias}
            grads = {"head.weight": head.grad_weight, "head.bias": head.grad_bias}
            if finetune:
                model.encoder.backward(cache, dz)
                for n, p, g in model.encoder.parameters():
                    params[n], grads[n] = p, g
            nn.adamw_step(params, grads, state, lr)
    return head


def _select_fraction(indices: Sequence[int], fraction: float, seed) -> np.ndarray:
    indices = np.asarray(list(indices), dtype=np.int64)
    n = max(1, int(round(fraction * len(indices))))
    pick = rng.generator(seed, "label_fraction").choice(len(indices), n, replace=False)
    return np.sort(indices[pick])


def probe(
    model: AlsoModel,
    cfg: ProbeConfig,
    stream,
    train_indices: Sequence[int],
    eval_indices: Sequence[int],
    use_intensity: bool = True,
    label_fn=None,
    class_names: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Train a linear head on encoder latents (frozen, or jointly with the
    encoder in fine-tune mode) and report per-class IoU on held-out scenes.

    ``model`` is modified in place in fine-tune mode. ``label_fn`` maps a
    probe scene to integer labels (defaults to the semantic labels).
    """
    t0 = time.perf_counter()
    n_classes = cfg.n_classes
    label_fn = label_fn or (lambda s: s.labels)
    names = list(class_names or CLASS_NAMES)[:n_classes]
    names += [f"class{c}" for c in range(len(names), n_classes)]
    chosen = _select_fraction(train_indices, cfg.label_fraction, cfg.seed)
    k = model.encoder.k
    train = _scenes(stream, chosen, cfg.points_per_scan, cfg.max_points, k, use_intensity, cfg.seed)
    train_labels = [np.asarray(label_fn(s), dtype=np.int64) for s in train]
    if any((y < 0).any() or (y >= n_classes).any() for y in train_labels):
        raise ValueError("label outside [0, n_classes)")
    head = _train_classifier(model, train, train_labels, n_classes, cfg, cfg.mode == FINETUNE)

    test = _scenes(stream, eval_indices, cfg.eval_points_per_scan, cfg.max_points, k, use_intensity, cfg.seed)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for s in test:
        pred = np.argmax(head.forward(_latents(model, s)), axis=1)
        cm += confusion(pred, np.asarray(label_fn(s), dtype=np.int64), n_classes)
    iou = iou_from_confusion(cm)
    seen = np.bincount(np.concatenate(train_labels), minlength=n_classes) > 0
    present = cm.sum(1) > 0
    absent = [names[c] for c in range(n_classes) if present[c] and not seen[c]]
    if absent:
        log.warning("classes absent from training labels, excluded from mIoU: %s", absent)
    scored = present & seen
    metrics = {
        "miou": float(np.mean(iou[scored])) if scored.any() else float("nan"),
        "accuracy": float(np.trace(cm) / cm.sum()),
        "absent_from_training": absent,
        "n_train_scenes": int(len(chosen)),
        "epochs": cfg.n_epochs,
    }
    for c in range(n_classes):
        metrics[f"iou_{names[c]}"] = float(iou[c]) if scored[c] else None
    return MetricsReport({}, metrics, asdict(cfg), cfg.seed, time.perf_counter() - t0)


def _ground_labels(s: _ProbeScene) -> np.ndarray:
    return (s.labels != 0).astype(np.int64)


def _side_labels(s: _ProbeScene) -> np.ndarray:
    return (s.x > 0).astype(np.int64)


def separability_probes(
    model: AlsoModel,
    stream,
    train_indices: Sequence[int],
    eval_indices: Sequence[int],
    cfg: Optional[ProbeConfig] = None,
    use_intensity: bool = True,
    random_model: Optional[AlsoModel] = None,
) -> MetricsReport:
    """Binary linear probes on frozen latents: ground vs the rest, and
    x > 0 vs x < 0 relative to the sensor; each paired with the same probe
    on a random encoder, plus a random-label control."""
    t0 = time.perf_counter()
    cfg = replace(cfg or ProbeConfig(epochs=10), mode=LINEAR_PROBE, n_classes=2)
    random_model = random_model or AlsoModel(("random", cfg.seed), model.encoder.k)

    def random_labels(s: _ProbeScene) -> np.ndarray:
        key = rng.derive_seed(cfg.seed, "random_labels", s.index)
        return (rng.keyed_uniform(key, np.arange(len(s.labels))) < 0.5).astype(np.int64)

    probes = {"ground": _ground_labels, "side": _side_labels, "random_labels": random_labels}
    metrics = {}
    for name, fn in probes.items():
        for tag, m in (("pretrained", model), ("random", random_model)):
            if name == "random_labels" and tag == "random":
                continue
            rep = probe(m, cfg, stream, train_indices, eval_indices, use_intensity, fn, ("neg", "pos"))
            metrics[f"{name}_{tag}_accuracy"] = rep.metrics["accuracy"]
    for name in ("ground", "side"):
        metrics[f"{name}_margin"] = metrics[f"{name}_pretrained_accuracy"] - metrics[f"{name}_random_accuracy"]
    metrics["n_eval_points"] = int(len(eval_indices) * cfg.eval_points_per_scan)
    return MetricsReport({}, metrics, asdict(cfg), cfg.seed, time.perf_counter() - t0)


# ---------------------------------------------------------------- ablations

AXES = ("radius", "delta", "intensity", "head", "offset_mode", "loss_weighting")
AXIS_VALUES = {
    "radius": (0.5, 1.0, 2.0, 4.0),
    "delta": (0.05, 0.1, 0.2, 0.4, 0.8),
    "intensity": ("none", "input", "input+loss"),
    "head": ("ball_avg", "ball_max", "per_point_ball"),
    "offset_mode": ("fixed", "uniform"),
    "loss_weighting": ("flat", "per_ball"),
}
AXIS_TITLES = {
    "radius": "Radius (m)",
    "delta": "delta (m)",
    "intensity": "Intensity (input / loss)",
    "head": "Decoder head",
    "offset_mode": "Query offsets",
    "loss_weighting": "Loss weighting",
}


def apply_axis(base: PretrainConfig, axis: str, value) -> PretrainConfig:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    if axis == "intensity":
        settings = {
            "none": dict(use_intensity=False, lam=0.0),
            "input": dict(use_intensity=True, lam=0.0),
            "input+loss": dict(use_intensity=True, lam=base.lam or 1.0),
        }
        if value not in settings:
            raise ValueError(f"unknown intensity setting {value!r}")
        return replace(base, **settings[value])
    if axis in ("radius", "delta"):
        value = float(value)
    return replace(base, **{axis: value})


@dataclass
class AblationRow:
    value: object
    scores: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0


@dataclass
class AblationTable:
    axis: str
    metric: str
    rows: List[AblationRow]
    seeds: List[int]

    def format(self) -> str:
        """Two lines: the axis values, then 'mean ± std' per value."""
        head = [AXIS_TITLES[self.axis]] + [_fmt_value(r.value) for r in self.rows]
        body = [self.metric] + [f"{100 * r.mean:.1f} ± {100 * r.std:.1f}" for r in self.rows]
        width = max(len(c) for c in head + body)
        return "\n".join(" | ".join(c.ljust(width) for c in line) for line in (head, body))

    def as_dict(self) -> dict:
        return {
            "axis": self.axis,
            "metric": self.metric,
            "seeds": self.seeds,
            "rows": [{"value": r.value, "mean": r.mean, "std": r.std, "scores": r.scores} for r in self.rows],
        }


def _fmt_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


class RunCache:
    """Memoizes (pretrain config, probe config) -> probe score so cells shared
    between axes (the default settings) are trained once."""

    def __init__(self):
        self._scores: Dict[str, float] = {}

    @staticmethod
    def key(pcfg: PretrainConfig, qcfg: ProbeConfig) -> str:
        return json.dumps([asdict(pcfg), asdict(qcfg)], sort_keys=True)

    def get(self, pcfg, qcfg):
        return self._scores.get(self.key(pcfg, qcfg))

    def put(self, pcfg, qcfg, score: float):
        self._scores[self.key(pcfg, qcfg)] = score


def pretrain_and_probe(
    pcfg: PretrainConfig,
    qcfg: ProbeConfig,
    stream,
    data: DataConfig,
    cache: Optional[RunCache] = None,
    metric: str = "miou",
) -> float:
    if cache is not None and (hit := cache.get(pcfg, qcfg)) is not None:
        return hit
    r = data.ranges()
    model, _, _ = pretrain(pcfg, stream, r["train"])
    rep = probe(model, qcfg, stream, r["probe_train"], r["probe_eval"], pcfg.use_intensity)
    score = float(rep.metrics[metric])
    if cache is not None:
        cache.put(pcfg, qcfg, score)
    return score


def ablation_harness(
    base: PretrainConfig,
    axis: str,
    values: Optional[Sequence] = None,
    stream=None,
    data: Optional[DataConfig] = None,
    probe_config: Optional[ProbeConfig] = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    cache: Optional[RunCache] = None,
    metric: str = "miou",
) -> AblationTable:
    """Pretrain + linear probe for every (value, seed); the same seed drives
    pretraining and probing in every cell of a column."""
    values = AXIS_VALUES[axis] if values is None else tuple(values)
    data = data or DataConfig()
    data.check_disjoint()
    qbase = probe_config or ProbeConfig()
    rows = []
    for v in values:
        cfg = apply_axis(base, axis, v)
        scores = []
        for s in seeds:
            scores.append(
                pretrain_and_probe(replace(cfg, seed=s), replace(qbase, seed=s), stream, data, cache, metric)
            )
            log.info("ablation %s=%s seed %d: %.4f", axis, v, s, scores[-1])
        rows.append(AblationRow(v, scores))
    return AblationTable(axis, metric, rows, list(seeds))
