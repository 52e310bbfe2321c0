"""Run configuration: one flat ``key = value`` text document.

Grammar::

    # comment                      (also after a value)
    [section]                      keys below are prefixed with "section."
    section.key = value            dotted keys work anywhere
    key = value                    top-level keys: output_dir, seed

Values are parsed according to the type of the key's default: integers,
reals, booleans (true/false), strings, and comma-separated lists for tuple
keys. An empty value means "unset" for optional keys. Unknown keys are an
error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .lidar import SceneConfig, SensorModel
from .probing import EPOCH_TABLE, ProbeConfig
from .training import DataConfig, PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class AblateConfig:
    axis: str = "radius"
    values: Tuple = ()  # empty: the axis' standard grid
    seeds: Tuple = (0, 1, 2, 3, 4)


@dataclass
class EvalConfig:
    max_supports: int = 4096
    offset_mode: str = ""  # empty: same as pretraining


@dataclass
class ExportConfig:
    samples: int = 20000
    spread: float = 0.5


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def pretrain_config(self) -> PretrainConfig:
        return replace(self.pretrain, seed=self.seed)

    def probe_config(self) -> ProbeConfig:
        return replace(self.probe, seed=self.seed)


SECTIONS = ("scene", "sensor", "data", "pretrain", "probe", "eval", "ablate", "export")
TOP_LEVEL = ("output_dir", "seed")
# run.seed drives these, so they are not separately configurable
_HIDDEN = {("pretrain", "seed"), ("probe", "seed")}

DOCS: Dict[str, str] = {
    "output_dir": "directory for every output of a subcommand",
    "seed": "seed for model initialization, pretraining and probing",
    "scene.half_extent": "scene spans [-half_extent, half_extent] in x and y (m)",
    "scene.ground_height": "ground plane height (m)",
    "scene.n_boxes": "boxes per scene",
    "scene.n_cylinders": "vertical cylinders per scene",
    "scene.n_spheres": "spheres per scene",
    "scene.box_half_xy": "range of box half-extents in x and y (m)",
    "scene.box_half_z": "range of box half-heights (m)",
    "scene.cylinder_radius": "range of cylinder radii (m)",
    "scene.cylinder_height": "range of cylinder heights (m)",
    "scene.sphere_radius": "range of sphere radii (m)",
    "scene.clear_radius": "no object center within this xy distance of the sensor (m)",
    "scene.class_ids": "class id of ground, box, cylinder, sphere",
    "scene.class_intensity": "mean base intensity of ground, box, cylinder, sphere",
    "scene.intensity_spread": "half-width of the per-object base intensity range",
    "scene.max_retries": "placement attempts per object before failing",
    "sensor.n_azimuth": "rays per revolution",
    "sensor.elevation_angles": "beam elevations, radians, strictly increasing",
    "sensor.max_range": "maximum return distance (m)",
    "sensor.origin": "sensor position (m)",
    "sensor.range_noise_sigma": "std of range noise (m)",
    "sensor.intensity_noise_sigma": "std of intensity noise",
    "data.seed": "seed of the simulated corpus",
    "data.train_start": "first pretraining scene index",
    "data.n_train": "number of pretraining scenes",
    "data.eval_start": "first held-out occupancy scene index",
    "data.n_eval": "number of held-out occupancy scenes",
    "data.probe_train_start": "first labeled probe-training scene index",
    "data.n_probe_train": "number of labeled probe-training scenes",
    "data.probe_eval_start": "first probe-evaluation scene index",
    "data.n_probe_eval": "number of probe-evaluation scenes",
    "pretrain.epochs": "pretraining epochs",
    "pretrain.batch_size": "scenes per optimizer step",
    "pretrain.max_points": "input points kept per scan",
    "pretrain.max_queries": "queries kept per scan",
    "pretrain.supports_per_scan": "supports per scan that receive a loss",
    "pretrain.delta": "front/behind query offset scale (m)",
    "pretrain.offset_mode": "fixed or uniform offsets",
    "pretrain.radius": "support neighborhood radius (m)",
    "pretrain.lam": "weight of the intensity term",
    "pretrain.intensity_metric": "l1 or l2",
    "pretrain.head": "per_point_ball, ball_avg or ball_max",
    "pretrain.loss_weighting": "per_ball or flat",
    "pretrain.use_intensity": "feed intensity to the encoder",
    "pretrain.support_mode": "points or bev",
    "pretrain.bev_pitch": "BEV cell size (m)",
    "pretrain.k": "neighbors per support in the encoder",
    "pretrain.augment_rotation": "random rotation about z",
    "pretrain.augment_flips": "random x/y flips",
    "pretrain.lr": "AdamW learning rate (constant)",
    "pretrain.beta1": "AdamW first-moment decay",
    "pretrain.beta2": "AdamW second-moment decay",
    "pretrain.eps": "AdamW epsilon",
    "pretrain.weight_decay": "AdamW decoupled weight decay",
    "pretrain.checkpoint_every": "write a checkpoint every this many epochs (0: final only)",
    "probe.mode": "linear_probe or finetune",
    "probe.epochs": "probe epochs (0: by label fraction, " + " ".join(f"{f:g}:{e}" for f, e in EPOCH_TABLE) + ")",
    "probe.base_lr": "initial learning rate of the cosine schedule",
    "probe.label_fraction": "fraction of labeled probe-training scenes used",
    "probe.batch_points": "labeled points per probe step",
    "probe.points_per_scan": "labeled points sampled per training scan",
    "probe.eval_points_per_scan": "points scored per evaluation scan",
    "probe.max_points": "points kept per scan before sampling",
    "probe.n_classes": "number of semantic classes",
    "probe.weight_decay": "AdamW decoupled weight decay of the probe",
    "eval.max_supports": "supports encoded per held-out scan",
    "eval.offset_mode": "query offsets for evaluation (empty: as pretraining)",
    "ablate.axis": "radius, delta, intensity, head, offset_mode or loss_weighting",
    "ablate.values": "values to sweep (empty: the standard grid of the axis)",
    "ablate.seeds": "seeds per cell",
    "export.samples": "occupancy sample points added to a PLY export",
    "export.spread": "std of sample offsets around scan points (m)",
}


def _section_fields(section: str):
    dc = {f.name: f for f in fields(RunConfig)}[section].default_factory()
    return dc, [f for f in fields(dc) if (section, f.name) not in _HIDDEN]


def all_keys() -> List[str]:
    keys = list(TOP_LEVEL)
    for s in SECTIONS:
        keys += [f"{s}.{f.name}" for f in _section_fields(s)[1]]
    return keys


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            items = [t.strip() for t in text.split(",")]
            if default and all(isinstance(d, int) and not isinstance(d, bool) for d in default):
                return tuple(int(t) for t in items)
            out = []
            for t in items:
                try:
                    out.append(float(t))
                except ValueError:
                    out.append(t)
            return tuple(out)
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: Dict[str, str] = {}
    section = ""
    known = set(all_keys())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section and section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        full = key if "." in key or not section else f"{section}.{key}"
        if full not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {full!r}")
        if full in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {full!r}")
        values[full] = value
    return apply_overrides(RunConfig(), values)


def apply_overrides(cfg: RunConfig, values: Dict[str, str]) -> RunConfig:
    """Return ``cfg`` with textual key = value overrides applied and validated."""
    known = set(all_keys())
    top, per_section = {}, {s: {} for s in SECTIONS}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        if "." in key:
            s, name = key.split(".", 1)
            per_section[s][name] = _parse_value(text, getattr(getattr(cfg, s), name), key)
        else:
            top[key] = _parse_value(text, getattr(cfg, key), key)
    try:
        sections = {s: replace(getattr(cfg, s), **kv) if kv else getattr(cfg, s) for s, kv in per_section.items()}
        return replace(cfg, **top, **sections)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def dump_config(cfg: RunConfig, documented: bool = True) -> str:
    """Render every key; with ``documented`` each key is preceded by its description."""
    lines = []
    for key in TOP_LEVEL:
        if documented:
            lines.append(f"# {DOCS[key]}")
        lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
    for s in SECTIONS:
        lines += ["", f"[{s}]"]
        for f in _section_fields(s)[1]:
            if documented:
                lines.append(f"# {DOCS[f'{s}.{f.name}']}")
            lines.append(f"{f.name} = {_format_value(getattr(getattr(cfg, s), f.name))}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
