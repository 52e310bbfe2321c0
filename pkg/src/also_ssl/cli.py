"""Command-line interface.

Every subcommand reads a run configuration (``--config``, optional; built-in
defaults otherwise), accepts ``--set key=value`` overrides, writes under the
configured output directory and refreshes its ``manifest.json``. Failures
print one JSON line ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as config_mod
from . import formats, rng
from .config import ConfigError, RunConfig
from .formats import FormatError
from .geometry import PointCloud
from .lidar import NoReturnsError, PlacementError
from .model import AlsoModel
from .nn import NonFiniteError
from .probing import AXIS_VALUES, RunCache, ablation_harness, probe, separability_probes
from .queries import generate_queries
from .training import (
    FileScenes,
    SyntheticScenes,
    TrainingDiverged,
    evaluate_occupancy,
    predict_query_occupancy,
    pretrain,
)

log = logging.getLogger("also_ssl")

SPLITS = ("train", "eval", "probe_train", "probe_eval")
EXIT_CODES = {
    "ConfigError": 2,
    "FormatError": 3,
    "ChecksumError": 3,
    "FileNotFoundError": 3,
    "TrainingDiverged": 4,
    "NonFiniteError": 4,
}


def _load(args) -> RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    cfg = config_mod.apply_overrides(cfg, overrides)
    cfg.data.check_disjoint()
    return cfg


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _synthetic(cfg: RunConfig) -> SyntheticScenes:
    return SyntheticScenes(cfg.scene, cfg.sensor, cfg.data.seed)


def _stream(cfg: RunConfig, scans: Optional[str], queries: Optional[str] = None):
    if scans is None:
        if queries is not None:
            raise ConfigError("--queries requires --scans")
        return _synthetic(cfg)
    return FileScenes(scans, queries, cfg.data.seed)


def _model(cfg: RunConfig, checkpoint: Optional[str]) -> AlsoModel:
    model = AlsoModel(cfg.seed, cfg.pretrain.k)
    if checkpoint:
        formats.load_model(checkpoint, model)
    return model


def _write_json(path: Path, payload) -> Path:
    from .training import _jsonable

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- subcommands


def cmd_simulate(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    stream = _synthetic(cfg)
    splits = SPLITS if args.split == "all" else (args.split,)
    n = 0
    for split in splits:
        for i in cfg.data.ranges()[split]:
            formats.write_scan(out / "scans" / split / f"{i:06d}.bin", stream.scan(i))
            stream._cache.pop(i, None)
            n += 1
    return {"scans": n}


def cmd_make_queries(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    src = FileScenes(args.scans, None, cfg.data.seed)
    split = args.split or Path(args.scans).name
    p = cfg.pretrain
    indices = src.indices()
    if not indices:
        raise FileNotFoundError(f"no scans in {args.scans}")
    for i in indices:
        formats.write_queries(out / "queries" / split / f"{i:06d}.q", src.queries(i, p.delta, p.offset_mode))
    return {"query_sets": len(indices)}


def cmd_pretrain(cfg: RunConfig, args) -> dict:
    out = _out(cfg) / "pretrain"
    stream = _stream(cfg, args.scans, args.queries)
    pcfg = cfg.pretrain_config()
    model, state, report = pretrain(pcfg, stream, cfg.data.ranges()["train"], out / "checkpoints")
    formats.write_checkpoint(out / "model.ckpt", model, state, {"epochs": pcfg.epochs})
    report.write(out, "metrics")
    return report.metrics


def cmd_eval_occ(cfg: RunConfig, args) -> dict:
    stream = _stream(cfg, args.scans)
    model = _model(cfg, args.checkpoint)
    rep = evaluate_occupancy(
        model, stream, cfg.data.ranges()["eval"], cfg.pretrain_config(), cfg.seed,
        cfg.eval.max_supports, cfg.eval.offset_mode or None,
    )
    rep.write(_out(cfg) / "eval", "occupancy")
    return rep.metrics


def cmd_probe(cfg: RunConfig, args) -> dict:
    model = _model(cfg, args.checkpoint)
    r = cfg.data.ranges()
    rep = probe(model, cfg.probe_config(), _synthetic(cfg), r["probe_train"], r["probe_eval"], cfg.pretrain.use_intensity)
    rep.write(_out(cfg) / "probe", "random_init" if args.checkpoint is None else "probe")
    return rep.metrics


def cmd_separability(cfg: RunConfig, args) -> dict:
    model = _model(cfg, args.checkpoint)
    r = cfg.data.ranges()
    rep = separability_probes(
        model, _synthetic(cfg), r["probe_train"], r["probe_eval"], cfg.probe_config(), cfg.pretrain.use_intensity
    )
    rep.write(_out(cfg) / "separability", "separability")
    return rep.metrics


def cmd_ablate(cfg: RunConfig, args) -> dict:
    a = cfg.ablate
    values = a.values or AXIS_VALUES.get(a.axis)
    if values is None:
        raise ConfigError(f"unknown ablation axis {a.axis!r}")
    table = ablation_harness(
        cfg.pretrain_config(), a.axis, values, _synthetic(cfg), cfg.data, cfg.probe_config(), a.seeds, RunCache()
    )
    out = _out(cfg) / "ablate"
    _write_json(out / f"{a.axis}.json", table.as_dict())
    (out / f"{a.axis}.txt").write_text(table.format() + "\n")
    print(table.format())
    return {"rows": len(table.rows)}


def export_points(model: AlsoModel, cloud: PointCloud, cfg: RunConfig, seed) -> dict:
    """Scan points plus sampled points around them carrying predicted occupancy."""
    g = rng.generator(seed, "export")
    n = cfg.export.samples
    base = cloud.points[g.integers(0, len(cloud), n)]
    samples = base + g.normal(0.0, cfg.export.spread, (n, 3))
    occ = predict_query_occupancy(
        model, cloud, samples, cfg.pretrain.radius, cfg.pretrain.use_intensity, cfg.eval.max_supports, seed
    )
    occ = np.where(np.isnan(occ), -1.0, occ)
    m = len(cloud)
    inten = cloud.intensities if cloud.intensities is not None else np.zeros(m)
    gray = (255 * inten).astype(np.int64)
    full = occ > 0.5
    rgb = np.concatenate([np.stack([gray] * 3, 1), np.stack([255 * full, 0 * full, 255 * ~full], 1)])
    labels = cloud.labels if cloud.labels is not None else np.full(m, -1)
    return {
        "points": np.concatenate([cloud.points, samples]),
        "properties": {
            "intensity": np.concatenate([inten, np.full(n, -1.0)]),
            "occupancy": np.concatenate([np.full(m, -1.0), occ]),
            "label": np.concatenate([labels, np.full(n, -1)]).astype(np.int64),
            "red": rgb[:, 0],
            "green": rgb[:, 1],
            "blue": rgb[:, 2],
        },
    }


def cmd_export_ply(cfg: RunConfig, args) -> dict:
    cloud = formats.read_scan(args.scan)
    model = _model(cfg, args.checkpoint)
    data = export_points(model, cloud, cfg, (cfg.seed, Path(args.scan).stem))
    path = _out(cfg) / "export" / f"{Path(args.scan).stem}.ply"
    formats.write_ply(path, data["points"], data["properties"])
    return {"vertices": len(data["points"]), "scan_points": len(cloud), "samples": cfg.export.samples}


def cmd_dump_config(cfg: RunConfig, args) -> dict:
    sys.stdout.write(config_mod.dump_config(cfg))
    return {}


COMMANDS = {
    "simulate": cmd_simulate,
    "make-queries": cmd_make_queries,
    "pretrain": cmd_pretrain,
    "eval-occ": cmd_eval_occ,
    "probe": cmd_probe,
    "separability": cmd_separability,
    "ablate": cmd_ablate,
    "export-ply": cmd_export_ply,
    "dump-config": cmd_dump_config,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="also-ssl", description="Occupancy-pretext pretraining on simulated lidar.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
        return p

    p = add("simulate", "simulate scans for the configured scene ranges")
    p.add_argument("--split", default="all", choices=("all",) + SPLITS)
    p = add("make-queries", "generate query sets for a directory of scans")
    p.add_argument("--scans", required=True)
    p.add_argument("--split", help="output subdirectory (default: name of the scan directory)")
    p = add("pretrain", "pretrain on simulated scenes or on scan/query files")
    p.add_argument("--scans")
    p.add_argument("--queries")
    p = add("eval-occ", "held-out occupancy accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scans")
    p = add("probe", "semantic linear probe or fine-tune (random init without --checkpoint)")
    p.add_argument("--checkpoint")
    p = add("separability", "binary probes on frozen latents")
    p.add_argument("--checkpoint", required=True)
    add("ablate", "pretrain + probe sweep over one axis")
    p = add("export-ply", "ASCII PLY of a scan with predicted occupancy samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True)
    add("dump-config", "print the effective configuration with documentation")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        result = COMMANDS[args.command](cfg, args)
        if args.command != "dump-config":
            formats.write_manifest(_out(cfg))
            log.info("%s done: %s", args.command, result)
        return 0
    except (
        ConfigError, FormatError, FileNotFoundError, TrainingDiverged, NonFiniteError,
        NoReturnsError, PlacementError, ValueError, KeyError,
    ) as err:
        name = type(err).__name__
        message = str(err).replace("\n", " ")
        sys.stderr.write(json.dumps({"error": name, "message": message}) + "\n")
        return EXIT_CODES.get(name, 1)


if __name__ == "__main__":
    sys.exit(main())
