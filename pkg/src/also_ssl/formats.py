"""On-disk formats: scans, query sets, checkpoints, manifests and PLY exports.

All binary payloads are little-endian. Scans and query sets store 32-bit
floats, so anything written from a float32-rounded cloud reads back bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .geometry import PointCloud
from .nn import AdamWState
from .queries import QuerySet


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


# ---------------------------------------------------------------- scans

_SCAN_RECORD = np.dtype("<f4")


def scan_paths(path) -> Tuple[Path, Path, Path]:
    """(payload .bin, text header .hdr, labels .label) for a scan path."""
    p = Path(path)
    return p.with_suffix(".bin"), p.with_suffix(".hdr"), p.with_suffix(".label")


def write_scan(path, cloud: PointCloud):
    bin_path, hdr_path, label_path = scan_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    rec = np.zeros((len(cloud), 4), dtype=_SCAN_RECORD)
    rec[:, :3] = cloud.points
    if cloud.intensities is not None:
        rec[:, 3] = cloud.intensities
    bin_path.write_bytes(rec.tobytes())
    ox, oy, oz = (repr(float(v)) for v in cloud.sensor_origin)
    lines = [
        "# scan header",
        f"origin = {ox} {oy} {oz}",
        f"points = {len(cloud)}",
        f"intensity = {'present' if cloud.intensities is not None else 'absent'}",
        f"labels = {'present' if cloud.labels is not None else 'absent'}",
    ]
    hdr_path.write_text("\n".join(lines) + "\n")
    if cloud.labels is not None:
        label_path.write_bytes(np.asarray(cloud.labels, dtype="<u4").tobytes())
    elif label_path.exists():
        label_path.unlink()
    return [bin_path, hdr_path] + ([label_path] if cloud.labels is not None else [])


def _read_header(path: Path) -> Dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line in {path}: {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_scan(path) -> PointCloud:
    """Read a scan. Without a header the origin is (0, 0, 0) and intensity
    is taken as present."""
    bin_path, hdr_path, label_path = scan_paths(path)
    raw = bin_path.read_bytes()
    if len(raw) == 0:
        raise FormatError("empty scan")
    if len(raw) % 16:
        raise FormatError(f"truncated record: {len(raw)} bytes is not a multiple of 16")
    rec = np.frombuffer(raw, dtype=_SCAN_RECORD).reshape(-1, 4).astype(np.float64)
    origin, has_int, has_labels = np.zeros(3), True, label_path.exists()
    if hdr_path.exists():
        hdr = _read_header(hdr_path)
        origin = np.array([float(v) for v in hdr["origin"].split()])
        if int(hdr.get("points", len(rec))) != len(rec):
            raise FormatError("header point count does not match payload")
        has_int = hdr.get("intensity", "present") == "present"
        has_labels = hdr.get("labels", "absent") == "present"
    labels = None
    if has_labels:
        labels = np.frombuffer(label_path.read_bytes(), dtype="<u4").astype(np.int64)
        if len(labels) != len(rec):
            raise FormatError("label count does not match point count")
    return PointCloud(origin, rec[:, :3], rec[:, 3] if has_int else None, labels)


# ---------------------------------------------------------------- query sets

_QUERY_MAGIC = b"ALSQ"
_QUERY_VERSION = 1
_QUERY_HEAD = struct.Struct("<4sIQdBQQ")  # magic, version, count, delta, mode, seed, skipped
_QUERY_RECORD = np.dtype(
    [("xyz", "<f4", (3,)), ("occupancy", "u1"), ("intensity", "<f4"), ("kind", "u1"), ("source", "<u4")]
)
_MODES = ("fixed", "uniform")


def write_queries(path, qs: QuerySet):
    rec = np.zeros(len(qs), dtype=_QUERY_RECORD)
    rec["xyz"] = qs.positions
    rec["occupancy"] = qs.occupancy
    rec["intensity"] = qs.intensity
    rec["kind"] = qs.kind
    rec["source"] = qs.source_index
    head = _QUERY_HEAD.pack(
        _QUERY_MAGIC, _QUERY_VERSION, len(qs), qs.delta, _MODES.index(qs.offset_mode),
        int(qs.seed) & (2**64 - 1), qs.skipped,
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(head + rec.tobytes())
    return Path(path)


def read_queries(path) -> QuerySet:
    raw = Path(path).read_bytes()
    if len(raw) < _QUERY_HEAD.size:
        raise FormatError("truncated query file header")
    magic, version, count, delta, mode, seed, skipped = _QUERY_HEAD.unpack_from(raw)
    if magic != _QUERY_MAGIC:
        raise FormatError("not a query file")
    if version != _QUERY_VERSION:
        raise FormatError(f"unsupported query file version {version}")
    body = raw[_QUERY_HEAD.size :]
    if len(body) != count * _QUERY_RECORD.itemsize:
        raise FormatError("query record count does not match header")
    rec = np.frombuffer(body, dtype=_QUERY_RECORD)
    return QuerySet(
        rec["xyz"].astype(np.float64),
        rec["occupancy"],
        rec["intensity"].astype(np.float64),
        rec["kind"],
        rec["source"].astype(np.int64),
        float(delta),
        _MODES[mode],
        int(seed),
        int(skipped),
    )


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"ALSOCKPT"
CHECKPOINT_VERSION = 1
_DIGEST = 32


def _tensor_table(tensors: Dict[str, np.ndarray]):
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name])
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        b = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    return entries, b"".join(chunks)


def write_checkpoint(path, model, state: Optional[AdamWState] = None, meta: Optional[dict] = None):
    """Versioned header, named tensors and optimizer moments, SHA-256 trailer."""
    tensors = {f"param/{k}": v for k, v in model.params().items()}
    opt = None
    if state is not None:
        opt = {k: getattr(state, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
        tensors.update({f"exp_avg/{k}": v for k, v in state.exp_avg.items()})
        tensors.update({f"exp_avg_sq/{k}": v for k, v in state.exp_avg_sq.items()})
    entries, payload = _tensor_table(tensors)
    header = json.dumps(
        {"tensors": entries, "optimizer": opt, "meta": meta or {}, "seed": repr(model.seed)},
        sort_keys=True,
    ).encode()
    body = _CKPT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def read_checkpoint(path):
    """Return (parameters, optimizer state or None, meta). The checksum is
    verified before anything is decoded."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 12 + _DIGEST:
        raise FormatError("truncated checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    if body[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", body, len(_CKPT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = len(_CKPT_MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    payload = body[start + hlen :]
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "exp_avg": {}, "exp_avg_sq": {}}
    for e in header["tensors"]:
        a = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        kind, _, name = e["name"].partition("/")
        groups[kind][name] = a.astype(a.dtype.newbyteorder("="))
    state = None
    if header["optimizer"] is not None:
        state = AdamWState(**header["optimizer"])
        state.exp_avg = groups["exp_avg"]
        state.exp_avg_sq = groups["exp_avg_sq"]
    return groups["param"], state, header["meta"]


def load_model(path, model):
    """Load parameters into ``model`` (hard error on key or shape mismatch)."""
    params, state, meta = read_checkpoint(path)
    model.load_state_dict(params)
    return model, state, meta


# ---------------------------------------------------------------- manifests

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, name: str = "manifest.json") -> Path:
    """Content hashes of every file under ``directory`` except the manifest.

    Files sharing a stem (a scan's .bin/.hdr/.label) form one entry.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.rglob("*") if p.is_file() and p.name != name)
    entries: Dict[str, Dict[str, str]] = {}
    for p in files:
        rel = p.relative_to(directory)
        entries.setdefault(rel.with_suffix("").as_posix(), {})[p.suffix or "."] = sha256_file(p)
    out = directory / name
    out.write_text(json.dumps({"count": len(entries), "entries": entries}, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- PLY


def write_ply(path, points: np.ndarray, properties: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """ASCII PLY with x, y, z plus optional per-vertex scalar properties.

    Integer arrays are written as ``int``, others as ``float``; properties
    named red/green/blue are written as ``uchar``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    props = dict(properties or {})
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    lines += [f"property float {c}" for c in "xyz"]
    cols = [pts]
    fmts = ["%.9g %.9g %.9g"]
    for name, values in props.items():
        values = np.asarray(values).reshape(-1)
        if len(values) != len(pts):
            raise ValueError(f"property {name} has {len(values)} values for {len(pts)} vertices")
        if name in ("red", "green", "blue"):
            lines.append(f"property uchar {name}")
            fmts.append("%d")
        elif np.issubdtype(values.dtype, np.integer):
            lines.append(f"property int {name}")
            fmts.append("%d")
        else:
            lines.append(f"property float {name}")
            fmts.append("%.9g")
        cols.append(values[:, None].astype(np.float64))
    lines.append("end_header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        if len(pts):
            np.savetxt(fh, np.hstack(cols), fmt=" ".join(fmts))
    return path


def read_ply(path) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Read an ASCII PLY written by :func:`write_ply`."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError("not a PLY file")
        names, n = [], None
        for line in fh:
            parts = line.split()
            if parts[:2] == ["format", "ascii"]:
                continue
            if parts[0] == "format":
                raise FormatError("only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[0] == "property":
                names.append(parts[-1])
            elif parts[0] == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, len(names)))
    if n is None or len(data) != n:
        raise FormatError("vertex count does not match header")
    return data[:, :3], {name: data[:, 3 + i] for i, name in enumerate(names[3:])}
