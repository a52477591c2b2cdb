"""Readers and writers for scene and result files.

KITTI-style clouds are flat little-endian float32 quadruples; detections
and ground-truth labels share a JSON schema; saliency maps export as CSV
or ASCII PLY.
"""

from __future__ import annotations

import json

import numpy as np

from .boxes import OrientedBox
from .errors import IoFailure, LengthMismatch, MalformedFile, SchemaViolation
from .pipeline import Detection


def read_kitti_bin(path) -> np.ndarray:
    """Point cloud from little-endian f32 (x, y, z, intensity) quadruples."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) % 16 != 0:
        raise MalformedFile(
            f"{path}: length {len(data)} is not a multiple of 16 bytes"
        )
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(float)


def write_kitti_bin(path, cloud: np.ndarray) -> None:
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[1] != 4:
        raise ValueError(f"expected an (N, 4) cloud, got shape {cloud.shape}")
    try:
        with open(path, "wb") as fh:
            fh.write(cloud.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _require(record, key, path):
    if key not in record:
        raise SchemaViolation(f"{path}.{key}", "missing field")
    return record[key]


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(path, f"expected a number, got {value!r}")
    return float(value)


def _triple(value, path):
    if not isinstance(value, list) or len(value) != 3:
        raise SchemaViolation(path, "expected a list of 3 numbers")
    return [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]


def _parse_records(path, require_score: bool):
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("$", f"invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaViolation("$", "expected a top-level array")

    records = []
    for i, rec in enumerate(data):
        where = f"[{i}]"
        if not isinstance(rec, dict):
            raise SchemaViolation(where, "expected an object")
        center = _triple(_require(rec, "center", where), f"{where}.center")
        size = _triple(_require(rec, "size", where), f"{where}.size")
        for axis, value in enumerate(size):
            if value <= 0:
                raise SchemaViolation(f"{where}.size[{axis}]", "size must be > 0")
        yaw = _number(_require(rec, "yaw", where), f"{where}.yaw")
        label = _require(rec, "class", where)
        if not isinstance(label, str) or not label:
            raise SchemaViolation(f"{where}.class", "expected a non-empty string")
        score = None
        if "score" in rec:
            score = _number(rec["score"], f"{where}.score")
            if not 0.0 <= score <= 1.0:
                raise SchemaViolation(f"{where}.score", "score must be in [0, 1]")
        elif require_score:
            raise SchemaViolation(f"{where}.score", "missing field")
        records.append((center, size, yaw, score, label))
    return records


def read_detections_json(path) -> list[Detection]:
    """Detections (score required) from the shared JSON schema."""
    return [
        Detection(tuple(center), tuple(size), yaw, score, label)
        for center, size, yaw, score, label in _parse_records(path, require_score=True)
    ]


def read_labels_json(path) -> list[tuple[OrientedBox, str]]:
    """Ground-truth boxes and labels; any score field is ignored."""
    return [
        (OrientedBox(tuple(center), tuple(size), yaw), label)
        for center, size, yaw, _, label in _parse_records(path, require_score=False)
    ]


def _record_dict(center, size, yaw, label, score=None):
    rec = {
        "center": [float(v) for v in center],
        "size": [float(v) for v in size],
        "yaw": float(yaw),
        "class": label,
    }
    if score is not None:
        rec["score"] = float(score)
    return rec


def write_detections_json(path, detections: list[Detection]) -> None:
    records = [
        _record_dict(d.center, d.size, d.yaw, d.label, d.score) for d in detections
    ]
    _write_json(path, records)


def write_labels_json(path, gts: list[tuple[OrientedBox, str]]) -> None:
    records = [_record_dict(b.center, b.size, b.yaw, label) for b, label in gts]
    _write_json(path, records)


def _write_json(path, payload) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_saliency(cloud, saliency, fmt: str, path) -> None:
    """Export per-point scores as ``csv`` (index,x,y,z,score) or ASCII ``ply``."""
    cloud = np.asarray(cloud, dtype=float)
    saliency = np.asarray(saliency, dtype=float)
    if len(cloud) != len(saliency):
        raise LengthMismatch(
            f"saliency length {len(saliency)} != cloud length {len(cloud)}"
        )
    if fmt not in ("csv", "ply"):
        raise ValueError(f"format must be csv or ply, got {fmt!r}")
    try:
        with open(path, "w") as fh:
            if fmt == "csv":
                fh.write("index,x,y,z,score\n")
                for i, (p, s) in enumerate(zip(cloud, saliency)):
                    fh.write(f"{i},{p[0]:.6g},{p[1]:.6g},{p[2]:.6g},{s:.6g}\n")
            else:
                fh.write("ply\n")
                fh.write("format ascii 1.0\n")
                fh.write(f"element vertex {len(cloud)}\n")
                fh.write("property float x\n")
                fh.write("property float y\n")
                fh.write("property float z\n")
                fh.write("property float scalar_saliency\n")
                fh.write("end_header\n")
                for p, s in zip(cloud, saliency):
                    fh.write(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {s:.6g}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_saliency_csv(path):
    """Parse a saliency CSV back into (points (N, 3), scores (N,))."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0] != "index,x,y,z,score":
        raise MalformedFile(f"{path}: missing saliency CSV header")
    points, scores = [], []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise MalformedFile(f"{path}: bad row {line!r}")
        points.append([float(parts[1]), float(parts[2]), float(parts[3])])
        scores.append(float(parts[4]))
    return np.array(points).reshape(-1, 3), np.array(scores)
