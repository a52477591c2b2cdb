"""Feature-dump files: exported detector state replayed as a detector.

Binary layout (little-endian):

    magic "FFDP" | version u32=1
    grid: 7 f64 (voxel_size, x_lo, x_hi, y_lo, y_hi, z_lo, z_hi)
    block_index u32 | M u64 | d u64
    coords: M x 3 i32
    features: M x d f32, row-major
    detection count u64
    per detection: 8 f32 (x, y, z, l, w, h, yaw, score) + class id u32
    gradient record count u64
    per record: detection index u32, attribute-mask bitfield u32, M x d f32

Every count is validated against the remaining file length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DetectorFailure,
    IoFailure,
    MalformedDump,
    MissingGradient,
    ShapeMismatch,
)
from .pipeline import Detection, bits_to_mask, mask_to_bits
from .voxelgrid import GridSpec, SparseVoxelMap

_MAGIC = b"FFDP"
_VERSION = 1

DEFAULT_CLASSES = ("car", "pedestrian", "cyclist")


@dataclass
class FeatureDump:
    """One scene's exported features, detections and gradients."""

    grid: GridSpec
    block_index: int
    coords: np.ndarray  # (M, 3) int32
    features: np.ndarray  # (M, d) float32
    detections: list[Detection]
    gradients: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ShapeMismatch(f"features must be 2-D, got {self.features.shape}")
        if len(self.features) != len(self.coords):
            raise ShapeMismatch(
                f"{len(self.coords)} coords but {len(self.features)} feature rows"
            )
        for key, grad in self.gradients.items():
            grad = np.asarray(grad, dtype=np.float32)
            if grad.shape != self.features.shape:
                raise ShapeMismatch(
                    f"gradient record {key} has shape {grad.shape}, "
                    f"features have {self.features.shape}"
                )
            self.gradients[key] = grad
            det_idx, _ = key
            if not 0 <= det_idx < len(self.detections):
                raise ShapeMismatch(f"gradient record references detection {det_idx}")
        for d in self.detections:
            if d.label not in self.classes:
                raise ShapeMismatch(f"label {d.label!r} not in class table")


def save_dump(path, dump: FeatureDump) -> None:
    """Serialize a FeatureDump to its binary layout."""
    m, d = dump.features.shape
    parts = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack(
            "<7d",
            dump.grid.voxel_size,
            *dump.grid.x_range,
            *dump.grid.y_range,
            *dump.grid.z_range,
        ),
        struct.pack("<I", dump.block_index),
        struct.pack("<QQ", m, d),
        dump.coords.astype("<i4").tobytes(),
        dump.features.astype("<f4").tobytes(),
        struct.pack("<Q", len(dump.detections)),
    ]
    for det in dump.detections:
        parts.append(
            struct.pack("<8f", *det.center, *det.size, det.yaw, det.score)
        )
        parts.append(struct.pack("<I", dump.classes.index(det.label)))
    parts.append(struct.pack("<Q", len(dump.gradients)))
    for (det_idx, mask_bits), grad in sorted(dump.gradients.items()):
        parts.append(struct.pack("<II", det_idx, mask_bits))
        parts.append(grad.astype("<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoFailure(f"cannot write dump {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedDump(
                f"truncated dump: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_dump(path, classes: tuple[str, ...] = DEFAULT_CLASSES) -> FeatureDump:
    """Parse a dump file, validating structure against the file length."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read dump {path}: {exc}") from exc

    r = _Reader(data)
    if r.take(4) != _MAGIC:
        raise MalformedDump("bad magic; not a feature dump")
    (version,) = r.unpack("<I")
    if version != _VERSION:
        raise MalformedDump(f"unsupported dump version {version}")
    s, x_lo, x_hi, y_lo, y_hi, z_lo, z_hi = r.unpack("<7d")
    try:
        grid = GridSpec(s, (x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi))
    except ValueError as exc:
        raise MalformedDump(f"invalid grid: {exc}") from exc
    (block_index,) = r.unpack("<I")
    m, d = r.unpack("<QQ")
    coords = r.array("<i4", (m, 3))
    features = r.array("<f4", (m, d))
    (n_det,) = r.unpack("<Q")
    detections = []
    for _ in range(n_det):
        x, y, z, l, w, h, yaw, score = r.unpack("<8f")
        (class_id,) = r.unpack("<I")
        if class_id >= len(classes):
            raise MalformedDump(f"class id {class_id} outside class table")
        try:
            detections.append(
                Detection((x, y, z), (l, w, h), yaw, score, classes[class_id])
            )
        except ValueError as exc:
            raise MalformedDump(f"invalid detection record: {exc}") from exc
    (n_grad,) = r.unpack("<Q")
    gradients = {}
    for _ in range(n_grad):
        det_idx, mask_bits = r.unpack("<II")
        if det_idx >= n_det:
            raise MalformedDump(f"gradient references detection {det_idx} of {n_det}")
        gradients[(det_idx, mask_bits)] = r.array("<f4", (m, d))
    if r.pos != len(data):
        raise MalformedDump(f"{len(data) - r.pos} trailing bytes after records")
    return FeatureDump(grid, block_index, coords, features, detections, gradients, classes)


class DumpDetector:
    """Detector interface replaying a stored FeatureDump.

    ``detect`` and ``features`` ignore the cloud argument (the dump was
    produced for exactly one scene); ``gradient`` serves only the stored
    (detection, mask) records.
    """

    def __init__(self, dump: FeatureDump):
        self.dump = dump

    def detect(self, cloud) -> list[Detection]:
        return list(self.dump.detections)

    def features(self, cloud, block_index: int) -> SparseVoxelMap:
        self._check_block(block_index)
        return SparseVoxelMap(self.dump.coords, self.dump.features, self.dump.grid)

    def gradient(self, cloud, d: Detection, mask, block_index: int) -> SparseVoxelMap:
        self._check_block(block_index)
        det_idx = self._match(d)
        key = (det_idx, mask_to_bits(mask))
        grad = self.dump.gradients.get(key)
        if grad is None:
            raise MissingGradient(
                f"dump has no gradient for detection {det_idx}, "
                f"mask {sorted(bits_to_mask(key[1]))}"
            )
        return SparseVoxelMap(self.dump.coords, grad, self.dump.grid)

    def _check_block(self, block_index: int):
        if block_index != self.dump.block_index:
            raise DetectorFailure(
                f"dump carries block {self.dump.block_index}, not {block_index}"
            )

    def _match(self, d: Detection) -> int:
        for i, found in enumerate(self.dump.detections):
            if found.label != d.label:
                continue
            fields = (*found.center, *found.size, found.yaw, found.score)
            wanted = (*d.center, *d.size, d.yaw, d.score)
            if all(abs(a - b) <= 1e-6 for a, b in zip(fields, wanted)):
                return i
        from .errors import DetectionNotFound

        raise DetectionNotFound("detection not present in dump")


def load_dump(path, classes: tuple[str, ...] = DEFAULT_CLASSES) -> DumpDetector:
    """Open a dump file as a replayable detector."""
    return DumpDetector(read_dump(path, classes))


def dump_from_detector(
    detector,
    cloud: np.ndarray,
    block_index: int,
    masks=(),
    classes: tuple[str, ...] = DEFAULT_CLASSES,
) -> FeatureDump:
    """Capture a detector's scene state; gradients for every detection x mask."""
    feats = detector.features(cloud, block_index)
    detections = detector.detect(cloud)
    gradients = {}
    for i, det in enumerate(detections):
        for mask in masks:
            grad = detector.gradient(cloud, det, mask, block_index)
            gradients[(i, mask_to_bits(mask))] = np.asarray(grad.values, dtype=np.float32)
    return FeatureDump(
        grid=feats.grid,
        block_index=block_index,
        coords=feats.coords,
        features=np.asarray(feats.values, dtype=np.float32),
        detections=detections,
        gradients=gradients,
        classes=classes,
    )
