"""Object-specific saliency pipeline.

Per detection: factorize the voxel feature map into concepts, aggregate
concept weights into a global activation, weight it by the channel-summed
magnitude of the detection's feature gradient, and upsample the combined
voxel map to per-point scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nmf
from .boxes import OrientedBox
from .errors import DetectorFailure, EmptyMask, LengthMismatch
from .voxelgrid import (
    SparseVoxelMap,
    UpsampleConfig,
    nearest_voxel_values,
    upsample_to_points,
)

ATTRIBUTE_NAMES = ("x", "y", "z", "l", "w", "h", "yaw", "s")

ABLATIONS = ("full", "no_ff", "no_vu", "gradient_only")


def make_mask(*names: str) -> frozenset[str]:
    """Attribute mask from names; validates against the known attributes."""
    unknown = set(names) - set(ATTRIBUTE_NAMES)
    if unknown:
        raise ValueError(f"unknown attributes: {sorted(unknown)}")
    return frozenset(names)


def full_mask() -> frozenset[str]:
    return frozenset(ATTRIBUTE_NAMES)


def mask_to_bits(mask: frozenset[str]) -> int:
    """Pack a mask into the dump-file bitfield (bit i = ATTRIBUTE_NAMES[i])."""
    return sum(1 << i for i, name in enumerate(ATTRIBUTE_NAMES) if name in mask)


def bits_to_mask(bits: int) -> frozenset[str]:
    return frozenset(
        name for i, name in enumerate(ATTRIBUTE_NAMES) if bits & (1 << i)
    )


@dataclass(frozen=True)
class Detection:
    """One detector output: box, confidence and class label."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    score: float
    label: str

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"detection size must be positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def attribute(self, name: str) -> float:
        x, y, z = self.center
        l, w, h = self.size
        return {
            "x": x, "y": y, "z": z,
            "l": l, "w": w, "h": h,
            "yaw": self.yaw, "s": self.score,
        }[name]

    def box(self) -> OrientedBox:
        return OrientedBox(self.center, self.size, self.yaw)


@dataclass(frozen=True)
class PipelineConfig:
    """End-to-end knobs: factorization, upsampling, feature block, ablation."""

    nmf: nmf.NmfConfig = field(default_factory=nmf.NmfConfig)
    upsample: UpsampleConfig = field(default_factory=UpsampleConfig)
    block_index: int = 3
    ablation: str = "full"

    def __post_init__(self):
        if self.block_index not in (1, 2, 3, 4):
            raise ValueError(f"block_index must be in 1..4, got {self.block_index}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")


def object_loss(d: Detection, mask: frozenset[str]) -> float:
    """L1 distance of the masked continuous attributes to an all-zero baseline."""
    if not mask:
        raise EmptyMask("attribute mask selects nothing")
    unknown = set(mask) - set(ATTRIBUTE_NAMES)
    if unknown:
        raise ValueError(f"unknown attributes: {sorted(unknown)}")
    return float(sum(abs(d.attribute(name)) for name in mask))


def channel_aggregate(gradients: SparseVoxelMap | np.ndarray) -> np.ndarray:
    """Per-voxel L1 norm across gradient channels."""
    values = gradients.values if isinstance(gradients, SparseVoxelMap) else gradients
    values = np.asarray(values, dtype=float)
    return np.abs(values).sum(axis=1)


def normalize(v: np.ndarray) -> np.ndarray:
    """Min-max scale into [0, 1]; constant vectors map to all zeros."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def combine(
    omega: np.ndarray, concept: np.ndarray, like: SparseVoxelMap
) -> SparseVoxelMap:
    """Element-wise product of the normalized gradient and concept activations.

    An exact all-ones concept vector is the ablation identity and skips
    normalization (min-max would collapse it to zeros).
    """
    omega = np.asarray(omega, dtype=float)
    concept = np.asarray(concept, dtype=float)
    if omega.shape != concept.shape:
        raise LengthMismatch(
            f"activation lengths differ: {omega.shape} vs {concept.shape}"
        )
    if len(omega) != len(like):
        raise LengthMismatch(
            f"activation length {len(omega)} != voxel count {len(like)}"
        )
    scaled_concept = concept if np.all(concept == 1.0) else normalize(concept)
    return like.with_values(normalize(omega) * scaled_concept)


def explain_detection(
    detector,
    cloud: np.ndarray,
    d: Detection,
    mask: frozenset[str],
    cfg: PipelineConfig,
) -> np.ndarray:
    """Per-point saliency scores for one detection.

    Runs features -> factorization -> concept aggregation -> gradient
    weighting -> voxel upsampling. The ``no_ff`` ablation replaces the
    concept map with ones; ``no_vu`` and ``gradient_only`` replace
    upsampling with the point's own voxel value, and ``gradient_only``
    additionally drops the concept map.
    """
    features = detector.features(cloud, cfg.block_index)
    m = len(features)
    if m == 0:
        raise DetectorFailure("feature map has no occupied voxels")

    if cfg.ablation in ("no_ff", "gradient_only"):
        concept = np.ones(m)
    else:
        values = np.asarray(features.values, dtype=float)
        # Desk-scale feature maps can have fewer voxels than the requested
        # concept count; the factorization rank cannot exceed min(M, d).
        r_eff = min(cfg.nmf.r, m, values.shape[1])
        nmf_cfg = cfg.nmf if r_eff == cfg.nmf.r else _with_rank(cfg.nmf, r_eff)
        concept = nmf.global_concept_map(nmf.factorize(values, nmf_cfg))

    gradients = detector.gradient(cloud, d, mask, cfg.block_index)
    omega = channel_aggregate(gradients)
    combined = combine(omega, concept, features)

    if cfg.ablation in ("no_vu", "gradient_only"):
        return nearest_voxel_values(combined, cloud)
    return upsample_to_points(combined, cloud, cfg.upsample)


def _with_rank(cfg: nmf.NmfConfig, r: int) -> nmf.NmfConfig:
    return nmf.NmfConfig(
        r=r,
        max_iterations=cfg.max_iterations,
        relative_tolerance=cfg.relative_tolerance,
        seed=cfg.seed,
        clamp_negatives=cfg.clamp_negatives,
    )
