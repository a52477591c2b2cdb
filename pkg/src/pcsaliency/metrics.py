"""Faithfulness and localization metrics for saliency maps.

Deletion/Insertion perturb the scene in saliency order inside a ball of
twice the box diagonal around the explained detection and track how well
a rerun of the detector still finds the object. VEA, the pointing game
and the energy pointing game score a map against a ground-truth box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import OrientedBox, box_diagonal, iou_3d, points_in_box
from .errors import (
    EmptyCloud,
    EmptyGroundTruth,
    LengthMismatch,
    NoRegionPoints,
    ZeroEnergy,
)
from .pipeline import Detection

DEFAULT_VEA_THRESHOLDS = tuple(np.round(np.arange(1, 20) * 0.05, 2))


@dataclass(frozen=True)
class EvalThresholds:
    """Per-class IoU thresholds for matching predictions to ground truth."""

    car: float = 0.7
    pedestrian: float = 0.5
    cyclist: float = 0.5
    fallback: float = 0.5

    def __post_init__(self):
        for name in ("car", "pedestrian", "cyclist", "fallback"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} threshold must be in (0, 1], got {value}")

    def for_label(self, label: str) -> float:
        return {
            "car": self.car,
            "pedestrian": self.pedestrian,
            "cyclist": self.cyclist,
        }.get(label, self.fallback)


@dataclass(frozen=True)
class Curve:
    """Fraction-perturbed steps in [0, 1] and the IoU recorded at each."""

    steps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if steps.shape != values.shape or steps.ndim != 1 or len(steps) < 2:
            raise ValueError("steps and values must be matching 1-D arrays")
        if steps[0] != 0.0 or steps[-1] != 1.0 or np.any(np.diff(steps) <= 0):
            raise ValueError("steps must increase strictly from 0 to 1")
        if np.any((values < 0) | (values > 1)):
            raise ValueError("curve values must lie in [0, 1]")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "values", values)


def _region_order(cloud, d: Detection, saliency):
    """In-region point indices, sorted by descending saliency then index."""
    cloud = np.asarray(cloud, dtype=float)
    saliency = np.asarray(saliency, dtype=float)
    if len(saliency) != len(cloud):
        raise LengthMismatch(
            f"saliency length {len(saliency)} != cloud length {len(cloud)}"
        )
    radius = 2.0 * box_diagonal(d.box())
    dist = np.linalg.norm(cloud[:, :3] - np.array(d.center), axis=1)
    region = np.flatnonzero(dist <= radius)
    if len(region) == 0:
        raise NoRegionPoints("no points within twice the box diagonal")
    order = region[np.lexsort((region, -saliency[region]))]
    return cloud, order


def _detection_iou(detector, scene: np.ndarray, d: Detection) -> float:
    """Best same-class IoU against d's box after rerunning the detector."""
    if len(scene) == 0:
        return 0.0
    try:
        detections = detector.detect(scene)
    except EmptyCloud:
        return 0.0
    box = d.box()
    best = 0.0
    for found in detections:
        if found.label == d.label:
            best = max(best, iou_3d(box, found.box()))
    return best


def deletion_curve(detector, cloud, d: Detection, saliency, steps: int = 20) -> Curve:
    """IoU as the most salient in-region points are removed in batches."""
    cloud, order = _region_order(cloud, d, saliency)
    n_all = len(cloud)
    n_region = len(order)
    fractions = np.arange(steps + 1) / steps
    values = []
    for i in range(steps + 1):
        k = round(i * n_region / steps)
        keep = np.ones(n_all, dtype=bool)
        keep[order[:k]] = False
        values.append(_detection_iou(detector, cloud[keep], d))
    return Curve(fractions, np.array(values))


def insertion_curve(detector, cloud, d: Detection, saliency, steps: int = 20) -> Curve:
    """IoU as the most salient region points are added back to an emptied region."""
    cloud, order = _region_order(cloud, d, saliency)
    n_all = len(cloud)
    n_region = len(order)
    fractions = np.arange(steps + 1) / steps
    base = np.ones(n_all, dtype=bool)
    base[order] = False
    values = []
    for i in range(steps + 1):
        k = round(i * n_region / steps)
        keep = base.copy()
        keep[order[:k]] = True
        values.append(_detection_iou(detector, cloud[keep], d))
    return Curve(fractions, np.array(values))


def auc(curve: Curve) -> float:
    """Trapezoidal area under the curve, normalized by the step span."""
    steps, values = curve.steps, curve.values
    widths = steps[1:] - steps[:-1]
    area = float(np.sum(widths * (values[1:] + values[:-1]) * 0.5))
    return area / float(steps[-1] - steps[0])


def vea(saliency, cloud, gt_box: OrientedBox, thresholds=DEFAULT_VEA_THRESHOLDS) -> float:
    """Best point-set IoU between thresholded saliency and box membership.

    The map is normalized by its maximum; at each threshold t the predicted
    set is {saliency >= t} and the score is its IoU with the set of points
    inside the box. Returns the maximum over thresholds; an all-zero map
    scores 0.
    """
    saliency = np.asarray(saliency, dtype=float)
    cloud = np.asarray(cloud, dtype=float)
    if len(saliency) != len(cloud):
        raise LengthMismatch(
            f"saliency length {len(saliency)} != cloud length {len(cloud)}"
        )
    gt_mask = points_in_box(cloud, gt_box)
    if not gt_mask.any():
        raise EmptyGroundTruth("no cloud points inside the ground-truth box")
    peak = saliency.max()
    if peak <= 0:
        return 0.0
    normalized = saliency / peak
    best = 0.0
    for t in thresholds:
        pred = normalized >= t
        union = int(np.count_nonzero(pred | gt_mask))
        if union == 0:
            continue
        inter = int(np.count_nonzero(pred & gt_mask))
        best = max(best, inter / union)
    return best


def pointing_game(saliency, cloud, gt_box: OrientedBox) -> bool:
    """Hit iff the highest-saliency point (ties: lowest index) lies in the box."""
    saliency = np.asarray(saliency, dtype=float)
    if saliency.size == 0:
        raise ValueError("saliency map is empty")
    cloud = np.asarray(cloud, dtype=float)
    if len(saliency) != len(cloud):
        raise LengthMismatch(
            f"saliency length {len(saliency)} != cloud length {len(cloud)}"
        )
    top = int(np.argmax(saliency))
    return bool(points_in_box(cloud[top : top + 1], gt_box)[0])


def energy_pg(saliency, cloud, gt_box: OrientedBox) -> float:
    """Fraction of total saliency mass inside the ground-truth box."""
    saliency = np.asarray(saliency, dtype=float)
    cloud = np.asarray(cloud, dtype=float)
    if len(saliency) != len(cloud):
        raise LengthMismatch(
            f"saliency length {len(saliency)} != cloud length {len(cloud)}"
        )
    total = float(saliency.sum())
    if total <= 0:
        raise ZeroEnergy("saliency map has no mass")
    inside = float(saliency[points_in_box(cloud, gt_box)].sum())
    return inside / total


def well_detected(
    predictions: list[Detection],
    gts: list[tuple[OrientedBox, str]],
    thresholds: EvalThresholds,
) -> list[tuple[int, int, float]]:
    """Greedy same-class matching of predictions to ground truths.

    Pairs are considered in descending IoU order and kept when the IoU
    strictly exceeds the class threshold; every prediction and every
    ground truth is used at most once. Returns (pred_idx, gt_idx, iou).
    """
    candidates = []
    for pi, pred in enumerate(predictions):
        for gi, (box, label) in enumerate(gts):
            if pred.label != label:
                continue
            overlap = iou_3d(pred.box(), box)
            if overlap > thresholds.for_label(label):
                candidates.append((overlap, pi, gi))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    matches = []
    for overlap, pi, gi in candidates:
        if pi in used_pred or gi in used_gt:
            continue
        used_pred.add(pi)
        used_gt.add(gi)
        matches.append((pi, gi, overlap))
    return matches
