"""Detector abstraction and the deterministic reference detector.

The reference detector is a desk-scale stand-in for a voxel 3D detection
network: a hand-rolled sparse feature pyramid (per-voxel descriptors, four
blocks of stride-2 sum pooling followed by a rectified seeded linear map)
and a thresholded clustering head whose box attributes are differentiable
functions of the voxel activations. Its gradients are analytic, which lets
tests pin them against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import DetectionNotFound, DetectorFailure, EmptyCloud, EmptyMask
from .pipeline import ATTRIBUTE_NAMES, Detection
from .voxelgrid import GridSpec, SparseVoxelMap

_NEIGHBOR_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


class DetectorInterface(Protocol):
    """Behavioral contract the explanation pipeline consumes."""

    def detect(self, cloud: np.ndarray) -> list[Detection]: ...

    def features(self, cloud: np.ndarray, block_index: int) -> SparseVoxelMap: ...

    def gradient(
        self,
        cloud: np.ndarray,
        d: Detection,
        mask: frozenset[str],
        block_index: int,
    ) -> SparseVoxelMap: ...


@dataclass(frozen=True)
class ReferenceDetectorConfig:
    """Geometry, feature width and head thresholds of the reference detector.

    ``feature_dim`` must be at least 5: the per-voxel base descriptor is
    (excess point count, mean offset x/y/z, mean intensity), zero-padded up
    to the feature width.
    """

    seed: int = 0
    voxel_size: float = 0.25
    x_range: tuple[float, float] = (0.0, 24.0)
    y_range: tuple[float, float] = (0.0, 24.0)
    z_range: tuple[float, float] = (0.0, 4.0)
    feature_dim: int = 32
    num_blocks: int = 4
    activation_threshold: float = 100.0
    excess_offset: float = 2.0
    kappa: float = 4.0
    size_floor: float = 1.0
    classes: tuple[str, ...] = ("car", "pedestrian", "cyclist")

    def __post_init__(self):
        if self.feature_dim < 5:
            raise ValueError("feature_dim must be >= 5 to hold the base descriptor")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.size_floor <= 0:
            raise ValueError("size_floor must be > 0")


@dataclass
class _Forward:
    """Cached per-block state of one forward pass."""

    block_coords: list[np.ndarray]  # per block 1..B, lex-sorted voxel coords
    block_values: list[np.ndarray]  # per block 1..B, (M_b, d)
    parent_rows: list[np.ndarray]  # block b>=2: child row -> parent row
    activations: np.ndarray  # head activations on the last block
    clusters: list[np.ndarray]  # active-row groups, 26-connected
    detections: list[Detection]


class ReferenceDetector:
    """Deterministic detector with analytic feature gradients."""

    def __init__(self, cfg: ReferenceDetectorConfig | None = None):
        self.cfg = cfg or ReferenceDetectorConfig()
        self.grid = GridSpec(
            self.cfg.voxel_size, self.cfg.x_range, self.cfg.y_range, self.cfg.z_range
        )
        d = self.cfg.feature_dim
        rng = np.random.default_rng(self.cfg.seed)
        # Strictly positive weights keep every occupied voxel's pre-activation
        # bounded away from zero, so the ReLU never sits on its kink and
        # finite-difference checks stay clean at step 1e-4.
        self._block_weights = [
            rng.uniform(0.05, 1.05, size=(d, d)) * (2.0 / d)
            for _ in range(self.cfg.num_blocks)
        ]
        self._score_vec = rng.uniform(0.5, 1.5, size=d)
        # Zero-mean class vectors: the argmax then keys on the channel mix of
        # a cluster rather than its overall magnitude.
        self._class_vecs = rng.normal(size=(len(self.cfg.classes), d))

    # ------------------------------------------------------------------
    # public interface

    def detect(self, cloud: np.ndarray) -> list[Detection]:
        return self._forward(cloud).detections

    def features(self, cloud: np.ndarray, block_index: int) -> SparseVoxelMap:
        self._check_block(block_index)
        fw = self._forward(cloud)
        return SparseVoxelMap(
            fw.block_coords[block_index - 1],
            fw.block_values[block_index - 1],
            self.grid.scaled(2 ** (block_index - 1)),
        )

    def gradient(
        self,
        cloud: np.ndarray,
        d: Detection,
        mask: frozenset[str],
        block_index: int,
    ) -> SparseVoxelMap:
        self._check_block(block_index)
        if not mask:
            raise EmptyMask("attribute mask selects nothing")
        fw = self._forward(cloud)
        cluster = fw.clusters[self._match_detection(fw, d)]
        grad = self._head_gradient(fw, cluster, mask)
        for b in range(self.cfg.num_blocks, block_index, -1):
            grad = self._backprop_block(fw, b, grad)
        return SparseVoxelMap(
            fw.block_coords[block_index - 1],
            grad,
            self.grid.scaled(2 ** (block_index - 1)),
        )

    def attribute_loss_frozen(
        self,
        cloud: np.ndarray,
        d: Detection,
        mask: frozenset[str],
        block_index: int,
        values: np.ndarray,
    ) -> float:
        """Loss of detection ``d`` recomputed from substituted block features.

        Cluster membership and class label stay frozen at the values of the
        unperturbed forward pass; only the continuous attribute math is
        re-evaluated. This is the function central finite differences probe.
        """
        self._check_block(block_index)
        fw = self._forward(cloud)
        cluster = fw.clusters[self._match_detection(fw, d)]
        return self._loss_from_block(fw, block_index, np.asarray(values, float), cluster, mask)

    # ------------------------------------------------------------------
    # forward pass

    def _check_block(self, block_index: int):
        if not 1 <= block_index <= self.cfg.num_blocks:
            raise DetectorFailure(
                f"block_index must be in 1..{self.cfg.num_blocks}, got {block_index}"
            )

    def _forward(self, cloud: np.ndarray) -> _Forward:
        cloud = np.asarray(cloud, dtype=float)
        if len(cloud) == 0:
            raise EmptyCloud("detector requires a non-empty point cloud")

        coords, base = self._base_descriptors(cloud)
        block_coords, block_values = [], []
        parent_rows: list[np.ndarray] = [np.zeros(0, dtype=np.int64)]

        values = base
        for b in range(self.cfg.num_blocks):
            if b > 0:
                # sum pooling: a parent's feature is the accumulated evidence
                # of everything beneath it, so removing points anywhere under
                # a cell always lowers its activation
                parents, inverse = _pool_topology(coords)
                pooled = np.zeros((len(parents), values.shape[1]))
                np.add.at(pooled, inverse, values)
                coords, values = parents, pooled
                parent_rows.append(inverse)
            values = np.maximum(values @ self._block_weights[b].T, 0.0)
            block_coords.append(coords)
            block_values.append(values)

        activations, clusters, detections = self._head(block_coords[-1], block_values[-1])
        return _Forward(
            block_coords, block_values, parent_rows,
            activations, clusters, detections,
        )

    def _base_descriptors(self, cloud: np.ndarray):
        """Lex-sorted occupied base voxels and their descriptor rows.

        Descriptor: excess point count (count - excess_offset, clipped at
        0), mean point offset from the voxel's lower corner (per axis, in
        [0, s)), mean intensity, zero padding. All entries are
        non-negative. The excess count makes the evidence
        density-sensitive: voxels holding only a couple of stray points
        contribute no occupancy signal, so isolated noise and uniformly
        thinned clouds score near zero.
        """
        d = self.cfg.feature_dim
        inside = self.grid.contains(cloud)
        pts = cloud[inside]
        if len(pts) == 0:
            return np.zeros((0, 3), dtype=np.int64), np.zeros((0, d))
        point_coords = self.grid.coords_for(pts)
        coords, inverse, counts = np.unique(
            point_coords, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.ravel()
        m = len(coords)
        values = np.zeros((m, d))
        values[:, 0] = np.maximum(counts - self.cfg.excess_offset, 0.0)
        corners = self.grid.lower + coords * self.grid.voxel_size
        offsets = pts[:, :3] - corners[inverse]
        sums = np.zeros((m, 3))
        np.add.at(sums, inverse, offsets)
        values[:, 1:4] = sums / counts[:, None]
        if pts.shape[1] > 3:
            isum = np.zeros(m)
            np.add.at(isum, inverse, pts[:, 3])
            values[:, 4] = isum / counts
        return coords, values

    def _head(self, coords: np.ndarray, values: np.ndarray):
        activations = values @ self._score_vec
        active = np.flatnonzero(activations > self.cfg.activation_threshold)
        clusters = _connected_components(coords, active)
        stride = 2 ** (self.cfg.num_blocks - 1)
        centers_grid = self.grid.scaled(stride)
        detections = [
            self._cluster_detection(coords, values, activations, cl, centers_grid)
            for cl in clusters
        ]
        return activations, clusters, detections

    def _cluster_detection(self, coords, values, activations, cluster, grid):
        centers = grid.centers(coords[cluster])
        w = activations[cluster]
        total = w.sum()
        mu = (w[:, None] * centers).sum(axis=0) / total
        var = (w[:, None] * (centers - mu) ** 2).sum(axis=0) / total
        size = np.maximum(self.cfg.kappa * np.sqrt(var), self.cfg.size_floor)
        score = _logistic(total)
        logits = self._class_vecs @ values[cluster].sum(axis=0)
        label = self.cfg.classes[int(np.argmax(logits))]
        return Detection(
            center=tuple(float(v) for v in mu),
            size=tuple(float(v) for v in size),
            yaw=0.0,
            score=float(score),
            label=label,
        )

    # ------------------------------------------------------------------
    # gradients

    def _match_detection(self, fw: _Forward, d: Detection) -> int:
        for i, found in enumerate(fw.detections):
            if found.label != d.label:
                continue
            fields = (
                *found.center, *found.size, found.yaw, found.score,
            )
            wanted = (*d.center, *d.size, d.yaw, d.score)
            if all(abs(a - b) <= 1e-9 for a, b in zip(fields, wanted)):
                return i
        raise DetectionNotFound(
            "detection does not match any detector output for this cloud"
        )

    def _head_gradient(self, fw: _Forward, cluster: np.ndarray, mask) -> np.ndarray:
        """d(loss)/d(last-block features), supported on the cluster's rows."""
        coords = fw.block_coords[-1]
        values = fw.block_values[-1]
        stride = 2 ** (self.cfg.num_blocks - 1)
        centers = self.grid.scaled(stride).centers(coords[cluster])
        w = fw.activations[cluster]
        total = w.sum()
        mu = (w[:, None] * centers).sum(axis=0) / total
        var = (w[:, None] * (centers - mu) ** 2).sum(axis=0) / total
        std = np.sqrt(var)

        # d(attr)/d(w_v) for each masked attribute, summed with the sign of
        # |attr| applied; yaw is constant 0 and the class label is discrete.
        g_w = np.zeros(len(cluster))
        for axis, name in enumerate(("x", "y", "z")):
            if name in mask:
                g_w += np.sign(mu[axis]) * (centers[:, axis] - mu[axis]) / total
        for axis, name in enumerate(("l", "w", "h")):
            if name in mask and self.cfg.kappa * std[axis] > self.cfg.size_floor:
                g_w += (
                    self.cfg.kappa
                    * ((centers[:, axis] - mu[axis]) ** 2 - var[axis])
                    / (2.0 * std[axis] * total)
                )
        if "s" in mask:
            sig = _logistic(total)
            g_w += sig * (1.0 - sig)

        grad = np.zeros_like(values)
        grad[cluster] = np.outer(g_w, self._score_vec)
        return grad

    def _backprop_block(self, fw: _Forward, b: int, grad: np.ndarray) -> np.ndarray:
        """Gradient at block b's output -> gradient at block b-1's output."""
        out = fw.block_values[b - 1]
        pre = (out > 0) * grad
        pooled_grad = pre @ self._block_weights[b - 1]
        return pooled_grad[fw.parent_rows[b - 1]]

    def _loss_from_block(self, fw, block_index, values, cluster, mask) -> float:
        """Frozen-structure loss from substituted block features."""
        for b in range(block_index, self.cfg.num_blocks):
            inverse = fw.parent_rows[b]
            pooled = np.zeros((len(fw.block_coords[b]), values.shape[1]))
            np.add.at(pooled, inverse, values)
            values = np.maximum(pooled @ self._block_weights[b].T, 0.0)

        stride = 2 ** (self.cfg.num_blocks - 1)
        centers = self.grid.scaled(stride).centers(fw.block_coords[-1][cluster])
        w = values[cluster] @ self._score_vec
        total = w.sum()
        mu = (w[:, None] * centers).sum(axis=0) / total
        var = (w[:, None] * (centers - mu) ** 2).sum(axis=0) / total
        size = np.maximum(self.cfg.kappa * np.sqrt(var), self.cfg.size_floor)
        score = _logistic(total)

        attrs = {
            "x": mu[0], "y": mu[1], "z": mu[2],
            "l": size[0], "w": size[1], "h": size[2],
            "yaw": 0.0, "s": score,
        }
        return float(sum(abs(attrs[name]) for name in mask))


def grad_check(
    cfg: ReferenceDetectorConfig | None = None,
    scene_seed: int = 0,
    block_index: int = 3,
    step: float = 1e-4,
    atol_floor: float = 1e-8,
) -> float:
    """Max relative analytic-vs-finite-difference gradient error on a scene.

    Builds a seeded synthetic scene, explains every detection with the full
    attribute mask, and central-differences every feature entry of the
    requested block. Differences below ``atol_floor`` are ignored; the rest
    are measured relative to the larger of the two gradients. Returns 0 for
    scenes without detections.
    """
    from .synthetic import single_object_scene

    cfg = cfg or ReferenceDetectorConfig()
    detector = ReferenceDetector(cfg)
    # light clutter keeps the finite-difference sweep tractable
    cloud, _, _ = single_object_scene(scene_seed, n_noise_points=120)
    fw = detector._forward(cloud)
    if not fw.detections:
        return 0.0

    mask = frozenset(ATTRIBUTE_NAMES)
    worst = 0.0
    base_values = fw.block_values[block_index - 1]
    for det_idx, detection in enumerate(fw.detections):
        cluster = fw.clusters[det_idx]
        analytic = np.asarray(
            detector.gradient(cloud, detection, mask, block_index).values
        )
        fd = np.zeros_like(analytic)
        values = base_values.copy()
        for flat in range(values.size):
            orig = values.flat[flat]
            values.flat[flat] = orig + step
            hi = detector._loss_from_block(fw, block_index, values, cluster, mask)
            values.flat[flat] = orig - step
            lo = detector._loss_from_block(fw, block_index, values, cluster, mask)
            values.flat[flat] = orig
            fd.flat[flat] = (hi - lo) / (2.0 * step)
        diff = np.abs(analytic - fd)
        ref = np.maximum(np.abs(analytic), np.abs(fd))
        significant = diff > atol_floor
        if np.any(significant):
            worst = max(worst, float((diff[significant] / ref[significant]).max()))
    return worst


def _pool_topology(coords: np.ndarray):
    """Stride-2 parents of the given coords: unique parents (lex-sorted)
    and the child-row -> parent-row map."""
    parent_of = coords // 2
    parents, inverse = np.unique(parent_of, axis=0, return_inverse=True)
    return parents, inverse.ravel()


def _connected_components(coords: np.ndarray, active: np.ndarray) -> list[np.ndarray]:
    """26-connected components among the active rows, deterministic order."""
    coord_rows = {tuple(coords[r]): r for r in active.tolist()}
    seen: set[int] = set()
    components = []
    for row in active.tolist():
        if row in seen:
            continue
        stack = [row]
        seen.add(row)
        comp = []
        while stack:
            r = stack.pop()
            comp.append(r)
            cx, cy, cz = coords[r]
            for dx, dy, dz in _NEIGHBOR_OFFSETS_26:
                nr = coord_rows.get((cx + dx, cy + dy, cz + dz))
                if nr is not None and nr not in seen:
                    seen.add(nr)
                    stack.append(nr)
        components.append(np.array(sorted(comp)))
    return components


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)
