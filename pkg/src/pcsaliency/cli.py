"""Command-line surface.

Subcommands: ``explain`` (one detection -> saliency file), ``eval``
(scene set -> metric JSONL), ``sweep`` (hyperparameter grids -> table),
``aggregate`` (canonical average maps), ``modes`` (TP/FP report) and
``selftest`` (numerical self-checks). Exit codes: 0 success, 1 validation
failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .aggregate import CanonicalGrid, grid_to_csv, mode_report, tp_fp_split, write_grid
from .boxes import OrientedBox, canonicalize, iou_3d, points_in_box
from .detector import grad_check
from .errors import IoFailure, SaliencyError, ValidationError, ZeroEnergy
from .fileio import read_kitti_bin, read_labels_json, write_saliency
from .metrics import auc, deletion_curve, energy_pg, insertion_curve, pointing_game, vea
from .nmf import NmfConfig, factorize
from .pipeline import ATTRIBUTE_NAMES, explain_detection, full_mask, make_mask
from .runconfig import RunConfig, SceneRecord, find_scene_files

_SWEEP_R = (8, 16, 32, 64, 128)
_SWEEP_RANGE_K = ((0, 1), (1, 4), (2, 16), (3, 64))
_SWEEP_BLOCKS = (1, 2, 3, 4)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.handler(args)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, SaliencyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcsaliency",
        description="Saliency explanations for point-cloud object detections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override one configuration key",
        )

    p = sub.add_parser("explain", help="saliency map for one detection")
    p.add_argument("--scene", required=True, help="point cloud .bin file")
    p.add_argument("--detection", type=int, required=True, help="detection index")
    p.add_argument("--mask", default="all", help="'all' or comma-separated attributes")
    p.add_argument("--format", choices=("csv", "ply"), default="csv")
    p.add_argument("--out", help="output path (default under output.dir)")
    common(p)
    p.set_defaults(handler=_cmd_explain)

    p = sub.add_parser("eval", help="metric JSONL over well-detected objects")
    p.add_argument("--scenes", required=True, help="directory of <id>.bin scenes")
    p.add_argument("--out", help="output JSONL path (default under output.dir)")
    common(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter grid tables")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", help="output CSV path (default under output.dir)")
    common(p)
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("aggregate", help="canonical average maps per class and mask")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out-dir", help="grid output directory (default under output.dir)")
    p.add_argument(
        "--masks", default=",".join(ATTRIBUTE_NAMES) + ",all",
        help="comma-separated attribute names and/or 'all'",
    )
    common(p)
    p.set_defaults(handler=_cmd_aggregate)

    p = sub.add_parser("modes", help="true/false positive mode report")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", help="report JSON path (default under output.dir)")
    p.add_argument("--grids-dir", help="also export per-mode canonical grids here")
    common(p)
    p.set_defaults(handler=_cmd_modes)

    p = sub.add_parser("selftest", help="numerical self-checks")
    common(p)
    p.set_defaults(handler=_cmd_selftest)

    return parser


def _runconfig(args) -> RunConfig:
    return RunConfig.from_sources(args.config, args.overrides)


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.get("output.dir"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_mask(text: str):
    if text.strip() == "all":
        return full_mask()
    return make_mask(*[t.strip() for t in text.split(",") if t.strip()])


# ----------------------------------------------------------------------
# explain

def _cmd_explain(args) -> int:
    cfg = _runconfig(args)
    cloud = read_kitti_bin(args.scene)
    detector = cfg.build_detector()
    detections = detector.detect(cloud)
    if not 0 <= args.detection < len(detections):
        raise ValidationError(
            f"DetectionNotFound: scene has {len(detections)} detections, "
            f"index {args.detection} does not exist"
        )
    mask = _parse_mask(args.mask)
    saliency = explain_detection(
        detector, cloud, detections[args.detection], mask, cfg.pipeline_config()
    )
    scene_id = Path(args.scene).stem
    out = Path(args.out) if args.out else (
        _out_dir(cfg) / f"{scene_id}_{args.detection}.{args.format}"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_saliency(cloud, saliency, args.format, out)
    print(f"wrote {out} (config {cfg.config_hash()})")
    return 0


# ----------------------------------------------------------------------
# eval

def _load_scene(scene_id, bin_path, labels_path) -> SceneRecord:
    cloud = read_kitti_bin(bin_path)
    if labels_path is None:
        raise ValidationError(f"scene {bin_path} has no companion .labels.json")
    return SceneRecord(scene_id, cloud, read_labels_json(labels_path), str(bin_path))


def _scene_metric_rows(cfg: RunConfig, scene_id: str, bin_path, labels_path):
    scene = _load_scene(scene_id, bin_path, labels_path)
    cloud, gts = scene.cloud, scene.gts
    detector = cfg.build_detector()
    pcfg = cfg.pipeline_config()
    thresholds = cfg.thresholds()
    steps = cfg.get("eval.steps")
    config_hash = cfg.config_hash()
    rows = []
    detections = detector.detect(cloud)
    for pi, gi, _ in metrics.well_detected(detections, gts, thresholds):
        det = detections[pi]
        saliency = explain_detection(detector, cloud, det, full_mask(), pcfg)
        gt_box = gts[gi][0]
        try:
            enpg = energy_pg(saliency, cloud, gt_box)
        except ZeroEnergy:
            enpg = 0.0
        values = {
            "deletion": auc(deletion_curve(detector, cloud, det, saliency, steps)),
            "insertion": auc(insertion_curve(detector, cloud, det, saliency, steps)),
            "vea": vea(saliency, cloud, gt_box),
            "pg": 1.0 if pointing_game(saliency, cloud, gt_box) else 0.0,
            "enpg": enpg,
        }
        for metric in sorted(values):
            rows.append(
                {
                    "scene_id": scene_id,
                    "detection_id": pi,
                    "metric": metric,
                    "value": values[metric],
                    "config_hash": config_hash,
                }
            )
    return rows


def _eval_worker(job):
    cfg, scene_id, bin_path, labels_path = job
    return _scene_metric_rows(cfg, scene_id, str(bin_path), labels_path and str(labels_path))


def _map_scenes(cfg: RunConfig, jobs, worker):
    parallelism = cfg.get("parallelism")
    if parallelism <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(worker, jobs))


def _cmd_eval(args) -> int:
    cfg = _runconfig(args)
    scenes = find_scene_files(args.scenes)
    if not scenes:
        raise ValidationError(f"no .bin scenes found in {args.scenes}")
    jobs = [(cfg, scene_id, bin_path, labels_path) for scene_id, bin_path, labels_path in scenes]
    per_scene = _map_scenes(cfg, jobs, _eval_worker)
    rows = [row for rows in per_scene for row in rows]
    rows.sort(key=lambda r: (r["scene_id"], r["detection_id"], r["metric"]))
    out = Path(args.out) if args.out else _out_dir(cfg) / "metrics.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {out}: {exc}") from exc
    print(f"wrote {len(rows)} records to {out} (config {cfg.config_hash()})")
    return 0


# ----------------------------------------------------------------------
# sweep

def _sweep_variants(cfg: RunConfig):
    for r in _SWEEP_R:
        yield ("r", str(r), cfg.with_values({"nmf.r": r}))
    for rng, k in _SWEEP_RANGE_K:
        yield (
            "range_k",
            f"({rng},{k})",
            cfg.with_values({"upsample.range_threshold": rng, "upsample.k": k}),
        )
    for block in _SWEEP_BLOCKS:
        yield ("block", str(block), cfg.with_values({"pipeline.block_index": block}))


def _cmd_sweep(args) -> int:
    cfg = _runconfig(args)
    scenes = find_scene_files(args.scenes)
    if not scenes:
        raise ValidationError(f"no .bin scenes found in {args.scenes}")
    lines = ["axis,setting,deletion,insertion,vea,pg,enpg"]
    for axis, setting, variant in _sweep_variants(cfg):
        jobs = [(variant, sid, b, l) for sid, b, l in scenes]
        per_scene = _map_scenes(variant, jobs, _eval_worker)
        by_metric: dict[str, list[float]] = {}
        for rows in per_scene:
            for row in rows:
                by_metric.setdefault(row["metric"], []).append(row["value"])
        means = {
            name: (float(np.mean(vals)) if (vals := by_metric.get(name)) else 0.0)
            for name in ("deletion", "insertion", "vea", "pg", "enpg")
        }
        lines.append(
            f"{axis},{setting},{means['deletion']:.6g},{means['insertion']:.6g},"
            f"{means['vea']:.6g},{means['pg']:.6g},{means['enpg']:.6g}"
        )
    out = Path(args.out) if args.out else _out_dir(cfg) / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        out.write_text(f"# config_hash={cfg.config_hash()}\n" + "\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {out}: {exc}") from exc
    print(f"wrote {len(lines) - 1} sweep rows to {out}")
    return 0


# ----------------------------------------------------------------------
# aggregate

def _cmd_aggregate(args) -> int:
    cfg = _runconfig(args)
    scenes = find_scene_files(args.scenes)
    if not scenes:
        raise ValidationError(f"no .bin scenes found in {args.scenes}")
    tokens = [t.strip() for t in args.masks.split(",") if t.strip()]
    masks = [(t, full_mask() if t == "all" else make_mask(t)) for t in tokens]

    detector = cfg.build_detector()
    pcfg = cfg.pipeline_config()
    thresholds = cfg.thresholds()
    grids: dict[tuple[str, str], CanonicalGrid] = {}
    for scene_id, bin_path, labels_path in scenes:
        scene = _load_scene(scene_id, bin_path, labels_path)
        cloud, gts = scene.cloud, scene.gts
        detections = detector.detect(cloud)
        for pi, _, _ in metrics.well_detected(detections, gts, thresholds):
            det = detections[pi]
            canonical = canonicalize(cloud, det.box())
            for mask_name, mask in masks:
                saliency = explain_detection(detector, cloud, det, mask, pcfg)
                grid = grids.setdefault(
                    (det.label, mask_name), CanonicalGrid()
                )
                grid.accumulate(canonical, saliency)

    out_dir = Path(args.out_dir) if args.out_dir else _out_dir(cfg) / "aggregate"
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config_hash": cfg.config_hash(), "grids": []}
    for (label, mask_name), grid in sorted(grids.items()):
        stem = f"avg_{label}_{mask_name}"
        write_grid(out_dir / f"{stem}.grid", grid)
        grid_to_csv(out_dir / f"{stem}.csv", grid)
        manifest["grids"].append(
            {
                "class": label,
                "mask": mask_name,
                "file": f"{stem}.grid",
                "points_binned": int(grid.counts.sum()),
                "points_discarded": grid.discarded,
            }
        )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(grids)} grids to {out_dir}")
    return 0


# ----------------------------------------------------------------------
# modes

def _cmd_modes(args) -> int:
    cfg = _runconfig(args)
    scenes = find_scene_files(args.scenes)
    if not scenes:
        raise ValidationError(f"no .bin scenes found in {args.scenes}")
    detector = cfg.build_detector()
    pcfg = cfg.pipeline_config()
    thresholds = cfg.thresholds()

    from .aggregate import ObjectExplanation

    records = []
    for scene_id, bin_path, labels_path in scenes:
        scene = _load_scene(scene_id, bin_path, labels_path)
        cloud, gts = scene.cloud, scene.gts
        detections = detector.detect(cloud)
        tp_pairs, fp_idx = tp_fp_split(detections, gts, thresholds)
        tp_set = {pi for pi, _ in tp_pairs}
        for pi, det in enumerate(detections):
            saliency = explain_detection(detector, cloud, det, full_mask(), pcfg)
            box = det.box()
            records.append(
                ObjectExplanation(
                    label=det.label,
                    is_tp=pi in tp_set,
                    canonical_points=canonicalize(cloud, box),
                    saliency=saliency,
                    in_box_points=int(np.count_nonzero(points_in_box(cloud, box))),
                )
            )

    report = mode_report(records)
    payload = {
        "config_hash": cfg.config_hash(),
        "tp": {
            "count": report.tp_count,
            "class_ratios": report.tp_class_ratios,
            "mean_points_in_box": report.tp_mean_points,
        },
        "fp": {
            "count": report.fp_count,
            "class_ratios": report.fp_class_ratios,
            "mean_points_in_box": report.fp_mean_points,
        },
    }
    out = Path(args.out) if args.out else _out_dir(cfg) / "modes.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")
    if args.grids_dir:
        grids_dir = Path(args.grids_dir)
        grids_dir.mkdir(parents=True, exist_ok=True)
        for mode, maps in (("tp", report.tp_maps), ("fp", report.fp_maps)):
            for label, grid in sorted(maps.items()):
                write_grid(grids_dir / f"{mode}_{label}.grid", grid)
    print(f"wrote {out}")
    return 0


# ----------------------------------------------------------------------
# selftest

def _mc_iou(a: OrientedBox, b: OrientedBox, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    corners = np.vstack([_aabb(a), _aabb(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / union


def _aabb(box: OrientedBox) -> np.ndarray:
    corners2d = box.footprint()
    z_lo = box.center[2] - box.size[2] / 2
    z_hi = box.center[2] + box.size[2] / 2
    out = np.zeros((2, 3))
    out[0, :2] = corners2d.min(axis=0)
    out[1, :2] = corners2d.max(axis=0)
    out[0, 2], out[1, 2] = z_lo, z_hi
    return out


def _cmd_selftest(args) -> int:
    cfg = _runconfig(args)
    ok = True

    def report(name, passed, detail):
        nonlocal ok
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")

    # analytic gradients vs central finite differences
    worst = max(grad_check(cfg.detector_config(), scene_seed=s) for s in (0, 1))
    report("gradient-check", worst <= 1e-4, f"max rel err {worst:.2e}")

    # NMF objective monotonicity and low-rank exactness
    from .synthetic import low_rank_matrix

    mono_ok, exact_ok = True, True
    for trial in range(5):
        a, rank = low_rank_matrix(trial, max_size=40, max_rank=8)
        fact = factorize(
            a, NmfConfig(r=rank, max_iterations=500, relative_tolerance=1e-9, seed=trial)
        )
        diffs = np.diff(fact.objective_history)
        mono_ok = mono_ok and bool(np.all(diffs <= 1e-9 * np.maximum(1.0, fact.objective_history[:-1])))
        exact_ok = exact_ok and fact.final_objective / float(np.sum(a * a)) <= 1e-6
    report("nmf-monotone", mono_ok, "objective non-increasing")
    report("nmf-low-rank-exact", exact_ok, "relative objective <= 1e-6")

    # rotated IoU vs Monte Carlo
    rng = np.random.default_rng(11)
    worst_gap = 0.0
    for trial in range(20):
        a = OrientedBox(
            tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(0.8, 3.0, 3)), float(rng.uniform(0, np.pi))
        )
        b = OrientedBox(
            tuple(np.array(a.center) + rng.uniform(-1.2, 1.2, 3)),
            tuple(rng.uniform(0.8, 3.0, 3)),
            float(rng.uniform(0, np.pi)),
        )
        gap = abs(iou_3d(a, b) - _mc_iou(a, b, 50_000, seed=trial))
        worst_gap = max(worst_gap, gap)
    report("iou-vs-monte-carlo", worst_gap <= 0.02, f"max gap {worst_gap:.4f}")

    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
