"""Command-line interface.

Subcommands: onboard (build a template store), infer (pose CSV for a batch
of detections), eval (robustness report with CSV and figure), bench
(per-stage latency JSONL and figure), gtcorr (depth-pair correspondence
CSV). Report commands always write the figure next to the delimited file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config
from .errors import EngineError
from .estimator import read_weights
from .evaluation import (
    DetectionRecord,
    ObjectModel,
    RleMask,
    discretized_symmetries,
    record_errors_csv,
    robustness_csv,
    robustness_curve,
)
from .featuregrid import read_grid
from .figures import latency_figure, robustness_figure
from .geometry import Affine2, CameraIntrinsics, Pose6D
from .pipeline import (
    bench,
    bench_jsonl,
    gt_corr_report,
    infer,
    infer_csv,
    make_synthetic_queries,
)
from .store import (
    QueryObservation,
    onboard_directory,
    read_store,
    synthetic_store,
    write_store,
)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _intrinsics(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"])
    )


def _crop(d: dict) -> Affine2:
    return Affine2(float(d["scale"]), 0.0, np.array([float(d["tx"]), float(d["ty"])]))


def _pose(d: dict) -> Pose6D:
    return Pose6D(
        np.array(d["R"], dtype=np.float64).reshape(3, 3),
        np.array(d["t"], dtype=np.float64),
    )


def _config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def _load_queries(path: Path) -> list[QueryObservation]:
    manifest = json.loads(path.read_text())
    base = path.parent
    observations = []
    for q in manifest.get("queries", []):
        observations.append(
            QueryObservation(
                detection_id=int(q["detection_id"]),
                invariant=read_grid(base / q["invariant"]),
                variant=read_grid(base / q["variant"]),
                crop=_crop(q["crop"]),
                intrinsics=_intrinsics(q["intrinsics"]),
                scene_id=int(q.get("scene_id", 0)),
                image_id=int(q.get("im_id", 0)),
            )
        )
    return observations


def _load_models(manifest: dict) -> dict[int, ObjectModel]:
    models = {}
    for key, spec in manifest.get("models", {}).items():
        if "symmetry_axis" in spec:
            axis = spec["symmetry_axis"]
            symmetries = discretized_symmetries(
                np.array(axis["axis"], dtype=np.float64), int(axis["steps"])
            )
        elif "symmetries" in spec:
            symmetries = tuple(
                np.array(m, dtype=np.float64).reshape(3, 3)
                for m in spec["symmetries"]
            )
        else:
            symmetries = (np.eye(3),)
        models[int(key)] = ObjectModel(
            np.array(spec["points"], dtype=np.float64), symmetries
        )
    return models


def _load_eval_records(manifest: dict) -> list[DetectionRecord]:
    records = []
    for r in manifest.get("records", []):
        records.append(
            DetectionRecord(
                scene_id=int(r.get("scene_id", 0)),
                image_id=int(r.get("im_id", 0)),
                object_id=int(r["obj_id"]),
                pred_mask=RleMask(
                    tuple(r["pred_mask"]["shape"]), tuple(r["pred_mask"]["counts"])
                ),
                gt_mask=RleMask(
                    tuple(r["gt_mask"]["shape"]), tuple(r["gt_mask"]["counts"])
                ),
                pred_pose=_pose(r["pred"]),
                gt_pose=_pose(r["gt"]),
                score=float(r.get("score", 0.0)),
                intrinsics=_intrinsics(r["intrinsics"]),
            )
        )
    return records


def _cmd_onboard(args) -> int:
    config = _config(args)
    if args.synthetic:
        store = synthetic_store(
            object_id=args.object_id,
            subdivisions=config.subdivisions,
            object_seed=args.object_seed,
            invariant_dim=args.invariant_dim,
            variant_dim=args.variant_dim,
        )
    else:
        store = onboard_directory(args.input)
    write_store(store, args.output)
    print(f"onboarded {len(store)} templates -> {args.output}")
    return 0


def _cmd_infer(args) -> int:
    store = read_store(args.store)
    weights = read_weights(args.weights)
    config = _config(args)
    observations = _load_queries(Path(args.queries))
    records = infer(store, observations, weights, config)
    Path(args.output).write_text(infer_csv(records))
    failed = sum(1 for r in records if r.error is not None)
    print(f"wrote {len(records)} rows -> {args.output} ({failed} failed)")
    return 0


def _cmd_eval(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    models = _load_models(manifest)
    records = _load_eval_records(manifest)
    thresholds = manifest.get("iou_thresholds")
    kwargs = {}
    if thresholds:
        kwargs["iou_thresholds"] = tuple(float(t) for t in thresholds)
    rows = robustness_curve(records, models, **kwargs)

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "robustness.csv").write_text(robustness_csv(rows))
    robustness_figure(rows, out_dir / "robustness.png")
    (out_dir / "records.csv").write_text(record_errors_csv(records, models))
    print(f"evaluated {len(records)} records -> {out_dir}")
    return 0


def _cmd_bench(args) -> int:
    store = read_store(args.store)
    weights = read_weights(args.weights)
    config = _config(args)
    observations, _ = make_synthetic_queries(
        args.queries,
        object_seed=args.object_seed,
        subdivisions=store.subdivisions,
        invariant_dim=store.templates[0].invariant.dim,
        variant_dim=store.variant_dim,
        seed=args.seed,
    )
    rows = bench(store, weights, observations, args.repeats, config)
    out = Path(args.output)
    out.write_text(bench_jsonl(rows))
    figure = out.with_suffix(".png")
    latency_figure(rows, figure)
    print(f"benchmarked {args.queries} queries x {args.repeats} repeats -> {out}")
    return 0


def _cmd_gtcorr(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text())
    if args.symmetrize:
        manifest["symmetrize"] = True
    csv_text = gt_corr_report(manifest, manifest_path.parent)
    Path(args.output).write_text(csv_text)
    n = csv_text.count("\n") - 1
    print(f"wrote {n} correspondences -> {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchpose",
        description="Template-based coarse 6D pose estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("onboard", help="build a template store")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="directory of GPFG grids plus manifest.json")
    source.add_argument(
        "--synthetic", action="store_true", help="onboard the synthetic provider"
    )
    p.add_argument("--object-id", type=int, default=1)
    p.add_argument("--object-seed", type=int, default=0)
    p.add_argument("--invariant-dim", type=_positive_int, default=32)
    p.add_argument("--variant-dim", type=_positive_int, default=16)
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("-o", "--output", required=True, help="store file to write")
    p.set_defaults(run=_cmd_onboard)

    p = sub.add_parser("infer", help="estimate poses for a query batch")
    p.add_argument("store", help="GPST template store")
    p.add_argument("--weights", required=True, help="GPWT regressor weights")
    p.add_argument("--queries", required=True, help="query manifest JSON")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("-o", "--output", required=True, help="CSV file to write")
    p.set_defaults(run=_cmd_infer)

    p = sub.add_parser("eval", help="robustness report from an eval manifest")
    p.add_argument("manifest", help="evaluation manifest JSON")
    p.add_argument("-o", "--output", required=True, help="report directory")
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("bench", help="per-stage latency percentiles")
    p.add_argument("store", help="GPST template store")
    p.add_argument("--weights", required=True, help="GPWT regressor weights")
    p.add_argument("--queries", type=_positive_int, default=20)
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--object-seed", type=int, default=0)
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("-o", "--output", required=True, help="JSONL file to write")
    p.set_defaults(run=_cmd_bench)

    p = sub.add_parser("gtcorr", help="depth-pair ground-truth correspondences")
    p.add_argument("manifest", help="depth pair manifest JSON")
    p.add_argument("--symmetrize", action="store_true")
    p.add_argument("-o", "--output", required=True, help="CSV file to write")
    p.set_defaults(run=_cmd_gtcorr)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except (EngineError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"patchpose: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
