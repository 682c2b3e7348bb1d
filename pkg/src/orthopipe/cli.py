"""Command-line interface.

Subcommands cover the whole pipeline: ``synth`` plants a scene, ``detect``
and ``segment`` run backends over tiles, ``calibrate`` fits a confidence
map from score/IoU pairs, ``eval-count`` scores predicted centers against
a reference inventory, and ``bench`` times the per-tile stages.

Exit codes: 0 on success, 2 for configuration problems, 3 for backend
failures, 4 for unreadable or malformed data.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import calibration, counteval, pipeline, synth
from .backend import OracleNoise
from .errors import DataError, PipelineError


def _add_detect_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--raster", type=Path, required=True, help="input raster image")
    p.add_argument(
        "--worldfile",
        type=Path,
        default=None,
        help="affine sidecar; defaults to <raster>.tfw/.pgw next to the image",
    )
    p.add_argument("--tile", type=int, default=800, help="tile edge in pixels")
    p.add_argument("--stride", type=int, default=400, help="tile stride in pixels")
    p.add_argument("--nms-iou", type=float, default=0.5, help="fusion IoU threshold")
    p.add_argument(
        "--backend",
        default="oracle",
        help='"oracle" or a worker command line speaking the NDJSON protocol',
    )
    p.add_argument("--workers", type=int, default=1, help="parallel tile workers")
    p.add_argument("--calib", type=Path, default=None, help="calibration model JSON")
    p.add_argument(
        "--threshold",
        type=float,
        default=None,
        help="keep detections with raw score >= this (default: model's, else none)",
    )
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    p.add_argument(
        "--truth", type=Path, default=None, help="planted truth CSV for the oracle"
    )
    p.add_argument("--seed", type=int, default=0, help="oracle noise seed")
    p.add_argument("--drop-rate", type=float, default=0.0, help="oracle object drop rate")
    p.add_argument(
        "--spurious-rate", type=float, default=0.0, help="oracle spurious boxes per tile"
    )
    p.add_argument(
        "--center-sigma", type=float, default=0.0, help="oracle center jitter in pixels"
    )
    p.add_argument("--score-sigma", type=float, default=0.0, help="oracle score noise")
    p.add_argument("--score-bias", type=float, default=0.0, help="oracle score offset")
    p.add_argument(
        "--emit-pairs",
        action="store_true",
        help="also write score/IoU pairs against the truth (needs --truth)",
    )
    p.add_argument(
        "--timeout", type=float, default=120.0, help="per-response backend timeout, s"
    )


def _detect_options(args: argparse.Namespace) -> pipeline.DetectOptions:
    noise = OracleNoise(
        drop_rate=args.drop_rate,
        spurious_rate=args.spurious_rate,
        center_sigma=args.center_sigma,
        score_sigma=args.score_sigma,
        score_bias=args.score_bias,
    )
    return pipeline.DetectOptions(
        raster=args.raster,
        out_dir=args.out_dir,
        worldfile=args.worldfile,
        tile=args.tile,
        stride=args.stride,
        nms_iou=args.nms_iou,
        backend=args.backend,
        workers=args.workers,
        calib=args.calib,
        threshold=args.threshold,
        truth=args.truth,
        seed=args.seed,
        noise=noise,
        emit_pairs=args.emit_pairs,
        timeout=args.timeout,
    )


def _print_run(manifest: dict, out_dir: Path) -> None:
    counts = manifest["counts"]
    parts = [
        f"tiles {manifest['tiles']}",
        f"raw {counts['raw']}",
        f"fused {counts['fused']}",
        f"kept {counts['kept']}",
    ]
    if "masks" in counts:
        parts.append(f"masks {counts['masks']}")
    print("  ".join(parts))
    for key, name in sorted(manifest["outputs"].items()):
        if name:
            print(f"{key}: {out_dir / name}")
    print(f"manifest: {out_dir / 'run.json'}")


def cmd_detect(args: argparse.Namespace) -> int:
    manifest = pipeline.run_detect(_detect_options(args))
    _print_run(manifest, args.out_dir)
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    manifest = pipeline.run_segment(_detect_options(args))
    _print_run(manifest, args.out_dir)
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    pairs = calibration.read_pairs_csv(args.pairs)
    model = calibration.fit(args.method, pairs)
    scores = [p.score for p in pairs]
    ious = [p.iou for p in pairs]
    mapped = model.apply(scores)
    print(f"method {args.method}  pairs {len(pairs)}")
    print(
        f"laece0 raw {calibration.laece0(scores, ious, args.bins):.4f}"
        f" -> calibrated {calibration.laece0(mapped, ious, args.bins):.4f}"
        f"  (bins {args.bins})"
    )
    print(
        f"laace0 raw {calibration.laace0(scores, ious):.4f}"
        f" -> calibrated {calibration.laace0(mapped, ious):.4f}"
    )
    extra = {}
    if args.n_gt is not None:
        threshold, f1 = calibration.select_threshold(pairs, args.n_gt)
        extra = {"threshold": threshold, "f1": f1}
        print(f"threshold {threshold:.4f}  (f1 {f1:.4f} at n_gt {args.n_gt})")
    if args.out is not None:
        calibration.write_model(args.out, model, **extra)
        print(f"model: {args.out}")
    return 0


def cmd_eval_count(args: argparse.Namespace) -> int:
    pred = counteval.read_points(args.pred)
    gt = counteval.read_points(args.gt)
    if gt.shape[0] == 0:
        raise DataError(f"no reference points in {args.gt}")
    report = counteval.evaluate(
        pred, gt, max_dist=args.dist, allow_many_to_one=args.allow_many_to_one
    )
    site = args.site if args.site is not None else Path(args.pred).stem
    row = counteval.report_row(report, site, args.area_ha)
    print(counteval.format_report_table([row]))
    p90 = counteval.shift_percentile(report.pred2gt)
    g90 = counteval.shift_percentile(report.gt2pred)
    print(
        f"90th percentile shift (m): Pred2GT "
        f"{'-' if p90 != p90 else format(p90, '.2f')}, "
        f"GT2Pred {'-' if g90 != g90 else format(g90, '.2f')}"
    )
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        counteval.write_report_csv(out / "report.csv", [row])
        counteval.write_curve_csv(out / "pred2gt_curve.csv", report.pred2gt)
        counteval.write_curve_csv(out / "gt2pred_curve.csv", report.gt2pred)
        if args.plot:
            counteval.write_curves_svg(out / "curves.svg", report)
        print(f"report: {out / 'report.csv'}")
    elif args.plot:
        raise DataError("--plot needs --out-dir for the SVG")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    result = pipeline.run_bench(
        args.images,
        args.backend,
        n=args.n,
        tile=args.tile,
        stride=args.stride,
        timeout=args.timeout,
        out_dir=args.out_dir,
    )
    print(pipeline.format_bench_table(result))
    if args.out_dir is not None:
        print(f"samples: {Path(args.out_dir) / 'bench.json'}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = synth.SceneConfig(
        width=args.width,
        height=args.height,
        gsd=args.gsd,
        n_objects=args.objects,
        seed=args.seed,
        radius_min=args.radius_min,
        radius_max=args.radius_max,
        min_gap=args.min_gap,
    )
    manifest = synth.write_scene(args.out_dir, args.name, cfg)
    out = Path(args.out_dir)
    print(f"image: {out / manifest['image']}")
    print(f"worldfile: {out / manifest['worldfile']}")
    print(f"truth: {out / manifest['truth_csv']}")
    print(f"objects: {manifest['objects']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthopipe",
        description="tiled object detection and counting on georeferenced rasters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect objects and write center points")
    _add_detect_args(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("segment", help="detect, then mask each kept box")
    _add_detect_args(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("calibrate", help="fit a score-to-confidence model")
    p.add_argument("--pairs", type=Path, required=True, help="score,iou CSV")
    p.add_argument(
        "--method",
        required=True,
        choices=("linear", "isotonic", "platt", "temperature"),
    )
    p.add_argument("--bins", type=int, default=25, help="bins for the binned metric")
    p.add_argument("--out", type=Path, default=None, help="write model JSON here")
    p.add_argument(
        "--n-gt",
        type=int,
        default=None,
        help="reference object count; enables F1 threshold selection",
    )
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval-count", help="score predicted centers against truth")
    p.add_argument("--pred", type=Path, required=True, help="predicted centers, GeoJSON or CSV")
    p.add_argument("--gt", type=Path, required=True, help="reference centers, CSV or GeoJSON")
    p.add_argument("--dist", type=float, default=counteval.DEFAULT_MATCH_DIST,
                   help="matching radius in meters, boundary inclusive")
    p.add_argument("--site", default=None, help="site label for the report")
    p.add_argument("--area-ha", type=float, default=None, help="site area in hectares")
    p.add_argument("--out-dir", type=Path, default=None, help="write report and curves here")
    p.add_argument("--plot", action="store_true", help="also write an SVG of the curves")
    p.add_argument(
        "--allow-many-to-one",
        action="store_true",
        help="let several sources share one destination",
    )
    p.set_defaults(func=cmd_eval_count)

    p = sub.add_parser("bench", help="time per-tile stages of a backend")
    p.add_argument("--images", type=Path, required=True, help="directory of rasters")
    p.add_argument("--backend", default="oracle")
    p.add_argument("--n", type=int, default=20, help="number of tiles to time")
    p.add_argument("--tile", type=int, default=800)
    p.add_argument("--stride", type=int, default=400)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--out-dir", type=Path, default=None, help="write bench.json here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="render a synthetic scene with planted truth")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--gsd", type=float, default=0.06, help="meters per pixel")
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius-min", type=float, default=10.0)
    p.add_argument("--radius-max", type=float, default=18.0)
    p.add_argument("--min-gap", type=float, default=40.0, help="min center distance, px")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--name", default="scene", help="basename for scene files")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
