"""Command-line entry point.

Subcommands mirror the pipeline stages (ingest, filter, cluster, crop, split,
eval), plus `run` for the whole pipeline from a JSON config and `report` to
re-render the summary of an existing output directory.

Exit codes: 0 success, 1 validation/config error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import crops as crops_mod
from .evaluation import EvaluationError, ModelError
from .ingest import ManifestError, load_manifest
from .person_filter import PersonFilterConfig
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    build_summary,
    render_summary,
    run_pipeline,
)
from .posture import PostureConfig, PostureError
from .splitter import SplitError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_STAGE = 2


def _add_common_filter_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--min-confidence", type=float, default=None,
                        help="minimum person-detection confidence (default 0.9)")
    parser.add_argument("--min-area-ratio", type=float, default=None,
                        help="minimum bbox-to-image area ratio (default 0.10)")


def _add_cluster_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variance-threshold", type=float, default=None)
    parser.add_argument("--k-min", type=int, default=None)
    parser.add_argument("--k-max", type=int, default=None)
    parser.add_argument("--cluster-seed", type=int, default=None)
    parser.add_argument("--restarts", type=int, default=None)
    parser.add_argument("--auto-discard-fraction", type=float, default=None)
    parser.add_argument("--decisions", type=str, default=None,
                        help='explicit cluster decisions as JSON, e.g. \'{"0": "keep", "3": "discard"}\'')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bmicurate",
        description="Batch curation and evaluation pipeline for BMI image datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and validate a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("filter", help="person-detection filters (steps 1-2)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common_filter_flags(p)

    p = sub.add_parser("cluster", help="posture clustering filter (step 3)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_cluster_flags(p)

    p = sub.add_parser("crop", help="compute perspective crop rects (and files)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perspectives", default=",".join(crops_mod.PERSPECTIVES),
                   help="comma-separated subset of full_body,torso_up,face")
    p.add_argument("--write-images", action="store_true")
    p.add_argument("--images-root", default=None,
                   help="base directory for relative image paths "
                        "(default: the manifest's directory)")

    p = sub.add_parser("split", help="subject-disjoint train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("eval", help="run a model over curated crops")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True, help="curated manifest")
    p.add_argument("--out", required=True, help="pipeline output directory (with crops/ and split.jsonl)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--perspective", default=crops_mod.FULL_BODY, choices=list(crops_mod.PERSPECTIVES))
    p.add_argument("--images-root", default=None,
                   help="base directory for relative image paths "
                        "(default: the manifest's directory)")

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True, help="JSON pipeline config")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    _add_common_filter_flags(p)
    _add_cluster_flags(p)
    p.add_argument("--ratios", default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--perspectives", default=None)
    p.add_argument("--write-images", action="store_true", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--eval-split", default=None)
    p.add_argument("--eval-perspective", default=None)

    p = sub.add_parser("report", help="re-render the summary for an output directory")
    p.add_argument("--out", required=True)

    return parser


def _config_from_run_args(args: argparse.Namespace) -> PipelineConfig:
    obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = PipelineConfig.from_dict(obj)

    # CLI flags override the config file field by field.
    if args.manifest is not None:
        config.manifest = args.manifest
    if args.out is not None:
        config.out_dir = args.out
    pf = config.person_filter
    if args.min_confidence is not None or args.min_area_ratio is not None:
        config.person_filter = PersonFilterConfig(
            min_confidence=args.min_confidence if args.min_confidence is not None
            else pf.min_confidence,
            min_area_ratio=args.min_area_ratio if args.min_area_ratio is not None
            else pf.min_area_ratio,
        )
    po = config.posture
    overrides = {
        "variance_threshold": args.variance_threshold,
        "k_min": args.k_min,
        "k_max": args.k_max,
        "seed": args.cluster_seed,
        "restarts": args.restarts,
        "auto_discard_fraction": args.auto_discard_fraction,
        "decisions": json.loads(args.decisions) if args.decisions else None,
    }
    if any(v is not None for v in overrides.values()):
        config.posture = PostureConfig(
            variance_threshold=overrides["variance_threshold"] or po.variance_threshold,
            k_min=overrides["k_min"] or po.k_min,
            k_max=overrides["k_max"] or po.k_max,
            seed=po.seed if overrides["seed"] is None else overrides["seed"],
            restarts=overrides["restarts"] or po.restarts,
            auto_discard_fraction=(
                po.auto_discard_fraction
                if overrides["auto_discard_fraction"] is None
                else overrides["auto_discard_fraction"]
            ),
            decisions=(
                {int(k): v for k, v in overrides["decisions"].items()}
                if overrides["decisions"]
                else po.decisions
            ),
            min_mean_visibility=po.min_mean_visibility,
        )
    if args.ratios is not None:
        config.split_ratios = tuple(float(r) for r in args.ratios.split(","))
    if args.split_seed is not None:
        config.split_seed = args.split_seed
    if args.perspectives is not None:
        config.perspectives = tuple(args.perspectives.split(","))
    if args.write_images:
        config.write_images = True
    if args.model is not None:
        config.model = args.model
    if args.eval_split is not None:
        config.eval_split = args.eval_split
    if args.eval_perspective is not None:
        config.eval_perspective = args.eval_perspective
    return config


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_run_args(args)
    result = run_pipeline(config)
    print(render_summary(result.summary))
    return EXIT_OK


def _cmd_ingest(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, rejects = load_manifest(args.manifest)
    from .ingest import write_manifest

    write_manifest(records, out_dir / "accepted.jsonl")
    with (out_dir / "ingest_rejects.jsonl").open("w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps({"line_number": r.line_number, "reason": r.reason,
                                 "raw": r.raw}) + "\n")
    print(f"accepted {len(records)}, rejected {len(rejects)} "
          f"of {len(records) + len(rejects)} lines")
    return EXIT_OK


def _cmd_filter(args: argparse.Namespace) -> int:
    from .person_filter import apply_person_filter
    from .pipeline import filter_accounting

    records, _ = load_manifest(args.manifest)
    cfg = PersonFilterConfig(
        min_confidence=args.min_confidence if args.min_confidence is not None else 0.9,
        min_area_ratio=args.min_area_ratio if args.min_area_ratio is not None else 0.10,
    )
    verdicts = apply_person_filter(records, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "person_verdicts.jsonl").open("w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps({"image_id": v.image_id, "reasons": sorted(v.reasons)}) + "\n")
    report = filter_accounting(verdicts)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _cmd_cluster(args: argparse.Namespace) -> int:
    from .posture import cluster_report, fit_posture_model

    records, _ = load_manifest(args.manifest)
    decisions = None
    if args.decisions:
        decisions = {int(k): v for k, v in json.loads(args.decisions).items()}
    cfg = PostureConfig(
        variance_threshold=args.variance_threshold or 0.95,
        k_min=args.k_min or 1,
        k_max=args.k_max or 10,
        seed=42 if args.cluster_seed is None else args.cluster_seed,
        restarts=args.restarts or 10,
        auto_discard_fraction=(
            0.05 if args.auto_discard_fraction is None else args.auto_discard_fraction
        ),
        decisions=decisions,
    )
    model, verdicts = fit_posture_model(records, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "cluster_model.json")
    with (out_dir / "posture_verdicts.jsonl").open("w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps({"image_id": v.image_id, "reasons": sorted(v.reasons)}) + "\n")
    report = cluster_report(model, records)
    (out_dir / "cluster_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    kept = sum(1 for v in verdicts if v.passed)
    print(f"k={model.kmeans.k}; kept {kept} of {len(verdicts)} records")
    return EXIT_OK


def _cmd_crop(args: argparse.Namespace) -> int:
    perspectives = tuple(args.perspectives.split(","))
    records, _ = load_manifest(args.manifest)
    out_dir = Path(args.out)
    crops_dir = out_dir / "crops"
    crops_dir.mkdir(parents=True, exist_ok=True)
    manifest_dir = Path(args.images_root) if args.images_root else Path(args.manifest).parent
    for perspective in perspectives:
        ok = 0
        with (crops_dir / f"{perspective}_rects.jsonl").open("w", encoding="utf-8") as fh:
            for r in records:
                try:
                    rect = crops_mod.crop_record(r, perspective)
                except crops_mod.CropError as exc:
                    fh.write(json.dumps({"image_id": r.image_id, "error": exc.code}) + "\n")
                    continue
                row = {
                    "image_id": r.image_id, "perspective": perspective,
                    "x": rect.x, "y": rect.y, "w": rect.width, "h": rect.height,
                    "margin_convention": "symmetric, +25%/side torso, +30%/side face",
                }
                if args.write_images:
                    src = Path(r.image_path)
                    if not src.is_absolute():
                        src = manifest_dir / src
                    out_img = crops_dir / perspective / f"{r.image_id}.png"
                    crops_mod.apply_crop(src, rect, out_img,
                                         expected_size=(r.image_width, r.image_height))
                    row["crop_path"] = str(out_img.relative_to(out_dir))
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                ok += 1
        print(f"{perspective}: {ok} rects of {len(records)} records")
    return EXIT_OK


def _cmd_split(args: argparse.Namespace) -> int:
    from .splitter import greedy_split, verify_disjoint, write_split

    records, _ = load_manifest(args.manifest)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    assignment = greedy_split(records, ratios, args.seed)
    report = verify_disjoint(assignment, records)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_split(assignment, out_dir / "split.jsonl")
    print(json.dumps({
        "overlap_count": report.overlap_count,
        "image_counts": report.image_counts,
        "image_fractions": report.image_fractions,
    }, indent=2))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    from .pipeline import run_evaluation

    records, _ = load_manifest(args.manifest)
    out_dir = Path(args.out)
    metrics = run_evaluation(
        model_path=Path(args.model),
        records=records,
        split_path=out_dir / "split.jsonl",
        rects_path=out_dir / "crops" / f"{args.perspective}_rects.jsonl",
        manifest_dir=Path(args.images_root) if args.images_root else Path(args.manifest).parent,
        crops_dir=out_dir / "crops",
        split_name=args.split,
        perspective=args.perspective,
        predictions_path=out_dir / "predictions.jsonl",
        metrics_path=out_dir / f"metrics_{args.split}_{args.perspective}.json",
    )
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    summary_file = out_dir / "summary.json"
    if summary_file.exists():
        summary = json.loads(summary_file.read_text(encoding="utf-8"))
    else:
        raise ConfigError(f"no summary.json under {out_dir}; run the pipeline first")
    print(render_summary(summary))
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "filter": _cmd_filter,
    "cluster": _cmd_cluster,
    "crop": _cmd_crop,
    "split": _cmd_split,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (StageError, ModelError, crops_mod.CropError, EvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, ManifestError, SplitError, PostureError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
