"""End-to-end orchestration: ingest -> filter -> cluster -> crop -> split -> eval.

Stages write their artifacts under the output directory and record a config
hash sidecar; a rerun with unchanged config and inputs skips every stage whose
outputs are already present. All randomness flows from two named seeds (the
cluster seed and the split seed), which are echoed into every report.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

from PIL import Image

from . import crops as crops_mod
from .evaluation import PredictionRecord, PreprocessSpec, compute_metrics, load_model, preprocess
from .ingest import ImageRecord, load_manifest, record_to_dict, write_manifest
from .person_filter import FILTER_REASONS, FilterVerdict, PersonFilterConfig, apply_person_filter
from .posture import ClusterModel, PostureConfig, cluster_report, fit_posture_model
from .splitter import greedy_split, read_split, verify_disjoint, write_split


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """Declarative run configuration; every field maps to a CLI flag."""

    manifest: str
    out_dir: str
    person_filter: PersonFilterConfig = field(default_factory=PersonFilterConfig)
    posture: PostureConfig = field(default_factory=PostureConfig)
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_seed: int = 7
    perspectives: tuple[str, ...] = crops_mod.PERSPECTIVES
    write_images: bool = False
    model: str | None = None
    eval_split: str = "test"
    eval_perspective: str = crops_mod.FULL_BODY

    def validate(self) -> None:
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or any(r < 0 for r in self.split_ratios):
            raise ConfigError("invalid_ratios")
        unknown = set(self.perspectives) - set(crops_mod.PERSPECTIVES)
        if unknown:
            raise ConfigError(f"unknown perspectives: {sorted(unknown)}")
        if not Path(self.manifest).exists():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.model is not None and not Path(self.model).exists():
            raise ConfigError(f"model artifact not found: {self.model}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"unknown eval split {self.eval_split!r}")

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "out_dir": self.out_dir,
            "person_filter": {
                "min_confidence": self.person_filter.min_confidence,
                "min_area_ratio": self.person_filter.min_area_ratio,
            },
            "posture": {
                "variance_threshold": self.posture.variance_threshold,
                "k_min": self.posture.k_min,
                "k_max": self.posture.k_max,
                "seed": self.posture.seed,
                "restarts": self.posture.restarts,
                "auto_discard_fraction": self.posture.auto_discard_fraction,
                "decisions": (
                    {str(k): v for k, v in self.posture.decisions.items()}
                    if self.posture.decisions
                    else None
                ),
                "min_mean_visibility": self.posture.min_mean_visibility,
            },
            "split_ratios": list(self.split_ratios),
            "split_seed": self.split_seed,
            "perspectives": list(self.perspectives),
            "write_images": self.write_images,
            "model": self.model,
            "eval_split": self.eval_split,
            "eval_perspective": self.eval_perspective,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        pf = obj.get("person_filter", {})
        po = obj.get("posture", {})
        decisions = po.get("decisions")
        return cls(
            manifest=obj["manifest"],
            out_dir=obj["out_dir"],
            person_filter=PersonFilterConfig(
                min_confidence=float(pf.get("min_confidence", 0.9)),
                min_area_ratio=float(pf.get("min_area_ratio", 0.10)),
            ),
            posture=PostureConfig(
                variance_threshold=float(po.get("variance_threshold", 0.95)),
                k_min=int(po.get("k_min", 1)),
                k_max=int(po.get("k_max", 10)),
                seed=int(po.get("seed", 42)),
                restarts=int(po.get("restarts", 10)),
                auto_discard_fraction=float(po.get("auto_discard_fraction", 0.05)),
                decisions=(
                    {int(k): v for k, v in decisions.items()} if decisions else None
                ),
                min_mean_visibility=float(po.get("min_mean_visibility", 0.3)),
            ),
            split_ratios=tuple(obj.get("split_ratios", (0.70, 0.15, 0.15))),
            split_seed=int(obj.get("split_seed", 7)),
            perspectives=tuple(obj.get("perspectives", crops_mod.PERSPECTIVES)),
            write_images=bool(obj.get("write_images", False)),
            model=obj.get("model"),
            eval_split=obj.get("eval_split", "test"),
            eval_perspective=obj.get("eval_perspective", crops_mod.FULL_BODY),
        )


@dataclass
class FilterReport:
    """Set-semantics accounting of the filter verdicts."""

    total: int
    removed_total: int
    per_reason: dict[str, int]
    pairwise_overlap: dict[str, int]
    triple_overlap: dict[str, int]

    @property
    def removed_percent(self) -> float:
        return 100.0 * self.removed_total / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "removed_total": self.removed_total,
            "removed_percent": self.removed_percent,
            "per_reason": self.per_reason,
            "pairwise_overlap": self.pairwise_overlap,
            "triple_overlap": self.triple_overlap,
        }


def filter_accounting(verdicts: list[FilterVerdict]) -> FilterReport:
    """Per-reason counts plus pairwise/triple overlaps; the removed total is
    the size of the union of the reason sets, never their sum.
    """
    seen: set[str] = set()
    for v in verdicts:
        if v.image_id in seen:
            raise ValueError(f"duplicate image_id among verdicts: {v.image_id}")
        seen.add(v.image_id)

    members: dict[str, set[str]] = {reason: set() for reason in FILTER_REASONS}
    failing: set[str] = set()
    for v in verdicts:
        for reason in v.reasons:
            members.setdefault(reason, set()).add(v.image_id)
        if v.reasons:
            failing.add(v.image_id)

    reasons = sorted(members)
    pairwise = {
        "&".join(pair): len(members[pair[0]] & members[pair[1]])
        for pair in combinations(reasons, 2)
    }
    triple = {
        "&".join(tri): len(members[tri[0]] & members[tri[1]] & members[tri[2]])
        for tri in combinations(reasons, 3)
    }
    return FilterReport(
        total=len(verdicts),
        removed_total=len(failing),
        per_reason={reason: len(ids) for reason, ids in members.items()},
        pairwise_overlap=pairwise,
        triple_overlap=triple,
    )


# ---------------------------------------------------------------------------
# Stage plumbing


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stage_hash(config_fragment: dict, inputs: list[Path]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config_fragment, sort_keys=True).encode("utf-8"))
    for path in inputs:
        h.update(path.name.encode("utf-8"))
        h.update(_sha256_file(path).encode("utf-8"))
    return h.hexdigest()


class _StageRunner:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.statuses: dict[str, str] = {}

    def run(self, name: str, fragment: dict, inputs: list[Path], outputs: list[Path], fn) -> None:
        sidecar = self.out_dir / f"{name}.stage.json"
        stage_hash = _stage_hash(fragment, inputs)
        if sidecar.exists():
            try:
                recorded = json.loads(sidecar.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                recorded = {}
            if recorded.get("config_hash") == stage_hash and all(p.exists() for p in outputs):
                self.statuses[name] = "skipped"
                return
        try:
            fn()
        except Exception as exc:
            # Partial outputs from a failed stage must not look resumable.
            sidecar.unlink(missing_ok=True)
            raise StageError(name, exc) from exc
        sidecar.write_text(
            json.dumps(
                {
                    "stage": name,
                    "config_hash": stage_hash,
                    "outputs": [str(p) for p in outputs],
                    "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
                },
                indent=2,
            ),
            encoding="utf-8",
        )
        self.statuses[name] = "ran"


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _verdicts_from_rows(rows: list[dict]) -> list[FilterVerdict]:
    return [FilterVerdict(r["image_id"], frozenset(r["reasons"])) for r in rows]


def _resolve_image_path(record: ImageRecord, manifest_dir: Path) -> Path:
    p = Path(record.image_path)
    return p if p.is_absolute() else manifest_dir / p


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineResult:
    out_dir: Path
    summary: dict
    stage_statuses: dict[str, str]


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every configured stage, skipping the ones whose outputs are fresh."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(config.manifest)
    manifest_dir = manifest_path.parent
    runner = _StageRunner(out_dir)

    accepted_path = out_dir / "accepted.jsonl"
    rejects_path = out_dir / "ingest_rejects.jsonl"
    person_verdicts_path = out_dir / "person_verdicts.jsonl"
    posture_verdicts_path = out_dir / "posture_verdicts.jsonl"
    cluster_model_path = out_dir / "cluster_model.json"
    cluster_report_path = out_dir / "cluster_report.json"
    curated_path = out_dir / "curated.jsonl"
    removed_path = out_dir / "removed.jsonl"
    filter_report_path = out_dir / "filter_report.json"
    split_path = out_dir / "split.jsonl"
    crops_dir = out_dir / "crops"

    # -- ingest -------------------------------------------------------------
    def do_ingest() -> None:
        records, rejects = load_manifest(manifest_path)
        write_manifest(records, accepted_path)
        _write_jsonl(
            rejects_path,
            [
                {"line_number": r.line_number, "reason": r.reason, "raw": r.raw}
                for r in rejects
            ],
        )

    runner.run("ingest", {}, [manifest_path], [accepted_path, rejects_path], do_ingest)
    records, _ = load_manifest(accepted_path)

    # -- person filter ------------------------------------------------------
    def do_person_filter() -> None:
        verdicts = apply_person_filter(records, config.person_filter)
        _write_jsonl(
            person_verdicts_path,
            [{"image_id": v.image_id, "reasons": sorted(v.reasons)} for v in verdicts],
        )

    runner.run(
        "filter",
        {"person_filter": config.to_dict()["person_filter"]},
        [accepted_path],
        [person_verdicts_path],
        do_person_filter,
    )

    # -- posture clustering ---------------------------------------------------
    def do_cluster() -> None:
        model, verdicts = fit_posture_model(records, config.posture)
        model.save(cluster_model_path)
        _write_jsonl(
            posture_verdicts_path,
            [{"image_id": v.image_id, "reasons": sorted(v.reasons)} for v in verdicts],
        )
        report = cluster_report(model, records)
        cluster_report_path.write_text(json.dumps(report, indent=2), encoding="utf-8")

    runner.run(
        "cluster",
        {"posture": config.to_dict()["posture"]},
        [accepted_path],
        [cluster_model_path, posture_verdicts_path, cluster_report_path],
        do_cluster,
    )

    # -- curation (verdict merge + accounting) -------------------------------
    def do_curate() -> None:
        person_rows = _read_jsonl(person_verdicts_path)
        posture_rows = _read_jsonl(posture_verdicts_path)
        posture_by_id = {v.image_id: v for v in _verdicts_from_rows(posture_rows)}
        merged: list[FilterVerdict] = []
        for v in _verdicts_from_rows(person_rows):
            other = posture_by_id.get(v.image_id, FilterVerdict(v.image_id))
            merged.append(v.merged(other))
        verdict_by_id = {v.image_id: v for v in merged}

        curated = [r for r in records if verdict_by_id[r.image_id].passed]
        removed_rows = []
        for r in records:
            v = verdict_by_id[r.image_id]
            if not v.passed:
                row = record_to_dict(r)
                row["reasons"] = sorted(v.reasons)
                removed_rows.append(row)
        write_manifest(curated, curated_path)
        _write_jsonl(removed_path, removed_rows)
        report = filter_accounting(merged)
        filter_report_path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")

    runner.run(
        "curate",
        {},
        [person_verdicts_path, posture_verdicts_path],
        [curated_path, removed_path, filter_report_path],
        do_curate,
    )
    curated_records, _ = load_manifest(curated_path)

    # -- crops ----------------------------------------------------------------
    def do_crop() -> None:
        crops_dir.mkdir(parents=True, exist_ok=True)
        for perspective in config.perspectives:
            rows = []
            for r in curated_records:
                try:
                    rect = crops_mod.crop_record(r, perspective)
                except crops_mod.CropError as exc:
                    rows.append({"image_id": r.image_id, "error": exc.code})
                    continue
                row = {
                    "image_id": r.image_id,
                    "perspective": perspective,
                    "x": rect.x,
                    "y": rect.y,
                    "w": rect.width,
                    "h": rect.height,
                    "margin_convention": "symmetric, +25%/side torso, +30%/side face",
                }
                if config.write_images:
                    src = _resolve_image_path(r, manifest_dir)
                    out_img = crops_dir / perspective / f"{r.image_id}.png"
                    crops_mod.apply_crop(
                        src, rect, out_img,
                        expected_size=(r.image_width, r.image_height),
                    )
                    row["crop_path"] = str(out_img.relative_to(out_dir))
                rows.append(row)
            _write_jsonl(crops_dir / f"{perspective}_rects.jsonl", rows)

    crop_outputs = [crops_dir / f"{p}_rects.jsonl" for p in config.perspectives]
    runner.run(
        "crop",
        {"perspectives": list(config.perspectives), "write_images": config.write_images},
        [curated_path],
        crop_outputs,
        do_crop,
    )

    # -- split ----------------------------------------------------------------
    def do_split() -> None:
        assignment = greedy_split(curated_records, config.split_ratios, config.split_seed)
        report = verify_disjoint(assignment, curated_records)
        if not report.ok:
            raise RuntimeError(f"split produced subject overlap: {report.violations}")
        write_split(assignment, split_path)

    runner.run(
        "split",
        {"ratios": list(config.split_ratios), "seed": config.split_seed},
        [curated_path],
        [split_path],
        do_split,
    )

    # -- eval -----------------------------------------------------------------
    metrics_path = out_dir / f"metrics_{config.eval_split}_{config.eval_perspective}.json"
    predictions_path = out_dir / "predictions.jsonl"
    if config.model is not None:
        def do_eval() -> None:
            run_evaluation(
                model_path=Path(config.model),
                records=curated_records,
                split_path=split_path,
                rects_path=crops_dir / f"{config.eval_perspective}_rects.jsonl",
                manifest_dir=manifest_dir,
                crops_dir=crops_dir,
                split_name=config.eval_split,
                perspective=config.eval_perspective,
                predictions_path=predictions_path,
                metrics_path=metrics_path,
            )

        runner.run(
            "eval",
            {
                "split": config.eval_split,
                "perspective": config.eval_perspective,
                "model": str(config.model),
            },
            [curated_path, split_path, Path(config.model)],
            [predictions_path, metrics_path],
            do_eval,
        )

    summary = build_summary(config, out_dir, runner.statuses)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    (out_dir / "summary.txt").write_text(render_summary(summary), encoding="utf-8")
    return PipelineResult(out_dir=out_dir, summary=summary, stage_statuses=runner.statuses)


def run_evaluation(
    model_path: Path,
    records: list[ImageRecord],
    split_path: Path,
    rects_path: Path,
    manifest_dir: Path,
    crops_dir: Path,
    split_name: str,
    perspective: str,
    predictions_path: Path,
    metrics_path: Path,
    spec: PreprocessSpec | None = None,
) -> dict:
    """Predict over the crops of one split/perspective and write reports."""
    spec = spec or PreprocessSpec()
    model = load_model(model_path)
    _, pairs = read_split(split_path)
    split_of = dict(pairs)
    rect_rows = {r["image_id"]: r for r in _read_jsonl(rects_path) if "error" not in r}

    preds: list[PredictionRecord] = []
    rows = []
    for record in records:
        if split_of.get(record.subject_id) != split_name:
            continue
        row = rect_rows.get(record.image_id)
        if row is None:
            continue
        crop_file = crops_dir / perspective / f"{record.image_id}.png"
        if crop_file.exists():
            tensor = preprocess(crop_file, spec)
        else:
            src = _resolve_image_path(record, manifest_dir)
            with Image.open(src) as img:
                img.load()
                rect = crops_mod.CropRect(
                    x=row["x"], y=row["y"], width=row["w"], height=row["h"],
                    perspective=perspective,
                )
                x0, y0, x1, y1 = rect.to_pixels(img.size[0], img.size[1])
                tensor = preprocess(img.crop((x0, y0, x1, y1)), spec)
        predicted = model.predict(tensor)
        pred = PredictionRecord(
            image_id=record.image_id,
            subject_id=record.subject_id,
            split=split_name,
            predicted_bmi=predicted,
            true_bmi=record.measurement.bmi,
            height_m=record.measurement.height_m,
        )
        preds.append(pred)
        rows.append(
            {
                "image_id": pred.image_id,
                "subject_id": pred.subject_id,
                "split": pred.split,
                "predicted_bmi": pred.predicted_bmi,
                "true_bmi": pred.true_bmi,
                "height_m": pred.height_m,
            }
        )

    _write_jsonl(predictions_path, rows)
    metrics = compute_metrics(preds).to_dict()
    metrics["split"] = split_name
    metrics["perspective"] = perspective
    metrics_path.write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    return metrics


def build_summary(config: PipelineConfig, out_dir: Path, statuses: dict[str, str]) -> dict:
    """Assemble the run summary from the artifacts on disk, so it also works
    for fully resumed runs and for the standalone `report` command.
    """
    summary: dict = {
        "config": config.to_dict(),
        "seeds": {"cluster": config.posture.seed, "split": config.split_seed},
        "stages": statuses,
        "artifacts": {},
    }
    counts: dict = {}

    accepted = out_dir / "accepted.jsonl"
    rejects = out_dir / "ingest_rejects.jsonl"
    if accepted.exists():
        n_accepted = len(_read_jsonl(accepted))
        n_rejects = len(_read_jsonl(rejects))
        counts["ingested_total"] = n_accepted + n_rejects
        counts["accepted"] = n_accepted
        counts["ingest_rejects"] = n_rejects
        summary["artifacts"]["accepted"] = accepted.name
        summary["artifacts"]["ingest_rejects"] = rejects.name

    filter_report = out_dir / "filter_report.json"
    if filter_report.exists():
        report = json.loads(filter_report.read_text(encoding="utf-8"))
        summary["filter_report"] = report
        counts["curated"] = len(_read_jsonl(out_dir / "curated.jsonl"))
        counts["removed"] = report["removed_total"]
        summary["artifacts"]["curated"] = "curated.jsonl"
        summary["artifacts"]["removed"] = "removed.jsonl"
        summary["artifacts"]["filter_report"] = filter_report.name

    model_file = out_dir / "cluster_model.json"
    if model_file.exists():
        model = json.loads(model_file.read_text(encoding="utf-8"))
        summary["clustering"] = {
            "chosen_k": model["kmeans"]["k"],
            "inertia_by_k": model["inertia_by_k"],
            "decisions": model["decision"]["decisions"],
            "member_counts": model["decision"]["member_counts"],
            "pca_components": len(model["pca"]["components"]),
        }
        summary["artifacts"]["cluster_model"] = model_file.name

    split_file = out_dir / "split.jsonl"
    if split_file.exists():
        header, pairs = read_split(split_file)
        summary["split"] = header
        summary["artifacts"]["split"] = split_file.name

    for metrics_file in sorted(out_dir.glob("metrics_*.json")):
        summary.setdefault("metrics", []).append(
            json.loads(metrics_file.read_text(encoding="utf-8"))
        )
        summary["artifacts"][metrics_file.stem] = metrics_file.name

    summary["counts"] = counts
    return summary


def render_summary(summary: dict) -> str:
    """Human-readable companion to summary.json."""
    lines = ["pipeline summary", "================"]
    seeds = summary.get("seeds", {})
    lines.append(f"seeds: cluster={seeds.get('cluster')} split={seeds.get('split')}")
    counts = summary.get("counts", {})
    if counts:
        lines.append("")
        lines.append(f"ingested lines:  {counts.get('ingested_total', 0)}")
        lines.append(f"ingest rejects:  {counts.get('ingest_rejects', 0)}")
        lines.append(f"accepted:        {counts.get('accepted', 0)}")
        if "curated" in counts:
            lines.append(f"curated:         {counts['curated']}")
            lines.append(f"removed:         {counts['removed']}")
    report = summary.get("filter_report")
    if report:
        lines.append("")
        lines.append(
            f"removed {report['removed_total']} of {report['total']} "
            f"({report['removed_percent']:.2f}%)"
        )
        for reason, count in sorted(report["per_reason"].items()):
            lines.append(f"  {reason:<20} {count}")
        overlaps = {k: v for k, v in report["pairwise_overlap"].items() if v}
        if overlaps:
            lines.append("  overlaps:")
            for key, count in sorted(overlaps.items()):
                lines.append(f"    {key:<30} {count}")
    clustering = summary.get("clustering")
    if clustering:
        lines.append("")
        lines.append(
            f"posture clusters: k={clustering['chosen_k']} "
            f"(pca components: {clustering['pca_components']})"
        )
        for cid, count in sorted(clustering["member_counts"].items(), key=lambda kv: int(kv[0])):
            decision = clustering["decisions"][cid]
            lines.append(f"  cluster {cid}: {count} images -> {decision}")
    split = summary.get("split")
    if split:
        lines.append("")
        lines.append(f"split (seed {split.get('seed')}, {split.get('generator')}):")
        for name, actual in split.get("actual", {}).items():
            target = split.get("targets", {}).get(name)
            lines.append(f"  {name:<6} actual {actual} (target {target:.1f})")
    for metrics in summary.get("metrics", []):
        lines.append("")
        lines.append(
            f"metrics [{metrics['split']}/{metrics['perspective']}] n={metrics['n']}: "
            f"MAPE {metrics['mape_percent']:.2f}%  "
            f"MAE(BMI) {metrics['mae_bmi']:.3f}  MAE(kg) {metrics['mae_kg']:.3f}"
        )
    lines.append("")
    return "\n".join(lines)
