"""End-to-end: pipeline-format inputs -> train CLI -> loadable artifact.

The input files are written here in the pipeline's documented wire formats
(JSON Lines manifest, split file with header line, per-perspective crop
directory); nothing from the pipeline package is imported.
"""

import json

import numpy as np
import torch
from PIL import Image

from bmitrainer.cli import main
from bmitrainer.data import CropDataset
from bmitrainer.export import load_artifact, read_artifact_metadata


def build_pipeline_artifacts(root, n_subjects=4, images_per_subject=3):
    rng = np.random.default_rng(0)
    crops_dir = root / "crops" / "full_body"
    crops_dir.mkdir(parents=True)
    manifest_lines = []
    split_lines = [{"header": {"seed": 1, "generator": "numpy-pcg64",
                               "ratios": [0.7, 0.15, 0.15]}}]
    splits = ["train", "train", "val", "test"]
    for s in range(n_subjects):
        sid = f"subj_{s}"
        split_lines.append({"subject_id": sid, "split": splits[s % len(splits)]})
        for i in range(images_per_subject):
            image_id = f"img_{s}_{i}"
            arr = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
            Image.fromarray(arr).save(crops_dir / f"{image_id}.png")
            manifest_lines.append({
                "image_id": image_id, "subject_id": sid,
                "image_path": f"images/{image_id}.png",
                "image_width": 64, "image_height": 48,
                "weight_kg": float(60 + 3 * s + i), "height_m": 1.7,
            })
    manifest = root / "curated.jsonl"
    manifest.write_text("\n".join(json.dumps(l) for l in manifest_lines) + "\n")
    split_file = root / "split.jsonl"
    split_file.write_text("\n".join(json.dumps(l) for l in split_lines) + "\n")
    return manifest, split_file, root / "crops"


def test_crop_dataset_reads_pipeline_formats(tmp_path):
    manifest, split_file, crops = build_pipeline_artifacts(tmp_path)
    train_ds = CropDataset(manifest, split_file, crops, "full_body", "train")
    val_ds = CropDataset(manifest, split_file, crops, "full_body", "val")
    assert len(train_ds) == 6 and len(val_ds) == 3
    tensor, label = train_ds[0]
    assert tensor.shape == (3, 224, 224)
    assert label.shape == (1,) and label.item() > 0


def test_train_cli_produces_runnable_artifact(tmp_path):
    manifest, split_file, crops = build_pipeline_artifacts(tmp_path)
    out = tmp_path / "run"
    code = main([
        "train",
        "--manifest", str(manifest),
        "--split-file", str(split_file),
        "--crops-dir", str(crops),
        "--out", str(out),
        "--backbone", "tiny",
        "--se-reduction", "4",
        "--epochs", "2",
        "--batch-size", "4",
        "--seed", "0",
    ])
    assert code == 0
    assert (out / "checkpoint.pth").exists()
    assert (out / "epoch_metrics.csv").exists()

    artifact = out / "model.pt2"
    module = load_artifact(artifact)
    with torch.no_grad():
        pred = module(torch.zeros(1, 3, 224, 224))
    assert pred.shape == (1, 1) and torch.isfinite(pred).all()
    meta = read_artifact_metadata(artifact)
    assert meta["backbone"] == "tiny"
    assert "best_epoch" in meta


def test_finetune_cli_roundtrip(tmp_path):
    manifest, split_file, crops = build_pipeline_artifacts(tmp_path)
    out = tmp_path / "base"
    assert main(["train", "--manifest", str(manifest), "--split-file", str(split_file),
                 "--crops-dir", str(crops), "--out", str(out),
                 "--backbone", "tiny", "--se-reduction", "4",
                 "--epochs", "1", "--batch-size", "4"]) == 0
    ft_out = tmp_path / "ft"
    assert main(["finetune", "--manifest", str(manifest), "--split-file", str(split_file),
                 "--crops-dir", str(crops), "--out", str(ft_out),
                 "--checkpoint", str(out / "checkpoint.pth"),
                 "--strategy", "unfreeze_classifier",
                 "--epochs", "1", "--batch-size", "4"]) == 0
    meta = read_artifact_metadata(ft_out / "model.pt2")
    assert meta["finetune_strategy"] == "unfreeze_classifier"
