"""Dataset plumbing: curated manifest, split file and crop directories.

The trainer consumes the curation pipeline's file formats directly (JSON
Lines manifest and split file, per-perspective crop directories). Image
preprocessing here must stay bit-compatible with the inference runtime's
preprocessing; the committed parity fixture pins that down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

INPUT_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def preprocess_image(image: Image.Image | str | Path, size: int = INPUT_SIZE) -> np.ndarray:
    """(3, size, size) float32 tensor: bilinear resize, [0,1], channel norm."""
    if not isinstance(image, Image.Image):
        image = Image.open(image)
        image.load()
    image = image.convert("RGB")
    image = image.resize((size, size), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def read_split(path: str | Path) -> dict[str, str]:
    """subject_id -> split mapping from a pipeline split file."""
    mapping: dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "header" in obj:
                continue
            mapping[obj["subject_id"]] = obj["split"]
    return mapping


@dataclass
class CropSample:
    image_id: str
    subject_id: str
    path: Path
    bmi: float


class CropDataset(Dataset):
    """Crops of one perspective restricted to one split, labeled with BMI."""

    def __init__(
        self,
        manifest_path: str | Path,
        split_path: str | Path,
        crops_dir: str | Path,
        perspective: str,
        split: str,
    ):
        split_of = read_split(split_path)
        crops_dir = Path(crops_dir) / perspective
        self.samples: list[CropSample] = []
        for row in read_manifest(manifest_path):
            if split_of.get(row["subject_id"]) != split:
                continue
            crop_path = crops_dir / f"{row['image_id']}.png"
            if not crop_path.exists():
                continue
            bmi = row["weight_kg"] / (row["height_m"] ** 2)
            self.samples.append(
                CropSample(row["image_id"], row["subject_id"], crop_path, float(bmi))
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        sample = self.samples[idx]
        tensor = torch.from_numpy(preprocess_image(sample.path))
        return tensor, torch.tensor([sample.bmi], dtype=torch.float32)


class TensorPairDataset(Dataset):
    """In-memory (inputs, targets) dataset for synthetic-data tests."""

    def __init__(self, inputs: torch.Tensor, targets: torch.Tensor):
        if len(inputs) != len(targets):
            raise ValueError("inputs and targets must have matching length")
        self.inputs = inputs
        self.targets = targets

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.inputs[idx], self.targets[idx]
