"""Model inference over curated crops and the error-metric report.

The model artifact is a single exported-program file (torch.export, .pt2)
produced by the training component; this module only loads and runs it.
Preprocessing is fixed (direct 224x224 bilinear resize, [0,1] scaling,
per-channel normalization with the standard large-scale-pretraining
statistics) and must stay bit-compatible with the trainer's preprocessing;
a committed parity fixture enforces that.

Metric sums use math.fsum, so results are exactly invariant to record order
and to any parallel/serial reduction split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224


class EvaluationError(ValueError):
    pass


class ModelError(RuntimeError):
    """Artifact loading or inference failure with a machine-readable code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class PreprocessSpec:
    size: int = INPUT_SIZE
    channel_order: str = "rgb"
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    resize: str = "bilinear"

    def __post_init__(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise EvaluationError("mean and std need 3 channel entries")
        if any(s <= 0 for s in self.std):
            raise EvaluationError("std entries must be positive")


def preprocess(image: str | Path | Image.Image, spec: PreprocessSpec | None = None) -> np.ndarray:
    """Decode, resize and normalize an image into a (3, size, size) float32 tensor."""
    spec = spec or PreprocessSpec()
    if isinstance(image, Image.Image):
        img = image
    else:
        try:
            img = Image.open(image)
            img.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise EvaluationError(f"cannot decode image {image}: {exc}") from exc
    img = img.convert("RGB")
    img = img.resize((spec.size, spec.size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0  # HWC, [0, 1]
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    arr = (arr - mean) / std
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


class BmiModel:
    """Read-only handle around an exported regression artifact."""

    def __init__(self, path: str | Path, input_size: int = INPUT_SIZE):
        import torch

        self._torch = torch
        self.path = Path(path)
        self.input_size = input_size
        try:
            self.module = torch.export.load(str(self.path)).module()
        except Exception as exc:
            raise ModelError("corrupt_model", f"cannot load model {self.path}: {exc}") from exc

    def predict(self, tensor: np.ndarray) -> float:
        """Predicted BMI for one preprocessed (3, S, S) tensor."""
        return float(self.predict_batch(np.asarray(tensor)[None])[0])

    def predict_batch(self, tensors: np.ndarray) -> np.ndarray:
        tensors = np.asarray(tensors, dtype=np.float32)
        expected = (3, self.input_size, self.input_size)
        if tensors.ndim != 4 or tensors.shape[0] == 0 or tensors.shape[1:] != expected:
            raise ModelError(
                "shape_mismatch",
                f"expected (n, {expected[0]}, {expected[1]}, {expected[2]}), got {tensors.shape}",
            )
        torch = self._torch
        with torch.no_grad():
            out = self.module(torch.from_numpy(tensors))
        result = out.detach().cpu().numpy().reshape(-1).astype(np.float64)
        if not np.all(np.isfinite(result)):
            raise ModelError("non_finite_prediction")
        return result


def load_model(path: str | Path) -> BmiModel:
    return BmiModel(path)


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    subject_id: str
    split: str
    predicted_bmi: float
    true_bmi: float
    height_m: float

    def __post_init__(self) -> None:
        if not (self.true_bmi > 0):
            raise EvaluationError("true BMI must be positive")
        if not math.isfinite(self.predicted_bmi):
            raise EvaluationError("predicted BMI must be finite")


@dataclass(frozen=True)
class MetricsReport:
    mape_percent: float
    mae_bmi: float
    mae_kg: float
    n: int

    def to_dict(self) -> dict:
        return {
            "mape_percent": self.mape_percent,
            "mae_bmi": self.mae_bmi,
            "mae_kg": self.mae_kg,
            "n": self.n,
        }


def compute_metrics(preds: list[PredictionRecord]) -> MetricsReport:
    """MAPE (%), MAE in BMI units and MAE in kilograms.

    Weight is recovered from BMI as bmi * height², which is how the kilogram
    error of a BMI model is made comparable with weight-regression work.
    """
    if not preds:
        raise EvaluationError("cannot compute metrics over zero predictions")
    n = len(preds)
    ape = []
    ae_bmi = []
    ae_kg = []
    for p in preds:
        if not (p.true_bmi > 0):
            raise EvaluationError(f"non-positive true BMI for {p.image_id}")
        err = p.predicted_bmi - p.true_bmi
        ape.append(abs(err) / p.true_bmi)
        ae_bmi.append(abs(err))
        h2 = p.height_m * p.height_m
        ae_kg.append(abs(p.predicted_bmi * h2 - p.true_bmi * h2))
    return MetricsReport(
        mape_percent=100.0 * math.fsum(ape) / n,
        mae_bmi=math.fsum(ae_bmi) / n,
        mae_kg=math.fsum(ae_kg) / n,
        n=n,
    )
