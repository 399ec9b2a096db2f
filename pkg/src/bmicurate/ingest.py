"""Manifest parsing and validated in-memory records.

The manifest is UTF-8 JSON Lines, one image per line, so large corpora can be
streamed without loading whole files. Lines that fail validation are collected
in a reject list with a reason code; they are never silently dropped, and
``len(accepted) + len(rejected)`` always equals the number of input lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

# Fixed COCO-17 keypoint order. Index positions matter everywhere downstream
# (pose vectors, torso/face crop heuristics).
COCO_KEYPOINTS = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
NUM_KEYPOINTS = len(COCO_KEYPOINTS)

# Sanity limits for self-reported heights; values outside are rejected.
MIN_HEIGHT_M = 0.5
MAX_HEIGHT_M = 2.8


class ManifestError(Exception):
    """Unrecoverable manifest problem (unreadable file, not per-line faults)."""


class MeasurementError(ValueError):
    """Raised for non-positive or implausible weight/height."""

    reason = "invalid_measurement"


def compute_bmi(weight_kg: float, height_m: float) -> float:
    """BMI in kg/m² from weight and height.

    Raises MeasurementError for non-positive inputs.
    """
    if not (weight_kg > 0) or not (height_m > 0):
        raise MeasurementError("invalid_measurement: weight and height must be positive")
    return weight_kg / (height_m * height_m)


@dataclass(frozen=True)
class Measurement:
    """Ground-truth weight/height pair with the derived BMI label."""

    weight_kg: float
    height_m: float
    bmi: float

    def __post_init__(self) -> None:
        if not (self.weight_kg > 0):
            raise MeasurementError("invalid_measurement: weight must be positive")
        if not (MIN_HEIGHT_M < self.height_m < MAX_HEIGHT_M):
            raise MeasurementError(
                f"invalid_measurement: height {self.height_m} outside "
                f"({MIN_HEIGHT_M}, {MAX_HEIGHT_M})"
            )
        expected = self.weight_kg / (self.height_m * self.height_m)
        if abs(self.bmi - expected) > 1e-9 * max(1.0, expected):
            raise MeasurementError("invalid_measurement: bmi inconsistent with weight/height")

    @classmethod
    def from_weight_height(cls, weight_kg: float, height_m: float) -> "Measurement":
        if not (weight_kg > 0) or not (height_m > 0):
            raise MeasurementError("invalid_measurement: weight and height must be positive")
        return cls(weight_kg=weight_kg, height_m=height_m, bmi=compute_bmi(weight_kg, height_m))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned person box in pixel coordinates, top-left origin."""

    x: float
    y: float
    width: float
    height: float
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise ValueError("bounding box must have positive width and height")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must lie in [0, 1]")

    def clamped(self, image_width: float, image_height: float) -> "BoundingBox | None":
        """Intersection with the image frame, or None when empty."""
        x0 = max(self.x, 0.0)
        y0 = max(self.y, 0.0)
        x1 = min(self.x + self.width, image_width)
        y1 = min(self.y + self.height, image_height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x=x0, y=y0, width=x1 - x0, height=y1 - y0, confidence=self.confidence)


@dataclass(frozen=True)
class KeypointSet:
    """17 keypoints in COCO order, each (x, y, visibility)."""

    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if len(self.points) != NUM_KEYPOINTS:
            raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got {len(self.points)}")
        for x, y, v in self.points:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"visibility {v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        """(17, 3) float array of x, y, visibility."""
        return np.asarray(self.points, dtype=np.float64)

    def mean_visibility(self) -> float:
        return float(sum(p[2] for p in self.points) / NUM_KEYPOINTS)


@dataclass(frozen=True)
class ImageRecord:
    """One annotated image plus its measurement label."""

    image_id: str
    subject_id: str
    image_path: str
    image_width: int
    image_height: int
    measurement: Measurement
    bbox: BoundingBox | None = None
    keypoints: KeypointSet | None = None
    face_bbox: BoundingBox | None = None

    def __post_init__(self) -> None:
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class RejectedLine:
    """A manifest line that failed validation, with the reason code."""

    line_number: int
    reason: str
    raw: str


def _parse_bbox(value: object) -> BoundingBox:
    if not isinstance(value, dict):
        raise ValueError("bbox must be an object")
    return BoundingBox(
        x=float(value["x"]),
        y=float(value["y"]),
        width=float(value["w"]),
        height=float(value["h"]),
        confidence=float(value.get("confidence", 1.0)),
    )


def _parse_keypoints(value: object) -> KeypointSet:
    if not isinstance(value, list) or len(value) != NUM_KEYPOINTS:
        raise ValueError(f"keypoints must be a list of {NUM_KEYPOINTS} entries")
    points = []
    for entry in value:
        if not isinstance(entry, (list, tuple)) or len(entry) not in (2, 3):
            raise ValueError("keypoint entries must be [x, y] or [x, y, visibility]")
        x, y = float(entry[0]), float(entry[1])
        # Visibility is optional in the wire format and defaults to fully visible.
        v = float(entry[2]) if len(entry) == 3 else 1.0
        points.append((x, y, v))
    return KeypointSet(points=tuple(points))


def parse_record(obj: dict) -> ImageRecord:
    """Build a validated ImageRecord from a decoded manifest line.

    Raises ValueError (with a reason-code prefix) on any field violation.
    """
    image_id = obj.get("image_id")
    if not image_id or not isinstance(image_id, str):
        raise ValueError("missing_image_id")
    subject_id = obj.get("subject_id")
    if not subject_id or not isinstance(subject_id, str):
        raise ValueError("missing_subject_id")
    image_path = obj.get("image_path")
    if not image_path or not isinstance(image_path, str):
        raise ValueError("missing_image_path")

    try:
        width = int(obj["image_width"])
        height = int(obj["image_height"])
        if width <= 0 or height <= 0:
            raise ValueError
    except (KeyError, TypeError, ValueError):
        raise ValueError("invalid_dimensions") from None

    try:
        measurement = Measurement.from_weight_height(
            float(obj["weight_kg"]), float(obj["height_m"])
        )
    except (KeyError, TypeError, ValueError, MeasurementError):
        raise ValueError("invalid_measurement") from None

    bbox = None
    if obj.get("bbox") is not None:
        try:
            bbox = _parse_bbox(obj["bbox"])
        except (KeyError, TypeError, ValueError):
            raise ValueError("invalid_bbox") from None

    face_bbox = None
    if obj.get("face_bbox") is not None:
        try:
            face_bbox = _parse_bbox(obj["face_bbox"])
        except (KeyError, TypeError, ValueError):
            raise ValueError("invalid_face_bbox") from None

    keypoints = None
    if obj.get("keypoints") is not None:
        try:
            keypoints = _parse_keypoints(obj["keypoints"])
        except (TypeError, ValueError):
            raise ValueError("invalid_keypoints") from None

    return ImageRecord(
        image_id=image_id,
        subject_id=subject_id,
        image_path=image_path,
        image_width=width,
        image_height=height,
        measurement=measurement,
        bbox=bbox,
        keypoints=keypoints,
        face_bbox=face_bbox,
    )


def load_manifest(path: str | Path) -> tuple[list[ImageRecord], list[RejectedLine]]:
    """Parse a JSON Lines manifest into records and rejects.

    Per-line faults (bad JSON, invalid fields, duplicate image ids) land in the
    reject list; only file-level problems raise ManifestError. Output ordering
    matches input ordering.
    """
    path = Path(path)
    records: list[ImageRecord] = []
    rejects: list[RejectedLine] = []
    seen_ids: set[str] = set()
    try:
        with path.open(encoding="utf-8") as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    rejects.append(RejectedLine(line_number, "invalid_json", line))
                    continue
                if not isinstance(obj, dict):
                    rejects.append(RejectedLine(line_number, "invalid_json", line))
                    continue
                try:
                    record = parse_record(obj)
                except ValueError as exc:
                    rejects.append(RejectedLine(line_number, str(exc), line))
                    continue
                if record.image_id in seen_ids:
                    rejects.append(RejectedLine(line_number, "duplicate_image_id", line))
                    continue
                seen_ids.add(record.image_id)
                records.append(record)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return records, rejects


def record_to_dict(record: ImageRecord) -> dict:
    """Wire-format dict for one record (inverse of parse_record)."""
    obj: dict = {
        "image_id": record.image_id,
        "subject_id": record.subject_id,
        "image_path": record.image_path,
        "image_width": record.image_width,
        "image_height": record.image_height,
        "weight_kg": record.measurement.weight_kg,
        "height_m": record.measurement.height_m,
    }
    if record.bbox is not None:
        b = record.bbox
        obj["bbox"] = {"x": b.x, "y": b.y, "w": b.width, "h": b.height, "confidence": b.confidence}
    if record.face_bbox is not None:
        b = record.face_bbox
        obj["face_bbox"] = {
            "x": b.x,
            "y": b.y,
            "w": b.width,
            "h": b.height,
            "confidence": b.confidence,
        }
    if record.keypoints is not None:
        obj["keypoints"] = [[x, y, v] for x, y, v in record.keypoints.points]
    return obj


def serialize_records(records: Iterable[ImageRecord]) -> Iterator[str]:
    for record in records:
        yield json.dumps(record_to_dict(record), sort_keys=True)


def write_manifest(records: Iterable[ImageRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for line in serialize_records(records):
            fh.write(line + "\n")
