"""Perspective crop geometry and optional crop-file extraction.

Three perspectives are supported: full_body (person box pass-through),
torso_up (shoulder/eye heuristic with a 50% total margin, i.e. 25% of the
base extent added per side) and face (bounding rect of visible head keypoints
expanded by 60% total). Rects are computed in float pixels and only rounded
when pixels are actually cut: floor for the origin, ceil for the extent, so
annotated content is never lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .ingest import BoundingBox, ImageRecord, KeypointSet

FULL_BODY = "full_body"
TORSO_UP = "torso_up"
FACE = "face"
PERSPECTIVES = (FULL_BODY, TORSO_UP, FACE)

# Keypoint indices in COCO order.
_LEFT_EYE, _RIGHT_EYE = 1, 2
_LEFT_SHOULDER, _RIGHT_SHOULDER = 5, 6
_HEAD_INDICES = (0, 1, 2, 3, 4)  # nose, eyes, ears

MIN_KEYPOINT_VISIBILITY = 0.3
TORSO_MARGIN_PER_SIDE = 0.25
FACE_MARGIN_PER_SIDE = 0.30


class CropError(ValueError):
    """Crop failure with a machine-readable code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class CropRect:
    """Float-pixel crop rectangle, already clamped inside its image."""

    x: float
    y: float
    width: float
    height: float
    perspective: str

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise CropError("degenerate_crop", "crop rect must have positive area")

    def to_pixels(self, image_width: int, image_height: int) -> tuple[int, int, int, int]:
        """Integer (x0, y0, x1, y1): floor origin, ceil extent, clamped."""
        x0 = max(0, math.floor(self.x))
        y0 = max(0, math.floor(self.y))
        x1 = min(image_width, math.ceil(self.x + self.width))
        y1 = min(image_height, math.ceil(self.y + self.height))
        return x0, y0, x1, y1


def _clamped_rect(
    x0: float, y0: float, x1: float, y1: float,
    image_width: float, image_height: float, perspective: str,
) -> CropRect:
    cx0 = max(x0, 0.0)
    cy0 = max(y0, 0.0)
    cx1 = min(x1, float(image_width))
    cy1 = min(y1, float(image_height))
    if cx1 <= cx0 or cy1 <= cy0:
        raise CropError("degenerate_crop", "crop lies outside the image")
    return CropRect(x=cx0, y=cy0, width=cx1 - cx0, height=cy1 - cy0, perspective=perspective)


def torso_crop(
    keypoints: KeypointSet, image_width: int, image_height: int
) -> CropRect:
    """Torso-up rect: width spans the shoulders, height runs from the highest
    eye down to the lowest shoulder, expanded by 25% of the base width/height
    on each side (50% total per dimension) and clamped to the frame.
    """
    pts = keypoints.points
    required = (_LEFT_SHOULDER, _RIGHT_SHOULDER, _LEFT_EYE, _RIGHT_EYE)
    if any(pts[i][2] < MIN_KEYPOINT_VISIBILITY for i in required):
        raise CropError("missing_keypoints", "shoulders and eyes must be visible")

    shoulder_x = (pts[_LEFT_SHOULDER][0], pts[_RIGHT_SHOULDER][0])
    shoulder_y = (pts[_LEFT_SHOULDER][1], pts[_RIGHT_SHOULDER][1])
    eye_y = (pts[_LEFT_EYE][1], pts[_RIGHT_EYE][1])

    x0, x1 = min(shoulder_x), max(shoulder_x)
    y0, y1 = min(eye_y), max(shoulder_y)
    if x1 <= x0 or y1 <= y0:
        raise CropError("degenerate_crop", "torso base rect has no area")

    mx = TORSO_MARGIN_PER_SIDE * (x1 - x0)
    my = TORSO_MARGIN_PER_SIDE * (y1 - y0)
    return _clamped_rect(x0 - mx, y0 - my, x1 + mx, y1 + my,
                         image_width, image_height, TORSO_UP)


def face_crop(
    keypoints: KeypointSet, image_width: int, image_height: int
) -> CropRect:
    """Face rect from head keypoints: bounding rect of the visible ones among
    nose/eyes/ears, expanded by 30% per side (60% total per dimension).
    """
    pts = keypoints.points
    visible = [pts[i] for i in _HEAD_INDICES if pts[i][2] >= MIN_KEYPOINT_VISIBILITY]
    if len(visible) < 3:
        raise CropError("insufficient_head_keypoints",
                        f"need at least 3 visible head keypoints, got {len(visible)}")

    xs = [p[0] for p in visible]
    ys = [p[1] for p in visible]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 <= x0 or y1 <= y0:
        raise CropError("degenerate_crop", "head keypoints span no area")

    mx = FACE_MARGIN_PER_SIDE * (x1 - x0)
    my = FACE_MARGIN_PER_SIDE * (y1 - y0)
    return _clamped_rect(x0 - mx, y0 - my, x1 + mx, y1 + my,
                         image_width, image_height, FACE)


def full_body_crop(
    bbox: BoundingBox | None, image_width: int, image_height: int
) -> CropRect:
    """Person box clamped to the frame."""
    if bbox is None:
        raise CropError("missing_bbox")
    return _clamped_rect(bbox.x, bbox.y, bbox.x + bbox.width, bbox.y + bbox.height,
                         image_width, image_height, FULL_BODY)


def crop_record(record: ImageRecord, perspective: str) -> CropRect:
    """Perspective dispatch for one record.

    An explicit face_bbox on the record overrides the keypoint-derived face
    heuristic, which keeps an external face detector expressible upstream.
    """
    if perspective == FULL_BODY:
        return full_body_crop(record.bbox, record.image_width, record.image_height)
    if perspective == TORSO_UP:
        if record.keypoints is None:
            raise CropError("missing_keypoints")
        return torso_crop(record.keypoints, record.image_width, record.image_height)
    if perspective == FACE:
        if record.face_bbox is not None:
            rect = _clamped_rect(
                record.face_bbox.x,
                record.face_bbox.y,
                record.face_bbox.x + record.face_bbox.width,
                record.face_bbox.y + record.face_bbox.height,
                record.image_width,
                record.image_height,
                FACE,
            )
            return rect
        if record.keypoints is None:
            raise CropError("missing_keypoints")
        return face_crop(record.keypoints, record.image_width, record.image_height)
    raise CropError("unknown_perspective", f"unknown perspective {perspective!r}")


def apply_crop(
    image_path: str | Path,
    rect: CropRect,
    output_path: str | Path,
    expected_size: tuple[int, int] | None = None,
) -> tuple[int, int]:
    """Write the pixel-exact sub-image selected by ``rect``.

    ``expected_size`` is the (width, height) the manifest claims; a mismatch
    with the decoded file aborts rather than producing a silently wrong crop.
    Returns the written (width, height).
    """
    try:
        image = Image.open(image_path)
        image.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise CropError("undecodable_image", f"cannot decode {image_path}: {exc}") from exc

    if expected_size is not None and image.size != tuple(expected_size):
        raise CropError(
            "dimension_mismatch",
            f"{image_path}: manifest says {expected_size}, file is {image.size}",
        )

    x0, y0, x1, y1 = rect.to_pixels(image.size[0], image.size[1])
    cropped = image.crop((x0, y0, x1, y1))
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    cropped.save(output_path)
    return cropped.size
