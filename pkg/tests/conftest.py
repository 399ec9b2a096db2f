from __future__ import annotations

from pathlib import Path

import pytest

from bmicurate.ingest import BoundingBox, ImageRecord, KeypointSet, Measurement

FIXTURES = Path(__file__).parent / "fixtures"


def make_keypoints(points, visibility=1.0):
    """KeypointSet from 17 (x, y) pairs, or (x, y, v) triples."""
    full = []
    for p in points:
        if len(p) == 2:
            full.append((float(p[0]), float(p[1]), visibility))
        else:
            full.append((float(p[0]), float(p[1]), float(p[2])))
    return KeypointSet(points=tuple(full))


def make_record(
    image_id="img_0",
    subject_id="subj_0",
    image_width=640,
    image_height=480,
    weight_kg=80.0,
    height_m=1.8,
    bbox=None,
    keypoints=None,
    face_bbox=None,
    image_path="images/img_0.png",
):
    return ImageRecord(
        image_id=image_id,
        subject_id=subject_id,
        image_path=image_path,
        image_width=image_width,
        image_height=image_height,
        measurement=Measurement.from_weight_height(weight_kg, height_m),
        bbox=bbox,
        keypoints=keypoints,
        face_bbox=face_bbox,
    )


def make_bbox(x=10, y=10, w=100, h=200, confidence=0.95):
    return BoundingBox(x=x, y=y, width=w, height=h, confidence=confidence)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def committed_corpus(fixtures_dir) -> Path:
    path = fixtures_dir / "corpus_1000.jsonl"
    assert path.exists(), "committed corpus fixture missing"
    return path
