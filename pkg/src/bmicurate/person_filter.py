"""Detection-confidence and person-to-background-ratio filters.

Each criterion is applied independently, so one image can fail several at
once; a record passes only when its reason set is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ingest import BoundingBox, ImageRecord

REASON_LOW_CONFIDENCE = "low_confidence"
REASON_SMALL_PERSON = "small_person"
REASON_MISSING_ANNOTATION = "missing_annotation"
REASON_OUTLIER_POSE = "outlier_pose"

FILTER_REASONS = (
    REASON_LOW_CONFIDENCE,
    REASON_SMALL_PERSON,
    REASON_MISSING_ANNOTATION,
    REASON_OUTLIER_POSE,
)


@dataclass(frozen=True)
class PersonFilterConfig:
    """Thresholds for filter steps 1 and 2.

    The defaults are conservative, fully configurable values; they are not a
    reproduction of any particular corpus run.
    """

    min_confidence: float = 0.9
    min_area_ratio: float = 0.10

    def __post_init__(self) -> None:
        if not (0.0 <= self.min_confidence <= 1.0):
            raise ValueError("min_confidence must lie in [0, 1]")
        if not (0.0 <= self.min_area_ratio <= 1.0):
            raise ValueError("min_area_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class FilterVerdict:
    """Per-image filter outcome: passed iff the reason set is empty."""

    image_id: str
    reasons: frozenset[str] = field(default_factory=frozenset)

    @property
    def passed(self) -> bool:
        return not self.reasons

    def merged(self, other: "FilterVerdict") -> "FilterVerdict":
        if other.image_id != self.image_id:
            raise ValueError("cannot merge verdicts for different images")
        return FilterVerdict(self.image_id, self.reasons | other.reasons)


def area_ratio(bbox: BoundingBox, image_width: float, image_height: float) -> float:
    """Bounding-box-to-image-area ratio in [0, 1].

    The box is clamped to the frame first so overflowing detections cannot
    produce ratios above 1; a box entirely outside the frame yields 0.
    """
    if image_width <= 0 or image_height <= 0:
        raise ValueError("image area must be positive")
    clamped = bbox.clamped(image_width, image_height)
    if clamped is None:
        return 0.0
    return (clamped.width * clamped.height) / (image_width * image_height)


def filter_record(record: ImageRecord, cfg: PersonFilterConfig) -> FilterVerdict:
    """Verdict for one record under filter steps 1 and 2."""
    if record.bbox is None:
        return FilterVerdict(record.image_id, frozenset({REASON_MISSING_ANNOTATION}))
    reasons = set()
    if record.bbox.confidence < cfg.min_confidence:
        reasons.add(REASON_LOW_CONFIDENCE)
    if area_ratio(record.bbox, record.image_width, record.image_height) < cfg.min_area_ratio:
        reasons.add(REASON_SMALL_PERSON)
    return FilterVerdict(record.image_id, frozenset(reasons))


def apply_person_filter(
    records: list[ImageRecord], cfg: PersonFilterConfig | None = None
) -> list[FilterVerdict]:
    """One verdict per record, in input order. Stateless and order-independent."""
    cfg = cfg or PersonFilterConfig()
    return [filter_record(record, cfg) for record in records]
