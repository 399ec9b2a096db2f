import numpy as np
import pytest

from bmicurate.ingest import BoundingBox
from bmicurate.person_filter import (
    PersonFilterConfig,
    apply_person_filter,
    area_ratio,
    filter_record,
)
from bmicurate.pipeline import filter_accounting

from .conftest import make_bbox, make_record
from .corpus import generate_corpus
from bmicurate.ingest import parse_record


class TestAreaRatio:
    def test_exact_arithmetic(self):
        assert area_ratio(make_bbox(0, 0, 100, 200), 1000, 1000) == 0.02

    def test_full_image_box(self):
        assert area_ratio(make_bbox(0, 0, 640, 480), 640, 480) == 1.0

    def test_overflowing_box_clamps_to_full_frame(self):
        bbox = BoundingBox(x=-50, y=-50, width=740, height=580, confidence=0.9)
        assert area_ratio(bbox, 640, 480) == 1.0

    def test_zero_area_image_raises(self):
        with pytest.raises(ValueError):
            area_ratio(make_bbox(), 0, 480)

    def test_box_outside_frame_is_zero(self):
        assert area_ratio(make_bbox(x=700, y=10), 640, 480) == 0.0


class TestApplyPersonFilter:
    def test_passing_record(self):
        record = make_record(bbox=make_bbox(0, 0, 500, 480, confidence=0.95))
        verdict = filter_record(record, PersonFilterConfig())
        assert verdict.passed and verdict.reasons == frozenset()

    def test_small_person_only(self):
        record = make_record(bbox=make_bbox(0, 0, 80, 80, confidence=0.95))  # ratio 0.0208
        verdict = filter_record(record, PersonFilterConfig())
        assert verdict.reasons == {"small_person"}

    def test_both_reasons_cooccur(self):
        record = make_record(bbox=make_bbox(0, 0, 80, 80, confidence=0.5))
        verdict = filter_record(record, PersonFilterConfig())
        assert verdict.reasons == {"small_person", "low_confidence"}

    def test_missing_bbox(self):
        verdict = filter_record(make_record(), PersonFilterConfig())
        assert verdict.reasons == {"missing_annotation"}

    def test_threshold_is_strict_less_than(self):
        record = make_record(bbox=make_bbox(0, 0, 640, 480, confidence=0.9))
        assert filter_record(record, PersonFilterConfig()).passed

    def test_planted_corpus_counts(self):
        # 1,000 records with 50 tiny boxes and 20 low-confidence boxes,
        # 5 overlapping: 65 distinct failures.
        rows, planted = generate_corpus(
            tiny_bbox=50, low_confidence=20, outlier_pose=0,
            tiny_and_lowconf_overlap=5, tiny_and_pose_overlap=0, seed=99,
        )
        records = [parse_record(obj) for obj in rows]
        verdicts = apply_person_filter(records, PersonFilterConfig())
        failing = [v for v in verdicts if not v.passed]
        assert len(failing) == 65
        report = filter_accounting(verdicts)
        assert report.per_reason["small_person"] == 50
        assert report.per_reason["low_confidence"] == 20
        assert report.removed_total == 65


@pytest.fixture(scope="module")
def property_records():
    rows, _ = generate_corpus(n_records=300, n_subjects=60, outlier_pose=0, seed=11,
                              tiny_and_pose_overlap=0)
    return [parse_record(obj) for obj in rows]


class TestFilterProperties:

    def test_monotonicity(self, property_records):
        records = property_records
        strict = PersonFilterConfig(min_confidence=0.9, min_area_ratio=0.10)
        loose = PersonFilterConfig(min_confidence=0.5, min_area_ratio=0.02)
        strict_pass = {v.image_id for v in apply_person_filter(records, strict) if v.passed}
        loose_pass = {v.image_id for v in apply_person_filter(records, loose) if v.passed}
        assert strict_pass <= loose_pass

    def test_independence_of_criteria(self, property_records):
        records = property_records
        base = apply_person_filter(records, PersonFilterConfig(0.9, 0.10))
        other = apply_person_filter(records, PersonFilterConfig(0.9, 0.50))
        lc_base = {v.image_id for v in base if "low_confidence" in v.reasons}
        lc_other = {v.image_id for v in other if "low_confidence" in v.reasons}
        assert lc_base == lc_other

        conf_swing = apply_person_filter(records, PersonFilterConfig(0.99, 0.10))
        small_base = {v.image_id for v in base if "small_person" in v.reasons}
        small_other = {v.image_id for v in conf_swing if "small_person" in v.reasons}
        assert small_base == small_other

    def test_union_accounting_bound(self, property_records):
        records = property_records
        verdicts = apply_person_filter(records, PersonFilterConfig())
        report = filter_accounting(verdicts)
        reason_sum = sum(report.per_reason.values())
        assert report.removed_total <= reason_sum
        overlap_mass = sum(report.pairwise_overlap.values())
        if overlap_mass == 0:
            assert report.removed_total == reason_sum

    def test_passed_iff_reasons_empty(self, property_records):
        records = property_records
        for verdict in apply_person_filter(records, PersonFilterConfig()):
            assert verdict.passed == (len(verdict.reasons) == 0)


class TestConfigValidation:
    def test_bad_confidence(self):
        with pytest.raises(ValueError):
            PersonFilterConfig(min_confidence=1.5)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            PersonFilterConfig(min_area_ratio=-0.1)
