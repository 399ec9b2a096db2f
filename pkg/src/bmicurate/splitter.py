"""Subject-disjoint train/val/test splitting by greedy largest-gap assignment.

Subjects (never individual images) are shuffled with a seeded generator and
assigned one by one to whichever split currently has the largest gap between
its target and actual image count. The same subject partition is reused for
every crop perspective, so test subjects stay identical across comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import ImageRecord

SPLITS = ("train", "val", "test")
GENERATOR_NAME = "numpy-pcg64"


class SplitError(ValueError):
    pass


@dataclass
class SplitAssignment:
    """Subject-to-split mapping plus the bookkeeping that produced it."""

    assignment: dict[str, str]
    targets: dict[str, float]
    actual: dict[str, int]
    seed: int
    ratios: tuple[float, float, float]
    generator: str = GENERATOR_NAME

    def split_of(self, subject_id: str) -> str:
        return self.assignment[subject_id]


@dataclass
class SplitReport:
    """Outcome of verifying an assignment against a record set."""

    overlap_count: int
    violations: dict[str, list[str]]  # subject -> splits it appears in (>1)
    image_counts: dict[str, int]
    image_fractions: dict[str, float]

    @property
    def ok(self) -> bool:
        return self.overlap_count == 0


def greedy_split(
    records: list[ImageRecord],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 7,
) -> SplitAssignment:
    """Deterministic subject-disjoint split.

    Subjects are canonically sorted before the seeded shuffle, so the result
    depends only on the subject grouping and the seed, never on record order.
    Gap ties break in the fixed order train > val > test.
    """
    if not records:
        raise SplitError("cannot split an empty record list")
    if len(ratios) != len(SPLITS):
        raise SplitError(f"expected {len(SPLITS)} ratios")
    if any(r < 0 for r in ratios):
        raise SplitError("ratios must be nonnegative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")

    images_per_subject: dict[str, int] = {}
    for record in records:
        images_per_subject[record.subject_id] = images_per_subject.get(record.subject_id, 0) + 1

    subjects = sorted(images_per_subject)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))

    total = len(records)
    targets = {name: ratio * total for name, ratio in zip(SPLITS, ratios)}
    actual = {name: 0 for name in SPLITS}
    assignment: dict[str, str] = {}
    for idx in order:
        subject = subjects[idx]
        best = max(SPLITS, key=lambda name: (targets[name] - actual[name], -SPLITS.index(name)))
        assignment[subject] = best
        actual[best] += images_per_subject[subject]

    return SplitAssignment(
        assignment=assignment,
        targets=targets,
        actual=actual,
        seed=seed,
        ratios=tuple(ratios),
    )


def verify_disjoint(
    assignment: SplitAssignment | list[tuple[str, str]],
    records: list[ImageRecord],
) -> SplitReport:
    """Check subject disjointness and report per-split image fractions.

    Accepts either a SplitAssignment or raw (subject_id, split) pairs as read
    from a split file, where duplicates are representable. Raises SplitError
    when a subject present in the records has no assignment at all.
    """
    if isinstance(assignment, SplitAssignment):
        pairs = list(assignment.assignment.items())
    else:
        pairs = list(assignment)

    splits_of: dict[str, set[str]] = {}
    for subject, split in pairs:
        if split not in SPLITS:
            raise SplitError(f"unknown split label {split!r}")
        splits_of.setdefault(subject, set()).add(split)

    uncovered = sorted({r.subject_id for r in records} - set(splits_of))
    if uncovered:
        raise SplitError(f"subjects without an assignment: {uncovered[:5]}")

    violations = {s: sorted(v) for s, v in splits_of.items() if len(v) > 1}

    image_counts = {name: 0 for name in SPLITS}
    for record in records:
        for split in splits_of[record.subject_id]:
            image_counts[split] += 1
    total = len(records) or 1
    fractions = {name: image_counts[name] / total for name in SPLITS}

    return SplitReport(
        overlap_count=len(violations),
        violations=violations,
        image_counts=image_counts,
        image_fractions=fractions,
    )


def write_split(assignment: SplitAssignment, path: str | Path) -> None:
    """JSON Lines split file: a header record, then one line per subject."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "header": {
                "seed": assignment.seed,
                "generator": assignment.generator,
                "ratios": list(assignment.ratios),
                "targets": assignment.targets,
                "actual": assignment.actual,
            }
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for subject in sorted(assignment.assignment):
            fh.write(
                json.dumps({"subject_id": subject, "split": assignment.assignment[subject]})
                + "\n"
            )


def read_split(path: str | Path) -> tuple[dict, list[tuple[str, str]]]:
    """Read a split file back as (header, pairs). Pairs keep duplicates."""
    header: dict = {}
    pairs: list[tuple[str, str]] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                pairs.append((obj["subject_id"], obj["split"]))
    return header, pairs
