"""Crop manifests, study validation, label statistics, splits, balancing.

A manifest is a JSONL file with one crop record per line.  All
operations here are pure and deterministic given (input, seed); split
plans for different seeds can be computed in parallel.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np

CLASSES_5 = ("nras", "kras", "braf", "pik3ca", "other")
CLASSES_3 = ("ras", "pik3ca_braf", "other")

MAX_SLICE_SPACING_MM = 2.5
MAX_BIOPSY_DAYS = 90


class SplitError(Exception):
    """No candidate partition satisfied the test-size window."""


@dataclass(frozen=True)
class MutationLabels:
    """Five binary mutation flags for one lesion.

    A consistent record has ``other == 1`` exactly when all four
    mutation flags are 0, and at least one flag set; consistency is
    checked by :func:`validate_study`, not enforced here, so invalid
    manifests can still be loaded and reported on.
    """

    nras: int = 0
    kras: int = 0
    braf: int = 0
    pik3ca: int = 0
    other: int = 0

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.nras, self.kras, self.braf, self.pik3ca, self.other)

    def positives(self) -> tuple[str, ...]:
        return tuple(c for c, v in zip(CLASSES_5, self.as_tuple()) if v)

    def is_consistent(self) -> bool:
        mutated = self.nras or self.kras or self.braf or self.pik3ca
        return bool(self.other) != bool(mutated) and any(self.as_tuple())

    def to_dict(self) -> dict:
        return {c: int(v) for c, v in zip(CLASSES_5, self.as_tuple())}

    @classmethod
    def from_dict(cls, d: dict) -> "MutationLabels":
        return cls(**{c: int(d[c]) for c in CLASSES_5})


def group_labels_3(labels: MutationLabels) -> tuple[int, int, int]:
    """Collapse the five flags into (ras, pik3ca_braf, other)."""
    return (
        int(labels.nras or labels.kras),
        int(labels.pik3ca or labels.braf),
        int(labels.other),
    )


@dataclass(frozen=True)
class CropRecord:
    """One manifest line: a single emitted lesion crop."""

    patient_id: str
    lesion_id: int
    slice_index: int
    image_path: str
    resolution: int
    labels: MutationLabels
    slice_spacing_mm: float
    days_ct_to_biopsy: int

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.patient_id, self.lesion_id, self.slice_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = self.labels.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CropRecord":
        return cls(
            patient_id=str(d["patient_id"]),
            lesion_id=int(d["lesion_id"]),
            slice_index=int(d["slice_index"]),
            image_path=str(d["image_path"]),
            resolution=int(d["resolution"]),
            labels=MutationLabels.from_dict(d["labels"]),
            slice_spacing_mm=float(d["slice_spacing_mm"]),
            days_ct_to_biopsy=int(d["days_ct_to_biopsy"]),
        )


def write_manifest(records: Iterable[CropRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path) -> list[CropRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(CropRecord.from_dict(json.loads(line)))
    return records


@dataclass(frozen=True)
class Violation:
    """One study-criteria violation found in a manifest."""

    index: int
    patient_id: str
    lesion_id: int
    slice_index: int
    kind: str       # "spacing" | "biopsy_delay" | "label_consistency"
    detail: str


def validate_study(records: Sequence[CropRecord]) -> list[Violation]:
    """Check manifest records against the study inclusion criteria.

    Boundaries are inclusive: spacing up to 2.5 mm and a biopsy within
    90 days are accepted.  Never mutates or raises; returns the list of
    violations (possibly empty).
    """
    violations = []
    for i, rec in enumerate(records):
        where = dict(index=i, patient_id=rec.patient_id,
                     lesion_id=rec.lesion_id, slice_index=rec.slice_index)
        if rec.slice_spacing_mm > MAX_SLICE_SPACING_MM:
            violations.append(Violation(
                kind="spacing",
                detail=f"slice spacing {rec.slice_spacing_mm} mm exceeds {MAX_SLICE_SPACING_MM} mm",
                **where,
            ))
        if rec.days_ct_to_biopsy > MAX_BIOPSY_DAYS:
            violations.append(Violation(
                kind="biopsy_delay",
                detail=f"biopsy {rec.days_ct_to_biopsy} days after CT exceeds {MAX_BIOPSY_DAYS}",
                **where,
            ))
        if not rec.labels.is_consistent():
            violations.append(Violation(
                kind="label_consistency",
                detail=f"inconsistent flags {rec.labels.to_dict()}",
                **where,
            ))
    return violations


def lesion_labels(records: Iterable[CropRecord]) -> list[MutationLabels]:
    """Deduplicate crop records to one label set per (patient, lesion)."""
    seen: dict[tuple[str, int], MutationLabels] = {}
    for rec in records:
        seen.setdefault((rec.patient_id, rec.lesion_id), rec.labels)
    return [seen[k] for k in sorted(seen)]


def label_correlation(labels: Sequence[MutationLabels]) -> np.ndarray:
    """Phi coefficients between the five label columns.

    Returns a symmetric 5x5 matrix with unit diagonal; columns with zero
    variance yield NaN entries (including their diagonal).
    """
    if len(labels) < 2:
        raise ValueError("need at least 2 lesions to correlate labels")
    cols = np.array([l.as_tuple() for l in labels], dtype=np.int64)
    n = len(labels)
    pos = cols.sum(axis=0)
    variable = (pos > 0) & (pos < n)

    out = np.full((5, 5), np.nan)
    for i in range(5):
        for j in range(i, 5):
            if not (variable[i] and variable[j]):
                continue
            if i == j:
                out[i, j] = 1.0
                continue
            a, b = cols[:, i], cols[:, j]
            n11 = int(np.sum((a == 1) & (b == 1)))
            n10 = int(np.sum((a == 1) & (b == 0)))
            n01 = int(np.sum((a == 0) & (b == 1)))
            n00 = int(np.sum((a == 0) & (b == 0)))
            denom = math.sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00))
            phi = (n11 * n00 - n10 * n01) / denom
            out[i, j] = out[j, i] = phi
    return out


def class_distribution(records: Sequence[CropRecord]) -> dict[str, dict[str, float]]:
    """Per-class percentages at patient, lesion and image granularity.

    A patient/lesion counts toward a class if any of its records carries
    the flag; multi-label records count in several columns, so columns
    need not sum to 100.  Percentages are computed as 100*count/total.
    """
    if not records:
        raise ValueError("empty manifest")
    patients: dict[str, set[str]] = {c: set() for c in CLASSES_5}
    lesions: dict[str, set[tuple[str, int]]] = {c: set() for c in CLASSES_5}
    images = {c: 0 for c in CLASSES_5}
    all_patients, all_lesions = set(), set()
    for rec in records:
        all_patients.add(rec.patient_id)
        all_lesions.add((rec.patient_id, rec.lesion_id))
        for c in rec.labels.positives():
            patients[c].add(rec.patient_id)
            lesions[c].add((rec.patient_id, rec.lesion_id))
            images[c] += 1
    return {
        c: {
            "patients": 100.0 * len(patients[c]) / len(all_patients),
            "lesions": 100.0 * len(lesions[c]) / len(all_lesions),
            "images": 100.0 * images[c] / len(records),
        }
        for c in CLASSES_5
    }


@dataclass(frozen=True)
class SplitPlan:
    """Patient-disjoint train/test assignment for one seed."""

    seed: int
    assignments: dict[str, str]  # patient_id -> "train" | "test"
    achieved_train_fraction: float
    label_divergence: float

    @property
    def train_patients(self) -> list[str]:
        return sorted(p for p, s in self.assignments.items() if s == "train")

    @property
    def test_patients(self) -> list[str]:
        return sorted(p for p, s in self.assignments.items() if s == "test")

    def side(self, records: Iterable[CropRecord], which: str) -> list[CropRecord]:
        return [r for r in records if self.assignments[r.patient_id] == which]

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "train": self.train_patients,
                "test": self.test_patients,
                "stats": {
                    "achieved_train_fraction": self.achieved_train_fraction,
                    "label_divergence": self.label_divergence,
                },
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        assignments = {p: "train" for p in d["train"]}
        assignments.update({p: "test" for p in d["test"]})
        return cls(
            seed=int(d["seed"]),
            assignments=assignments,
            achieved_train_fraction=float(d["stats"]["achieved_train_fraction"]),
            label_divergence=float(d["stats"]["label_divergence"]),
        )


def _per_class_image_fractions(records: Sequence[CropRecord]) -> np.ndarray:
    counts = np.zeros(5)
    for rec in records:
        counts += np.asarray(rec.labels.as_tuple())
    return counts / len(records)


def split_candidates(records: Sequence[CropRecord], seed: int,
                     train_fraction: float, n_candidates: int
                     ) -> list[frozenset[str]]:
    """The deterministic candidate test-patient sets examined by make_split.

    Candidate i shuffles the sorted patient list with rng [seed, i] and
    walks it, moving a patient to the test side while that strictly
    shrinks the gap to the target image count; it stops at the first
    patient that would not improve.
    """
    images_per_patient: dict[str, int] = {}
    for rec in records:
        images_per_patient[rec.patient_id] = images_per_patient.get(rec.patient_id, 0) + 1
    patients = sorted(images_per_patient)
    total = len(records)
    target_images = (1.0 - train_fraction) * total

    candidates = []
    for i in range(n_candidates):
        rng = np.random.default_rng([seed, i])
        order = [patients[j] for j in rng.permutation(len(patients))]
        test, count = [], 0
        for p in order:
            grown = count + images_per_patient[p]
            if abs(grown - target_images) >= abs(count - target_images):
                break
            test.append(p)
            count = grown
        candidates.append(frozenset(test))
    return candidates


def make_split(records: Sequence[CropRecord], seed: int,
               train_fraction: float = 0.9, candidates: int = 1000) -> SplitPlan:
    """Pick a patient-disjoint split with consistent label distribution.

    Among the seeded candidate partitions whose test image fraction lies
    within +/-5 percentage points of (1 - train_fraction), returns the
    one minimizing the total-variation distance between train and test
    per-class image fractions (0.5 * L1 over the five class marginals);
    ties break toward the earlier candidate.
    """
    patient_ids = {r.patient_id for r in records}
    if len(patient_ids) < 2:
        raise ValueError("need at least 2 patients to split")
    if candidates < 1:
        raise ValueError("need at least 1 candidate")

    total = len(records)
    target = 1.0 - train_fraction
    best = None
    closest = None
    for idx, test_set in enumerate(split_candidates(records, seed, train_fraction, candidates)):
        test = [r for r in records if r.patient_id in test_set]
        frac = len(test) / total
        if closest is None or abs(frac - target) < abs(closest - target):
            closest = frac
        if abs(frac - target) > 0.05 + 1e-12:
            continue
        train = [r for r in records if r.patient_id not in test_set]
        if not train or not test:
            continue
        tv = 0.5 * float(np.abs(
            _per_class_image_fractions(train) - _per_class_image_fractions(test)
        ).sum())
        if best is None or tv < best[0]:
            best = (tv, idx, test_set, 1.0 - frac)

    if best is None:
        raise SplitError(
            f"no candidate hit test fraction {target:.3f}+/-0.05; closest was {closest:.3f}"
        )
    tv, _, test_set, train_frac = best
    assignments = {p: ("test" if p in test_set else "train") for p in patient_ids}
    return SplitPlan(
        seed=seed,
        assignments=assignments,
        achieved_train_fraction=train_frac,
        label_divergence=tv,
    )


@dataclass(frozen=True)
class BalancedSample:
    """Train records re/sub-sampled so every balancing group has size T."""

    records: list[CropRecord]
    target_size: int


def balancing_key(labels: MutationLabels, class_counts: dict[str, int]) -> str:
    """A record's rarest positive class, ties broken by fixed class order."""
    positives = labels.positives()
    if not positives:
        raise ValueError("record has no positive flag")
    return min(positives, key=lambda c: (class_counts[c], CLASSES_5.index(c)))


def balance_train(records: Sequence[CropRecord], seed: int) -> BalancedSample:
    """Equalize balancing-group sizes to the median group size T.

    Each record's group is its rarest positive class under the global
    train counts.  Groups above T are subsampled without replacement
    (original order kept); groups below T keep every record once and
    add seeded draws with replacement.  T is the integer lower median
    of the group sizes.
    """
    if not records:
        raise ValueError("empty train set")
    counts = {c: 0 for c in CLASSES_5}
    for rec in records:
        for c in rec.labels.positives():
            counts[c] += 1

    groups: dict[str, list[CropRecord]] = {c: [] for c in CLASSES_5}
    for rec in records:
        groups[balancing_key(rec.labels, counts)].append(rec)

    sizes = [len(g) for g in groups.values() if g]
    target = int(statistics.median_low(sizes))

    rng = np.random.default_rng(seed)
    out: list[CropRecord] = []
    for c in CLASSES_5:
        g = groups[c]
        if not g:
            continue
        if len(g) > target:
            keep = np.sort(rng.choice(len(g), size=target, replace=False))
            out.extend(g[i] for i in keep)
        elif len(g) < target:
            out.extend(g)
            extra = rng.integers(0, len(g), size=target - len(g))
            out.extend(g[i] for i in extra)
        else:
            out.extend(g)
    return BalancedSample(records=out, target_size=target)
