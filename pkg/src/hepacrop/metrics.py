"""Scoring of prediction files against crop manifests.

Per-class F1, specificity/sensitivity, one-vs-rest AUC with class-support
weighting, Hamming loss, and Student-t 95% confidence intervals across
seeds.  Undefined values (degenerate classes, 0/0 ratios) are reported
as ``None`` rather than imputed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import CLASSES_3, CLASSES_5, CropRecord, SplitPlan, group_labels_3

CropKey = tuple[str, int, int]


class PredictionCoverageError(Exception):
    """Prediction keys do not cover (or exceed) the test-side crops."""


class ClassSpaceError(Exception):
    """Predictions and requested grouping disagree on the class space."""


class DegenerateClassWarning(UserWarning):
    """A class with no positives or no negatives was excluded from AUC."""


@dataclass(frozen=True)
class PredictionSet:
    """Per-crop class scores emitted by one trained model for one seed."""

    scores: dict[CropKey, np.ndarray]
    class_space: int  # 5 or 3
    seed: int
    model_tag: str

    def __post_init__(self):
        if self.class_space not in (5, 3):
            raise ClassSpaceError(f"class_space must be 5 or 3, got {self.class_space}")
        for key, s in self.scores.items():
            s = np.asarray(s, dtype=float)
            if s.shape != (self.class_space,):
                raise ValueError(f"{key}: expected {self.class_space} scores, got {s.shape}")
            if not np.isfinite(s).all() or s.min() < 0 or s.max() > 1:
                raise ValueError(f"{key}: scores must be finite in [0, 1], got {s}")


def write_predictions(preds: PredictionSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(preds.scores):
            pid, lid, sidx = key
            fh.write(json.dumps({
                "patient_id": pid,
                "lesion_id": lid,
                "slice_index": sidx,
                "scores": [float(v) for v in preds.scores[key]],
                "class_space": preds.class_space,
                "seed": preds.seed,
                "model_tag": preds.model_tag,
            }, sort_keys=True) + "\n")


def read_predictions(path) -> PredictionSet:
    scores: dict[CropKey, np.ndarray] = {}
    class_space = seed = model_tag = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            key = (str(d["patient_id"]), int(d["lesion_id"]), int(d["slice_index"]))
            scores[key] = np.asarray(d["scores"], dtype=float)
            class_space = int(d["class_space"])
            seed = int(d["seed"])
            model_tag = str(d["model_tag"])
    if not scores:
        raise ValueError(f"no predictions in {path}")
    return PredictionSet(scores=scores, class_space=class_space, seed=seed,
                         model_tag=model_tag)


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    """1 iff score strictly exceeds the threshold."""
    return (np.asarray(scores, dtype=float) > threshold).astype(np.int64)


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts for one class."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(y: np.ndarray, y_hat: np.ndarray) -> list[ConfusionCounts]:
    """Per-class confusion counts for binary label matrices (N, C)."""
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    out = []
    for c in range(y.shape[1]):
        t, p = y[:, c], y_hat[:, c]
        out.append(ConfusionCounts(
            tp=int(np.sum((t == 1) & (p == 1))),
            fp=int(np.sum((t == 0) & (p == 1))),
            tn=int(np.sum((t == 0) & (p == 0))),
            fn=int(np.sum((t == 1) & (p == 0))),
        ))
    return out


def f1_per_class(y: np.ndarray, y_hat: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Per-class F1 = 2tp / (2tp + fp + fn); 0/0 yields 0 with a flag.

    Returns (f1 values, degenerate flags).
    """
    f1s, flags = [], []
    for cc in confusion_counts(y, y_hat):
        denom = 2 * cc.tp + cc.fp + cc.fn
        if denom == 0:
            f1s.append(0.0)
            flags.append(True)
        else:
            f1s.append(2 * cc.tp / denom)
            flags.append(False)
    return np.asarray(f1s), np.asarray(flags)


def auc_binary(scores, labels) -> float | None:
    """Probability a positive outranks a negative, ties counting half.

    Computed exactly from average ranks.  Returns None for a degenerate
    class (all positive or all negative).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_ovr_weighted(scores: np.ndarray, labels: np.ndarray) -> float:
    """One-vs-rest AUC averaged with class-support weights.

    Degenerate classes are excluded with a DegenerateClassWarning; if
    every class is degenerate a ValueError is raised.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    num = den = 0.0
    any_ok = False
    for c in range(labels.shape[1]):
        auc = auc_binary(scores[:, c], labels[:, c])
        if auc is None:
            warnings.warn(f"class {c} is degenerate; excluded from weighted AUC",
                          DegenerateClassWarning, stacklevel=2)
            continue
        w = float(labels[:, c].sum())
        num += w * auc
        den += w
        any_ok = True
    if not any_ok:
        raise ValueError("all classes degenerate; weighted AUC undefined")
    return num / den


def hamming(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Fraction of mismatched label bits over N*L."""
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.mean(y != y_hat))


def spec_sens(counts: ConfusionCounts) -> tuple[float | None, float | None]:
    """(specificity, sensitivity); 0/0 is reported as None."""
    spec = counts.tn / (counts.tn + counts.fp) if counts.tn + counts.fp else None
    sens = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    return spec, sens


def aggregate_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% Student-t half-width over per-seed metric values."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n < 2:
        raise ValueError("need at least 2 values for a confidence interval")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    t = float(stats.t.ppf(0.975, n - 1))
    return mean, t * s / math.sqrt(n)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    half_width: float | None
    n: int
    per_seed: dict[int, float]


@dataclass(frozen=True)
class MetricsReport:
    """Scored results, aggregated over one or more seeds."""

    grouping: int
    class_names: tuple[str, ...]
    model_tag: str
    n_seeds: int
    metrics: dict[str, MetricSummary]
    degenerate: dict[int, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "grouping": self.grouping,
            "class_names": list(self.class_names),
            "model_tag": self.model_tag,
            "n_seeds": self.n_seeds,
            "degenerate": {str(k): v for k, v in sorted(self.degenerate.items())},
            "metrics": {
                name: {
                    "mean": m.mean,
                    "half_width": m.half_width,
                    "n": m.n,
                    "per_seed": {str(k): v for k, v in sorted(m.per_seed.items())},
                }
                for name, m in sorted(self.metrics.items())
            },
        }, sort_keys=True, indent=2)

    def render_table(self) -> str:
        """Plain-text table: one row per headline metric."""
        def fmt(name):
            m = self.metrics.get(name)
            if m is None:
                return "-"
            if m.half_width is None:
                return f"{m.mean:.2f}"
            return f"{m.mean:.2f}+/-{m.half_width:.2f}"

        rows = [("model", "AUC", *(f"F1 {c.upper()}" for c in self.class_names),
                 "Hamming")]
        rows.append((self.model_tag, fmt("auc_weighted"),
                     *(fmt(f"f1[{c}]") for c in self.class_names), fmt("hamming")))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in rows]
        return "\n".join(lines)


def _truth_matrix(records: Sequence[CropRecord], grouping: int) -> np.ndarray:
    if grouping == 5:
        return np.asarray([r.labels.as_tuple() for r in records], dtype=np.int64)
    if grouping == 3:
        return np.asarray([group_labels_3(r.labels) for r in records], dtype=np.int64)
    raise ClassSpaceError(f"grouping must be 5 or 3, got {grouping}")


def score_predictions(records: Sequence[CropRecord], plan: SplitPlan,
                      preds: PredictionSet, grouping: int = 5) -> MetricsReport:
    """Score one seed's predictions on the plan's test side.

    Predictions must cover exactly the test-side crop keys, with a class
    space matching the requested grouping.
    """
    if preds.class_space != grouping:
        raise ClassSpaceError(
            f"predictions are {preds.class_space}-class but grouping is {grouping}"
        )
    test_records = sorted(plan.side(records, "test"), key=lambda r: r.key)
    test_keys = {r.key for r in test_records}
    missing = test_keys - set(preds.scores)
    extra = set(preds.scores) - test_keys
    if missing:
        raise PredictionCoverageError(
            f"{len(missing)} test crops lack predictions, e.g. {sorted(missing)[:3]}"
        )
    if extra:
        raise PredictionCoverageError(
            f"{len(extra)} predictions outside the test side, e.g. {sorted(extra)[:3]}"
        )

    class_names = CLASSES_5 if grouping == 5 else CLASSES_3
    truth = _truth_matrix(test_records, grouping)
    scores = np.stack([preds.scores[r.key] for r in test_records])
    y_hat = binarize(scores)

    values: dict[str, float] = {}
    degenerate: list[str] = []

    f1s, flags = f1_per_class(truth, y_hat)
    for c, name in enumerate(class_names):
        values[f"f1[{name}]"] = float(f1s[c])
        if flags[c]:
            degenerate.append(name)
    values["f1_macro"] = float(f1s.mean())
    values["hamming"] = hamming(truth, y_hat)

    for c, (name, cc) in enumerate(zip(class_names, confusion_counts(truth, y_hat))):
        spec, sens = spec_sens(cc)
        if spec is not None:
            values[f"specificity[{name}]"] = spec
        if sens is not None:
            values[f"sensitivity[{name}]"] = sens

    for c, name in enumerate(class_names):
        auc = auc_binary(scores[:, c], truth[:, c])
        if auc is not None:
            values[f"auc[{name}]"] = auc
        elif name not in degenerate:
            degenerate.append(name)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateClassWarning)
        try:
            values["auc_weighted"] = auc_ovr_weighted(scores, truth)
        except ValueError:
            pass

    return MetricsReport(
        grouping=grouping,
        class_names=tuple(class_names),
        model_tag=preds.model_tag,
        n_seeds=1,
        metrics={k: MetricSummary(mean=v, half_width=None, n=1,
                                  per_seed={preds.seed: v})
                 for k, v in values.items()},
        degenerate={preds.seed: degenerate},
    )


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Fold single-seed reports into one with mean and 95% CI half-width.

    A metric undefined for some seed is aggregated over the seeds where
    it is defined (its ``n`` records that).
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if (r.grouping, r.model_tag) != (first.grouping, first.model_tag):
            raise ValueError("reports mix groupings or model tags")
    if len(reports) == 1:
        return first

    names = sorted({name for r in reports for name in r.metrics})
    merged: dict[str, MetricSummary] = {}
    for name in names:
        per_seed: dict[int, float] = {}
        for r in reports:
            if name in r.metrics:
                per_seed.update(r.metrics[name].per_seed)
        vals = [per_seed[s] for s in sorted(per_seed)]
        if len(vals) >= 2:
            mean, hw = aggregate_ci(vals)
        else:
            mean, hw = vals[0], None
        merged[name] = MetricSummary(mean=mean, half_width=hw, n=len(vals),
                                     per_seed=per_seed)
    degenerate: dict[int, list[str]] = {}
    for r in reports:
        degenerate.update(r.degenerate)
    return MetricsReport(
        grouping=first.grouping,
        class_names=first.class_names,
        model_tag=first.model_tag,
        n_seeds=len(reports),
        metrics=merged,
        degenerate=degenerate,
    )
