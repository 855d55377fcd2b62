"""Accuracy tables and plot-data exports for detector evaluation runs.

Three tables: global accuracy split by fault severity, global detection
rate split by active-axis combination (misaligned samples only, counted
correct when the global head fires), and per-axis confusion metrics
from the axis heads. Percentages are rounded half-up to two decimals
from the integer counts, so every printed number re-derives exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import Verdict
from .features import DEFAULT_N_BINS, cross_values, projected_angles_deg
from .geometry import (
    COMBINATION_KEYS,
    RotationError,
    SeverityBucket,
    classify_severity,
    combination_axes,
)
from .sceneflow import FlowField

BUCKET_LABELS = {
    SeverityBucket.ALIGNED: "Aligned",
    SeverityBucket.HARD: "Hard",
    SeverityBucket.MEDIUM: "Medium",
    SeverityBucket.EASY: "Easy",
}
AXIS_NAMES = ("roll", "pitch", "yaw")
_KEY_BY_AXES = {combination_axes(k): k for k in COMBINATION_KEYS}


def percent(correct: int, incorrect: int) -> float:
    """100 * correct / (correct + incorrect), half-up to two decimals."""
    total = correct + incorrect
    if total <= 0:
        raise ValueError("percent needs a positive total")
    value = Decimal(100 * correct) / Decimal(total)
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated sample: ground truth next to the detector's verdict."""

    sample_id: int
    true_misaligned: bool
    true_axes: tuple[bool, bool, bool]
    verdict: Verdict
    error: RotationError
    bucket: SeverityBucket

    def __post_init__(self) -> None:
        if self.bucket != classify_severity(self.error):
            raise ValueError(
                f"bucket {self.bucket.name} does not match the error's severity"
            )
        if self.true_axes != self.error.active:
            raise ValueError("true_axes must match the error's active axes")
        if self.true_misaligned != any(self.true_axes):
            raise ValueError("true_misaligned must be the OR of true_axes")

    @property
    def global_correct(self) -> bool:
        return self.verdict.misaligned == self.true_misaligned


@dataclass(frozen=True)
class BucketRow:
    label: str
    correct: int
    incorrect: int
    percent: float | None  # None when the bucket has no records


@dataclass(frozen=True)
class CombinationRow:
    label: str
    correct: int
    incorrect: int
    percent: float | None
    share: float  # this combination's share of all misaligned records, in percent
    absent: bool


@dataclass(frozen=True)
class AxisRow:
    axis: str
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float | None  # None when nothing was predicted positive
    recall: float | None  # None when no true positives exist


@dataclass(frozen=True)
class Report:
    buckets: tuple[BucketRow, ...]
    combinations: tuple[CombinationRow, ...]
    axes: tuple[AxisRow, ...]
    n_records: int
    overall_percent: float


def bucket_table(records: Sequence[EvalRecord]) -> tuple[BucketRow, ...]:
    """Global-head accuracy per severity bucket plus an exact Total row."""
    if not records:
        raise ValueError("no records")
    rows = []
    total_c = total_i = 0
    for bucket in (
        SeverityBucket.ALIGNED,
        SeverityBucket.HARD,
        SeverityBucket.MEDIUM,
        SeverityBucket.EASY,
    ):
        members = [r for r in records if r.bucket == bucket]
        c = sum(r.global_correct for r in members)
        i = len(members) - c
        total_c += c
        total_i += i
        rows.append(
            BucketRow(BUCKET_LABELS[bucket], c, i, percent(c, i) if members else None)
        )
    rows.append(BucketRow("Total", total_c, total_i, percent(total_c, total_i)))
    return tuple(rows)


def combination_table(records: Sequence[EvalRecord]) -> tuple[CombinationRow, ...]:
    """Global-head detection rate per active-axis combination.

    Takes misaligned records only; a correct row entry means the global
    head fired, regardless of which axes it blamed.
    """
    if not records:
        raise ValueError("no records")
    if any(not r.true_misaligned for r in records):
        raise ValueError("combination table takes misaligned records only")
    rows = []
    for key in COMBINATION_KEYS:
        axes = combination_axes(key)
        members = [r for r in records if r.true_axes == axes]
        c = sum(r.verdict.misaligned for r in members)
        i = len(members) - c
        rows.append(
            CombinationRow(
                label=key,
                correct=c,
                incorrect=i,
                percent=percent(c, i) if members else None,
                share=percent(len(members), len(records) - len(members)),
                absent=not members,
            )
        )
    return tuple(rows)


def axis_metrics(records: Sequence[EvalRecord]) -> tuple[AxisRow, ...]:
    """Confusion metrics of each axis head against the true active axes."""
    if not records:
        raise ValueError("no records")
    rows = []
    for k, axis in enumerate(AXIS_NAMES):
        tp = fp = fn = tn = 0
        for r in records:
            predicted = r.verdict.axes[k]
            actual = r.true_axes[k]
            if predicted and actual:
                tp += 1
            elif predicted and not actual:
                fp += 1
            elif actual:
                fn += 1
            else:
                tn += 1
        rows.append(
            AxisRow(
                axis=axis,
                tp=tp,
                fp=fp,
                fn=fn,
                tn=tn,
                accuracy=percent(tp + tn, fp + fn),
                precision=percent(tp, fp) if tp + fp else None,
                recall=percent(tp, fn) if tp + fn else None,
            )
        )
    return tuple(rows)


def build_report(records: Sequence[EvalRecord]) -> Report:
    """All three tables over one record set; order of records is irrelevant."""
    buckets = bucket_table(records)
    misaligned = [r for r in records if r.true_misaligned]
    combos = (
        combination_table(misaligned)
        if misaligned
        else tuple(
            CombinationRow(k, 0, 0, None, 0.0, True) for k in COMBINATION_KEYS
        )
    )
    return Report(
        buckets=buckets,
        combinations=combos,
        axes=axis_metrics(records),
        n_records=len(records),
        overall_percent=buckets[-1].percent,
    )


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def render_text(report: Report) -> str:
    """Fixed-width table rendering; equal reports give equal bytes."""
    lines = []
    lines.append("Global accuracy by severity")
    lines.append(f"  {'bucket':<16}{'correct':>9}{'incorrect':>11}{'percent':>9}")
    for row in report.buckets:
        lines.append(
            f"  {row.label:<16}{row.correct:>9}{row.incorrect:>11}{_fmt(row.percent):>9}"
        )
    lines.append("")
    lines.append("Global detection by axis combination (misaligned only)")
    lines.append(
        f"  {'combination':<16}{'correct':>9}{'incorrect':>11}{'percent':>9}{'share':>8}"
    )
    for row in report.combinations:
        note = "  (absent)" if row.absent else ""
        lines.append(
            f"  {row.label:<16}{row.correct:>9}{row.incorrect:>11}"
            f"{_fmt(row.percent):>9}{_fmt(row.share):>8}{note}"
        )
    lines.append("")
    lines.append("Axis-head confusion")
    lines.append(
        f"  {'axis':<8}{'tp':>6}{'fp':>6}{'fn':>6}{'tn':>6}"
        f"{'accuracy':>10}{'precision':>11}{'recall':>8}"
    )
    for row in report.axes:
        lines.append(
            f"  {row.axis:<8}{row.tp:>6}{row.fp:>6}{row.fn:>6}{row.tn:>6}"
            f"{_fmt(row.accuracy):>10}{_fmt(row.precision):>11}{_fmt(row.recall):>8}"
        )
    lines.append("")
    lines.append(f"Samples: {report.n_records}  overall accuracy: {report.overall_percent:.2f}")
    return "\n".join(lines) + "\n"


def report_to_json(report: Report) -> dict:
    """Plain-dict mirror of the text tables for machine consumers."""
    return {
        "n_records": report.n_records,
        "overall_percent": report.overall_percent,
        "buckets": [
            {
                "label": r.label,
                "correct": r.correct,
                "incorrect": r.incorrect,
                "percent": r.percent,
            }
            for r in report.buckets
        ],
        "combinations": [
            {
                "label": r.label,
                "correct": r.correct,
                "incorrect": r.incorrect,
                "percent": r.percent,
                "share": r.share,
                "absent": r.absent,
            }
            for r in report.combinations
        ],
        "axes": [
            {
                "axis": r.axis,
                "tp": r.tp,
                "fp": r.fp,
                "fn": r.fn,
                "tn": r.tn,
                "accuracy": r.accuracy,
                "precision": r.precision,
                "recall": r.recall,
            }
            for r in report.axes
        ],
    }


def _pooled(flows: Sequence[FlowField], extract) -> np.ndarray:
    return np.concatenate([np.atleast_1d(extract(f)) for f in flows])


def distribution_export(
    out_dir: str | Path,
    populations: Mapping[str, Sequence[FlowField]],
    n_bins: int = DEFAULT_N_BINS,
    pair: str = "xy",
) -> dict[str, Path]:
    """Write per-population histograms of the pair's angle and cross value.

    Two CSV files (angle_hist.csv, cross_hist.csv) with columns
    population, bin_index, lo, hi, mass; the mass column sums to 1 per
    population. Angle bins tile [0, 360); cross bins share one range
    spanning the pooled values of every population.
    """
    if not populations:
        raise ValueError("no populations")
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tags = list(populations)

    angle_rows = []
    width = 360.0 / n_bins
    for tag in tags:
        ang = _pooled(populations[tag], lambda f: projected_angles_deg(f, pair))
        idx = np.floor(ang / width).astype(np.int64)
        np.clip(idx, 0, n_bins - 1, out=idx)
        hist = np.bincount(idx, minlength=n_bins).astype(np.float64) / len(ang)
        for b in range(n_bins):
            angle_rows.append((tag, b, b * width, (b + 1) * width, float(hist[b])))

    pooled_cross = {
        tag: _pooled(populations[tag], lambda f: cross_values(f, pair)) for tag in tags
    }
    everything = np.concatenate(list(pooled_cross.values()))
    lo, hi = float(everything.min()), float(everything.max())
    if lo == hi:  # all identical values still need a nonzero-width range
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    cross_rows = []
    for tag in tags:
        counts, _ = np.histogram(pooled_cross[tag], bins=edges)
        mass = counts.astype(np.float64) / len(pooled_cross[tag])
        for b in range(n_bins):
            cross_rows.append((tag, b, float(edges[b]), float(edges[b + 1]), float(mass[b])))

    paths = {
        "angle": out_dir / "angle_hist.csv",
        "cross": out_dir / "cross_hist.csv",
    }
    for key, rows in (("angle", angle_rows), ("cross", cross_rows)):
        with open(paths[key], "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["population", "bin_index", "lo", "hi", "mass"])
            writer.writerows(rows)
    return paths
