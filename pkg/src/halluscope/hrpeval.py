"""Rejection-sweep evaluation: rejection curves, their AUC, and the
normalized rejection-preference score (HRP).

The sweep is discrete and sample-aligned: samples are ordered by ascending
confidence (ties broken by ascending index), rejection fraction i/n drops the
i lowest-confidence samples, and the curve records the mean quality of the
kept samples. The AUC is the left-Riemann sum (1/n) * sum(kept_means). HRP
normalizes the monitor's AUC between a random monitor (the full-set mean
quality) and the quality-oracle monitor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, FormatError, ValidationError
from .tensorstore import QualityTable, _fmt


@dataclass
class RejectionCurve:
    rejected_fraction: np.ndarray  # (n,) float64, i/n
    kept_mean_quality: np.ndarray  # (n,) float64

    @property
    def n(self) -> int:
        return self.rejected_fraction.size


@dataclass
class MetricHrp:
    auc_f: float
    auc_random: float
    auc_oracle: float
    hrp: float | None  # None when quality is degenerate (constant)


@dataclass
class HrpReport:
    per_metric: dict[str, MetricHrp]
    mean_hrp: float | None
    n: int
    monitor_id: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "monitor_id": self.monitor_id,
            "n": self.n,
            "mean_hrp": self.mean_hrp,
            "per_metric": {
                name: {
                    "auc_f": m.auc_f,
                    "auc_random": m.auc_random,
                    "auc_oracle": m.auc_oracle,
                    "hrp": m.hrp,
                }
                for name, m in self.per_metric.items()
            },
            "warnings": self.warnings,
        }


def _confidence_order(confidence: np.ndarray) -> np.ndarray:
    """Ascending confidence, ties broken by ascending sample index."""
    idx = np.arange(confidence.size)
    return np.lexsort((idx, confidence))


def rejection_curve(confidence, quality) -> RejectionCurve:
    confidence = np.asarray(confidence, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    if confidence.shape != quality.shape or confidence.ndim != 1:
        raise ValidationError("confidence and quality must be equal-length vectors")
    n = confidence.size
    if n < 2:
        raise ValidationError("need at least two samples")
    if np.any(np.isnan(confidence)):
        raise ValidationError("NaN confidence values")
    order = _confidence_order(confidence)
    q_sorted = quality[order]
    # kept_mean[i] = mean of q_sorted[i:]
    suffix = np.cumsum(q_sorted[::-1])[::-1]
    counts = np.arange(n, 0, -1, dtype=np.float64)
    return RejectionCurve(
        rejected_fraction=np.arange(n, dtype=np.float64) / n,
        kept_mean_quality=suffix / counts,
    )


def auc(curve: RejectionCurve) -> float:
    """Left-Riemann sum of the rejection curve over p in [0, 1)."""
    return float(curve.kept_mean_quality.sum() / curve.n)


def _metric_hrp(confidence: np.ndarray, quality: np.ndarray) -> MetricHrp:
    auc_f = auc(rejection_curve(confidence, quality))
    auc_random = float(np.mean(quality))
    auc_oracle = auc(rejection_curve(quality, quality))
    denom = auc_oracle - auc_random
    if denom == 0.0:
        return MetricHrp(auc_f, auc_random, auc_oracle, None)
    return MetricHrp(auc_f, auc_random, auc_oracle, (auc_f - auc_random) / denom)


def hrp(confidence, quality_table: QualityTable, metrics=None,
        monitor_id: str = "") -> HrpReport:
    """Per-metric HRP (oracle = the metric itself as confidence) plus the
    arithmetic mean over metrics. Degenerate metrics (constant quality) are
    reported as undefined and excluded from the mean with a warning."""
    confidence = np.asarray(confidence, dtype=np.float64)
    names = list(metrics) if metrics else quality_table.metric_names
    missing = [m for m in names if m not in quality_table.metrics]
    if missing:
        raise ValidationError(f"metric '{missing[0]}' not in quality table")
    if confidence.size != len(quality_table.sample_ids):
        raise ValidationError("confidence length does not match quality table")

    per_metric, notes, defined = {}, [], []
    for name in names:
        m = _metric_hrp(confidence, quality_table.metrics[name])
        per_metric[name] = m
        if m.hrp is None:
            msg = f"metric '{name}' has constant quality; HRP undefined"
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
        else:
            defined.append(m.hrp)
    mean_hrp = float(np.mean(defined)) if defined else None
    return HrpReport(per_metric=per_metric, mean_hrp=mean_hrp,
                     n=confidence.size, monitor_id=monitor_id, warnings=notes)


# ---------------------------------------------------------------------------
# External score files
# ---------------------------------------------------------------------------

def read_scores_csv(path) -> tuple[list[str], np.ndarray]:
    """Parse a `sample_id,confidence` CSV."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "sample_id,confidence":
        raise FormatError(f"{path}: expected header 'sample_id,confidence'")
    ids, vals = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 fields")
        try:
            vals.append(float(parts[1]))
        except ValueError as exc:
            raise FormatError(
                f"{path}:{lineno}: bad confidence {parts[1]!r}"
            ) from exc
        ids.append(parts[0])
    return ids, np.asarray(vals, dtype=np.float64)


def write_scores_csv(ids: list[str], confidence: np.ndarray, path) -> None:
    lines = ["sample_id,confidence"]
    for sid, c in zip(ids, confidence):
        lines.append(f"{sid},{_fmt(c)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def eval_external_scores(score_csv, quality_table: QualityTable,
                         metrics=None, monitor_id: str = "") -> HrpReport:
    """Evaluate any externally produced confidence file through the same HRP
    math path, aligned by sample ID."""
    ids, conf = read_scores_csv(score_csv)
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"{score_csv}: duplicate sample IDs")
    table = quality_table.subset(ids)
    missing = set(quality_table.sample_ids) - set(ids)
    if missing:
        raise AlignmentError(
            f"{score_csv}: missing score for sample '{sorted(missing)[0]}'"
        )
    return hrp(conf, table, metrics=metrics,
               monitor_id=monitor_id or str(score_csv))


def write_curves_csv(curve: RejectionCurve, path) -> None:
    lines = ["p,kept_mean"]
    for p, kv in zip(curve.rejected_fraction, curve.kept_mean_quality):
        lines.append(f"{_fmt(p)},{_fmt(kv)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_json(report: HrpReport, path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
