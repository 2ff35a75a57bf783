"""
Segmentation scoring: per-image confusion counts, the five challenge
metrics and their per-image averages.

Any metric whose denominator is zero (an absent class predicted as
absent) is defined as 1.0.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from skinfcn.errors import DataError

_LOGGER = logging.getLogger(__name__)

METRIC_NAMES = ("se", "sp", "ac", "ja", "di")
REPORT_COLUMNS = ["id", *METRIC_NAMES]
MEAN_ROW_ID = "MEAN"


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataError(f"{name} mask is not binary (values must be 0 or 1)")
    return mask.astype(bool)


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    if np.shape(pred) != np.shape(gt):
        raise DataError(f"prediction shape {np.shape(pred)} differs from ground truth {np.shape(gt)}")
    p, g = _as_binary(pred, "predicted"), _as_binary(gt, "ground truth")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def _ratio(numerator: int, denominator: int) -> float:
    if denominator == 0:
        return 1.0
    return numerator / denominator


@dataclasses.dataclass(frozen=True)
class PerImageMetrics:
    id: str
    se: float
    sp: float
    ac: float
    ja: float
    di: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in METRIC_NAMES)


def compute_metrics(counts: ConfusionCounts, id: str = "") -> PerImageMetrics:
    """Sensitivity, specificity, accuracy, Jaccard index and Dice coefficient."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    return PerImageMetrics(
        id=id,
        se=_ratio(tp, tp + fn),
        sp=_ratio(tn, tn + fp),
        ac=_ratio(tp + tn, counts.total),
        ja=_ratio(tp, tp + fp + fn),
        di=_ratio(2 * tp, 2 * tp + fp + fn),
    )


@dataclasses.dataclass(frozen=True)
class AggregateReport:
    images: tuple[PerImageMetrics, ...]
    means: dict[str, float]

    @property
    def ranking_key(self) -> float:
        """Mean Jaccard index, the ranking criterion."""
        return self.means["ja"]

    def to_frame(self) -> pd.DataFrame:
        rows = [(m.id, *m.values()) for m in self.images]
        rows.append((MEAN_ROW_ID, *(self.means[name] for name in METRIC_NAMES)))
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def aggregate(metrics: Sequence[PerImageMetrics]) -> AggregateReport:
    """Unweighted per-image averages, accumulated with exact summation."""
    if not metrics:
        raise DataError("cannot aggregate an empty list of images")
    means = {name: math.fsum(getattr(m, name) for m in metrics) / len(metrics) for name in METRIC_NAMES}
    return AggregateReport(images=tuple(metrics), means=means)


def score_masks(pred: np.ndarray, gt: np.ndarray, id: str = "") -> PerImageMetrics:
    return compute_metrics(confusion_counts(pred, gt), id)


def write_report(report: AggregateReport, path: str | Path) -> None:
    """CSV with header `id,se,sp,ac,ja,di`, one row per image and a final MEAN row."""
    try:
        report.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise DataError(f"cannot write report: {e}", str(path)) from e
    _LOGGER.info(f"Wrote report for {len(report.images)} image(s) to {path}")
