"""Segmentation metrics: confusion counts, Sen/Spe/Acc/MCC, AUC, dataset reports.

Definitions over pixel counts (N = TP + TN + FP + FN):

    Sen = TP / (TP + FN)
    Spe = TN / (TN + FP)
    Acc = (TP + TN) / N
    MCC = (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))

MCC intermediates are computed with arbitrary-precision integers (pixel
counts at megapixel scale overflow 64-bit products) and one final float64
division, so results are exact to ~1e-15 relative.

AUC is computed twice on every call: trapezoidal integration of the ROC
curve over all distinct score thresholds, and the Mann-Whitney rank
statistic with midrank tie handling.  The two paths must agree to 1e-9 or
the call fails; the trapezoidal value is returned.  Undefined metrics
(zero denominators, single-class ground truth) always raise, never return
a silent default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import ImageSample, crop_back
from .errors import (
    ConfigError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)

AGGREGATION_MODES = ("pooled", "per_image_mean")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel tallies of a binary segmentation against ground truth."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            tn=self.tn + other.tn,
            fn=self.fn + other.fn,
        )


def _as_binary(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    vals = np.unique(a)
    if not np.isin(vals, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (0/1), found values {vals[:8]}")
    return a.astype(bool)


def confusion_counts(
    pred_binary, gt_binary, fov_mask=None
) -> ConfusionCounts:
    """Count TP/FP/TN/FN pixels, restricted to ``fov_mask`` when given."""
    pred = _as_binary(pred_binary, "prediction")
    gt = _as_binary(gt_binary, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if fov_mask is not None:
        fov = _as_binary(fov_mask, "fov mask")
        if fov.shape != gt.shape:
            raise ShapeError(f"fov shape {fov.shape} != ground truth shape {gt.shape}")
        pred, gt = pred[fov], gt[fov]
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def sen(c: ConfusionCounts) -> float:
    """Sensitivity TP / (TP + FN)."""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: no positive ground-truth pixels")
    return c.tp / (c.tp + c.fn)


def spe(c: ConfusionCounts) -> float:
    """Specificity TN / (TN + FP)."""
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: no negative ground-truth pixels")
    return c.tn / (c.tn + c.fp)


def acc(c: ConfusionCounts) -> float:
    """Accuracy (TP + TN) / N."""
    if c.n == 0:
        raise UndefinedMetricError("accuracy undefined: no evaluated pixels")
    return (c.tp + c.tn) / c.n


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation coefficient, exact over Python integers."""
    m1 = c.tp + c.fp
    m2 = c.tp + c.fn
    m3 = c.tn + c.fp
    m4 = c.tn + c.fn
    if min(m1, m2, m3, m4) == 0:
        raise UndefinedMetricError("mcc undefined: a confusion-matrix marginal is zero")
    numerator = c.tp * c.tn - c.fp * c.fn
    denominator = math.sqrt(float(m1 * m2 * m3 * m4))
    return numerator / denominator


def _flatten_scored(prob_map, gt_binary, fov_mask):
    scores = np.asarray(prob_map, dtype=np.float64)
    gt = _as_binary(gt_binary, "ground truth")
    if scores.shape != gt.shape:
        raise ShapeError(f"score shape {scores.shape} != ground truth shape {gt.shape}")
    if fov_mask is not None:
        fov = _as_binary(fov_mask, "fov mask")
        if fov.shape != gt.shape:
            raise ShapeError(f"fov shape {fov.shape} != ground truth shape {gt.shape}")
        scores, gt = scores[fov], gt[fov]
    scores = scores.ravel()
    gt = gt.ravel()
    if not np.isfinite(scores).all():
        raise ValidationError("scores contain non-finite values")
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValidationError("scores must lie in [0, 1]")
    return scores, gt


def _auc_trapezoid(scores: np.ndarray, labels: np.ndarray) -> float:
    # Stable descending sort; thresholds = distinct score values.
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.int64)
    boundary = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=np.int64)
    idx = np.concatenate([boundary, [s.size - 1]])
    tps = np.cumsum(y)[idx]
    fps = idx + 1 - tps
    tps = np.concatenate([[0], tps])
    fps = np.concatenate([[0], fps])
    p = int(tps[-1])
    n = int(fps[-1])
    # 2 * area * P * N accumulated in exact integer arithmetic.
    twice_area = int(np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])))
    return twice_area / (2 * p * n)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    s = values[order]
    n = s.size
    is_new = np.empty(n, dtype=bool)
    is_new[0] = True
    is_new[1:] = s[1:] != s[:-1]
    starts = np.flatnonzero(is_new)
    ends = np.append(starts[1:], n)
    group = np.cumsum(is_new) - 1
    group_rank = 0.5 * (starts + 1 + ends)
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[group]
    return ranks


def _auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    ranks = _midranks(scores)
    p = int(labels.sum())
    n = labels.size - p
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - p * (p + 1) / 2) / (p * n)


def auc(prob_map, gt_binary, fov_mask=None) -> float:
    """Area under the ROC curve over all distinct score thresholds.

    Requires both classes to be present.  All score ties are handled by the
    trapezoid between the surrounding operating points, equivalently by
    midranks in the rank-statistic path.
    """
    scores, gt = _flatten_scored(prob_map, gt_binary, fov_mask)
    p = int(gt.sum())
    n = gt.size - p
    if p == 0 or n == 0:
        raise UndefinedMetricError("auc undefined: ground truth contains a single class")
    a_trap = _auc_trapezoid(scores, gt)
    a_rank = _auc_rank(scores, gt)
    if abs(a_trap - a_rank) > 1e-9:
        raise NumericError(
            f"AUC paths disagree: trapezoid {a_trap!r} vs rank {a_rank!r}"
        )
    return a_trap


def roc_points(prob_map, gt_binary, fov_mask=None):
    """ROC operating points at every distinct threshold plus +/-inf sentinels.

    Returns (thresholds, fpr, tpr) arrays; thresholds descend from +inf to
    -inf, predictions count as positive when score >= threshold.
    """
    scores, gt = _flatten_scored(prob_map, gt_binary, fov_mask)
    p = int(gt.sum())
    n = gt.size - p
    if p == 0 or n == 0:
        raise UndefinedMetricError("roc undefined: ground truth contains a single class")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = gt[order].astype(np.int64)
    boundary = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=np.int64)
    idx = np.concatenate([boundary, [s.size - 1]])
    tps = np.cumsum(y)[idx]
    fps = idx + 1 - tps
    thresholds = np.concatenate([[np.inf], s[idx], [-np.inf]])
    tpr = np.concatenate([[0.0], tps / p, [1.0]])
    fpr = np.concatenate([[0.0], fps / n, [1.0]])
    return thresholds, fpr, tpr


@dataclass
class ImageMetrics:
    """Per-image metric values retained inside a dataset report."""

    id: str
    counts: ConfusionCounts
    sen: float
    spe: float
    acc: float
    auc: float
    mcc: float


@dataclass
class MetricsReport:
    """Dataset-level Sen/Spe/Acc/AUC/MCC plus the per-image breakdown.

    ``aggregation`` records how the headline values were produced: "pooled"
    sums confusion counts over all pixels (one global confusion matrix) and
    pools scores for AUC; "per_image_mean" averages per-image values.
    """

    sen: float
    spe: float
    acc: float
    auc: float
    mcc: float
    aggregation: str
    threshold: float
    counts: ConfusionCounts
    per_image: list[ImageMetrics] = field(default_factory=list)

    def as_ordered_values(self) -> tuple[float, float, float, float, float]:
        return (self.sen, self.spe, self.acc, self.auc, self.mcc)


PredictFn = Callable[[np.ndarray], np.ndarray]


def evaluate_dataset(
    model: Union[PredictFn, object],
    samples: Sequence[ImageSample],
    threshold: float = 0.5,
    use_fov: bool = False,
    aggregation: str = "pooled",
) -> MetricsReport:
    """Evaluate a model over prepared samples.

    Each sample is forwarded in inference mode, the probability map is
    cropped back to the original image window, binarized with the strict
    ``score > threshold`` rule, and tallied.  ``model`` is either a DRNet
    (its ``predict_map`` is used) or any callable mapping a 2-D image array
    to a probability map of the same shape.
    """
    if aggregation not in AGGREGATION_MODES:
        raise ConfigError(
            f"unknown aggregation {aggregation!r}; expected one of {AGGREGATION_MODES}"
        )
    if not samples:
        raise ConfigError("cannot evaluate an empty sample list")
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"threshold must lie in [0, 1), got {threshold}")
    predict: PredictFn = getattr(model, "predict_map", model)  # type: ignore[assignment]

    per_image: list[ImageMetrics] = []
    total = ConfusionCounts(0, 0, 0, 0)
    pooled_scores: list[np.ndarray] = []
    pooled_labels: list[np.ndarray] = []
    for s in samples:
        prob_padded = np.asarray(predict(s.image), dtype=np.float32)
        if prob_padded.shape != s.image.shape:
            raise ShapeError(
                f"{s.id}: prediction shape {prob_padded.shape} != image shape {s.image.shape}"
            )
        prob = crop_back(prob_padded, s)
        gt = crop_back(s.gt_mask, s)
        fov = crop_back(s.fov_mask, s) if (use_fov and s.fov_mask is not None) else None
        pred = (prob > threshold).astype(np.uint8)
        counts = confusion_counts(pred, gt, fov)
        image_auc = auc(prob.astype(np.float64), gt, fov)
        per_image.append(
            ImageMetrics(
                id=s.id,
                counts=counts,
                sen=sen(counts),
                spe=spe(counts),
                acc=acc(counts),
                auc=image_auc,
                mcc=mcc(counts),
            )
        )
        total = total + counts
        keep = fov.astype(bool) if fov is not None else np.ones(gt.shape, dtype=bool)
        pooled_scores.append(prob[keep].ravel())
        pooled_labels.append(gt[keep].ravel())

    if aggregation == "pooled":
        scores = np.concatenate(pooled_scores)
        labels = np.concatenate(pooled_labels)
        return MetricsReport(
            sen=sen(total),
            spe=spe(total),
            acc=acc(total),
            auc=auc(scores.astype(np.float64), labels),
            mcc=mcc(total),
            aggregation="pooled",
            threshold=threshold,
            counts=total,
            per_image=per_image,
        )
    k = len(per_image)
    return MetricsReport(
        sen=sum(m.sen for m in per_image) / k,
        spe=sum(m.spe for m in per_image) / k,
        acc=sum(m.acc for m in per_image) / k,
        auc=sum(m.auc for m in per_image) / k,
        mcc=sum(m.mcc for m in per_image) / k,
        aggregation="per_image_mean",
        threshold=threshold,
        counts=total,
        per_image=per_image,
    )
