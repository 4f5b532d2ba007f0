"""Benchmark metrics: image AUROC/AUPR, pixel AUROC, and AUPRO.

AUROC is the Mann-Whitney statistic (probability that a random positive
outranks a random negative, ties counted half). AUPR is step-wise average
precision. AUPRO sweeps thresholds over pooled anomaly maps, averages the
per-connected-region overlap (8-connectivity) against the global false
positive rate, and integrates the curve up to an FPR limit by trapezoid,
normalized by the limit.

All metrics are pure and permutation invariant in record order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .core import ScoreMap
from .errors import InvalidArgumentError, MetricError

DEFAULT_FPR_LIMIT = 0.3
#: Above this many pooled pixels the AUPRO sweep switches from exact
#: threshold enumeration to 1000 quantile thresholds.
EXACT_SWEEP_LIMIT = 200_000

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class EvalRecord:
    """One image's evaluation payload."""

    image_id: str
    label: int  # 0 normal, 1 abnormal
    score: float
    map: Optional[ScoreMap] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if (self.map is None) != (self.mask is None):
            raise InvalidArgumentError("mask must be present iff map is present")
        if self.map is not None and self.map.values.shape != self.mask.shape:
            raise InvalidArgumentError(
                f"map shape {self.map.values.shape} != mask shape {self.mask.shape}"
            )


def _check_binary_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise InvalidArgumentError("labels must be 0 (normal) or 1 (abnormal)")
    return labels.astype(bool)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(np.asarray(labels))
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    ranks = rankdata(scores)  # average ranks resolve ties as half-wins
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise average precision."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(np.asarray(labels))
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # Group ties: only threshold boundaries between distinct scores count.
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([boundaries, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    fp = np.cumsum(~sorted_labels)[cut]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def pixel_auroc(maps: Sequence[ScoreMap], masks: Sequence[np.ndarray]) -> float:
    """AUROC over all pixels pooled across images."""
    if len(maps) != len(masks) or not maps:
        raise InvalidArgumentError("maps and masks must be non-empty and aligned")
    scores: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for m, gt in zip(maps, masks):
        gt = np.asarray(gt).astype(bool)
        if m.values.shape != gt.shape:
            raise InvalidArgumentError(f"map {m.values.shape} vs mask {gt.shape}")
        scores.append(m.values.ravel())
        labels.append(gt.ravel())
    return auroc(np.concatenate(scores), np.concatenate(labels).astype(int))




def aupro(
    maps: Sequence[ScoreMap],
    masks: Sequence[np.ndarray],
    fpr_limit: float = DEFAULT_FPR_LIMIT,
    exact: Optional[bool] = None,
) -> float:
    """Area under the per-region-overlap curve, FPR-limited and normalized.

    ``exact=None`` picks exact threshold enumeration for small inputs and a
    1000-quantile sweep for large ones.
    """
    if not (0.0 < fpr_limit <= 1.0):
        raise InvalidArgumentError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if len(maps) != len(masks) or not maps:
        raise InvalidArgumentError("maps and masks must be non-empty and aligned")

    region_ids: List[np.ndarray] = []
    region_sizes: List[int] = []
    scores: List[np.ndarray] = []
    negatives: List[np.ndarray] = []
    n_regions = 0
    for m, gt in zip(maps, masks):
        gt = np.asarray(gt).astype(bool)
        if m.values.shape != gt.shape:
            raise InvalidArgumentError(f"map {m.values.shape} vs mask {gt.shape}")
        labeled, count = ndimage.label(gt, structure=EIGHT_CONNECTED)
        ids = np.where(labeled > 0, labeled + n_regions, 0)
        for r in range(1, count + 1):
            region_sizes.append(int((labeled == r).sum()))
        n_regions += count
        region_ids.append(ids.ravel())
        scores.append(m.values.ravel())
        negatives.append(~gt.ravel())
    if n_regions == 0:
        raise MetricError("AUPRO needs at least one anomalous region")

    all_scores = np.concatenate(scores)
    all_regions = np.concatenate(region_ids)
    all_negative = np.concatenate(negatives)
    total_neg = int(all_negative.sum())
    if total_neg == 0:
        raise MetricError("AUPRO needs at least one normal pixel")

    if exact is None:
        exact = all_scores.size <= EXACT_SWEEP_LIMIT
    if exact:
        ascending = np.unique(all_scores)
    else:
        ascending = np.unique(np.quantile(all_scores, np.linspace(0.0, 1.0, 1001)))
    n_groups = ascending.size

    # A pixel enters the sweep at the largest threshold <= its score;
    # descending group index = n_groups - (ascending insertion point).
    group = n_groups - np.searchsorted(ascending, all_scores, side="right")
    np.clip(group, 0, n_groups - 1, out=group)  # quantile mode: clamp below-min scores
    flat = group * (n_regions + 1) + all_regions
    counts = np.bincount(flat, minlength=n_groups * (n_regions + 1))
    cum = np.cumsum(counts.reshape(n_groups, n_regions + 1), axis=0)

    # Region id 0 marks pixels outside every ground-truth region: the negatives.
    sizes = np.asarray(region_sizes, dtype=np.float64)
    pros = (cum[:, 1:] / sizes[None, :]).mean(axis=1)
    fprs = cum[:, 0] / total_neg

    curve_fpr = np.concatenate([[0.0], fprs])
    curve_pro = np.concatenate([[0.0], pros])
    return integrate_fpr_limited(curve_fpr.tolist(), curve_pro.tolist(), fpr_limit)


def evaluate_records(records: Sequence[EvalRecord], fpr_limit: float = DEFAULT_FPR_LIMIT) -> dict:
    """Image metrics over all records; pixel metrics when maps are present."""
    if not records:
        raise InvalidArgumentError("at least one evaluation record is required")
    scores = [r.score for r in records]
    labels = [r.label for r in records]
    out = {
        "n_images": len(records),
        "auroc_image": auroc(scores, labels),
        "aupr": aupr(scores, labels),
    }
    with_maps = [r for r in records if r.map is not None]
    if with_maps and any(np.asarray(r.mask).any() for r in with_maps):
        maps = [r.map for r in with_maps]
        masks = [r.mask for r in with_maps]
        out["auroc_pixel"] = pixel_auroc(maps, masks)
        out["aupro"] = aupro(maps, masks, fpr_limit=fpr_limit)
    return out


def integrate_fpr_limited(fprs: Sequence[float], pros: Sequence[float], fpr_limit: float) -> float:
    """Trapezoidal area of a (FPR, PRO) curve over [0, limit], divided by the limit."""
    area = 0.0
    for (f0, p0), (f1, p1) in zip(zip(fprs, pros), zip(fprs[1:], pros[1:])):
        if f1 <= f0:
            continue
        if f1 <= fpr_limit:
            area += (f1 - f0) * (p0 + p1) / 2.0
        else:
            if f0 >= fpr_limit:
                break
            p_at = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0)
            area += (fpr_limit - f0) * (p0 + p_at) / 2.0
            break
    return area / fpr_limit
