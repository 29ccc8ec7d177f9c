"""Image-level and pixel-level detection metrics.

All thresholded decisions share one comparator (score >= threshold, via
pooling.ge_mask), matching map binarization. AUC is the rank statistic
with midrank tie handling, which is exact and directly checkable against
the O(n^2) pairwise definition.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pooling import ge_mask


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    sx = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    npos = int((y == 1).sum())
    nneg = int((y == 0).sum())
    if npos == 0 or nneg == 0:
        raise ValueError(f"roc_auc undefined: need both classes, got {npos} positives / {nneg} negatives")
    ranks = _midranks(s)
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg))


def _harmonic(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def image_metrics(scores, labels, threshold: float) -> tuple[float, float, float]:
    """(specificity, sensitivity, their harmonic mean) at score >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    pred = ge_mask(s, threshold)
    tp = float(((pred == 1) & (y == 1)).sum())
    tn = float(((pred == 0) & (y == 0)).sum())
    fp = float(((pred == 1) & (y == 0)).sum())
    fn = float(((pred == 0) & (y == 1)).sum())
    specificity = tn / (tn + fp) if (tn + fp) > 0 else 0.0
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return specificity, sensitivity, _harmonic(specificity, sensitivity)


def pixel_f1(pred_mask, gt_mask) -> tuple[float, float, float]:
    """(precision, recall, F1) of one binary predicted mask against one
    ground-truth mask; zero denominators yield 0."""
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"pixel_f1 shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    p = p != 0
    g = g != 0
    tp = float((p & g).sum())
    fp = float((p & ~g).sum())
    fn = float((~p & g).sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return precision, recall, _harmonic(precision, recall)


def combined_f1(i_f1: float, p_f1: float) -> float:
    """Harmonic mean of the image-level and pixel-level F1 scores."""
    return _harmonic(float(i_f1), float(p_f1))


@dataclass
class MetricsReport:
    auc: float
    specificity: float
    sensitivity: float
    i_f1: float
    pixel_precision: float
    pixel_recall: float
    p_f1: float
    c_f1: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
            "i_f1": self.i_f1,
            "pixel_precision": self.pixel_precision,
            "pixel_recall": self.pixel_recall,
            "p_f1": self.p_f1,
            "c_f1": self.c_f1,
            "metadata": self.metadata,
        }


def compute_report(scores, labels, pred_masks, gt_masks, threshold: float,
                   metadata: dict | None = None) -> MetricsReport:
    """Full metric set over one evaluated split.

    Pixel metrics are macro: computed per tampered image, then averaged
    over tampered images only.
    """
    specificity, sensitivity, i_f1 = image_metrics(scores, labels, threshold)
    auc = roc_auc(scores, labels)
    y = np.asarray(labels).reshape(-1)
    precisions, recalls, f1s = [], [], []
    for idx in np.nonzero(y == 1)[0]:
        p, r, f = pixel_f1(pred_masks[idx], gt_masks[idx])
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    pixel_precision = float(np.mean(precisions)) if precisions else 0.0
    pixel_recall = float(np.mean(recalls)) if recalls else 0.0
    p_f1 = float(np.mean(f1s)) if f1s else 0.0
    return MetricsReport(
        auc=auc,
        specificity=specificity,
        sensitivity=sensitivity,
        i_f1=i_f1,
        pixel_precision=pixel_precision,
        pixel_recall=pixel_recall,
        p_f1=p_f1,
        c_f1=combined_f1(i_f1, p_f1),
        metadata=dict(metadata or {}),
    )
