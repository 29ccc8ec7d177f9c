"""Image-level pooling of prediction maps, plus shared thresholding helpers.

Adaptive pooling picks a threshold by exhaustive Otsu search over the
observed values (candidate thresholds are the values themselves), splits
the map into a low group (< threshold) and a high group (>= threshold),
and returns the mean of the high group. Group membership is recomputed
every forward pass and treated as constant during backward, so gradients
reach exactly the selected entries.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PoolKind(str, Enum):
    MAX = "max"
    AVG = "avg"
    ADAPTIVE = "adaptive"


def _wrap(pred_map) -> Tensor:
    # raw arrays keep their own float dtype instead of the session default
    arr = np.asarray(pred_map)
    dt = arr.dtype if arr.dtype in (np.float32, np.float64) else None
    return Tensor(arr, dtype=dt)


def ge_mask(values: np.ndarray, threshold: float) -> np.ndarray:
    """The one comparator used everywhere a map is binarized: >= threshold."""
    return (np.asarray(values) >= threshold).astype(np.float32)


def binarize(pred_map, threshold: float) -> np.ndarray:
    """Threshold a prediction map (tensor or array) to a {0,1} float mask."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"binarize threshold must lie in (0,1), got {threshold}")
    data = pred_map.data if isinstance(pred_map, Tensor) else np.asarray(pred_map)
    return ge_mask(data, threshold)


def otsu_threshold(values) -> float:
    """Threshold minimizing summed within-group squared deviation.

    For each candidate w drawn from the observed values, the objective is
    ssd(low) + ssd(high) with low = {m < w}, high = {m >= w}; an empty
    group contributes zero. Ties go to the smallest candidate. Population
    variance times group size equals the ssd, which keeps the brute-force
    oracle unambiguous.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("otsu_threshold: empty input")
    v = np.sort(v)
    n = v.size
    s1 = np.concatenate(([0.0], np.cumsum(v)))
    s2 = np.concatenate(([0.0], np.cumsum(v * v)))
    total1, total2 = s1[-1], s2[-1]

    candidates, first_idx = np.unique(v, return_index=True)
    # first_idx[c] = number of entries strictly below candidate c (v sorted)
    lo_n = first_idx.astype(np.float64)
    lo_s1 = s1[first_idx]
    lo_s2 = s2[first_idx]
    hi_n = n - lo_n
    hi_s1 = total1 - lo_s1
    hi_s2 = total2 - lo_s2

    with np.errstate(invalid="ignore", divide="ignore"):
        ssd_lo = np.where(lo_n > 0, lo_s2 - lo_s1 * lo_s1 / np.maximum(lo_n, 1.0), 0.0)
        ssd_hi = np.where(hi_n > 0, hi_s2 - hi_s1 * hi_s1 / np.maximum(hi_n, 1.0), 0.0)
    objective = ssd_lo + ssd_hi
    best = int(np.argmin(objective))  # argmin takes the first, i.e. smallest candidate
    return float(candidates[best])


def adaptive_pool(pred_map) -> Tensor:
    """Mean of the high group under the Otsu split, per image.

    Accepts (H,W) or (N,H,W); returns a scalar or (N,) tensor. The split is
    computed on detached values; gradients flow into the selected entries.
    """
    single = False
    m = pred_map if isinstance(pred_map, Tensor) else _wrap(pred_map)
    if m.ndim == 2:
        m = T.reshape(m, (1,) + m.shape)
        single = True
    if m.ndim != 3:
        raise ValueError(f"adaptive_pool expects (H,W) or (N,H,W), got shape {m.shape}")
    data = m.data
    n = data.shape[0]
    mask = np.empty_like(data)
    for i in range(n):
        w = otsu_threshold(data[i])
        mask[i] = data[i] >= w
    counts = mask.reshape(n, -1).sum(axis=1)
    picked = T.reduce_sum(T.mul(m, Tensor(mask, dtype=data.dtype)), axis=(1, 2))
    pooled = T.div(picked, Tensor(counts.astype(data.dtype)))
    return T.reshape(pooled, ()) if single else pooled


def pool(pred_map, kind: PoolKind) -> Tensor:
    """Image score from a map: global max, global mean, or adaptive."""
    kind = PoolKind(kind)
    single = False
    m = pred_map if isinstance(pred_map, Tensor) else _wrap(pred_map)
    if m.ndim == 2:
        m = T.reshape(m, (1,) + m.shape)
        single = True
    if kind is PoolKind.ADAPTIVE:
        out = adaptive_pool(m)
    elif kind is PoolKind.MAX:
        out = T.reduce_max(m, axis=(1, 2))
    else:
        out = T.reduce_mean(m, axis=(1, 2))
    return T.reshape(out, ()) if single else out
