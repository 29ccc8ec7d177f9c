"""Cross-stream self-supervision: ensemble pseudo ground truth, patch
consistency volumes, warm-up weighting, total loss, and the inference rule.

Supervision targets (pseudo ground truth, target volumes) are plain numpy
arrays computed from detached values, so no gradient can reach them; the
differentiable side only ever sees them as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .pooling import PoolKind, ge_mask, pool
from .tensor import NumericError, Tensor


class IpcMode(str, Enum):
    SELF = "self"       # each stream targets its own binarized map
    ENSEMBLE = "ensemble"  # all streams target the ensemble pseudo-GT
    NONE = "none"       # IPC disabled (ablation)


class FusionMode(str, Enum):
    LATE = "late"   # three streams, ensemble averaging
    EARLY = "early"  # one stream on channel-concatenated sources


@dataclass
class EnsembleConfig:
    weights: tuple[float, ...] = (1.0, 2.0, 2.0)  # rgb, srm, bayar order
    threshold: float = 0.5
    lambda_msc: float = 0.1
    lambda_ipc: float = 0.1
    total_epochs: int = 30
    ipc_mode: IpcMode = IpcMode.ENSEMBLE
    fusion: FusionMode = FusionMode.LATE
    pooling: PoolKind = PoolKind.ADAPTIVE
    volume_scale_channels: int | None = None  # None -> tap channel count

    def __post_init__(self):
        self.ipc_mode = IpcMode(self.ipc_mode)
        self.fusion = FusionMode(self.fusion)
        self.pooling = PoolKind(self.pooling)
        if any(w <= 0 for w in self.weights):
            raise ValueError(f"stream weights must be positive, got {self.weights}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


def ensemble_map(maps: Sequence, weights: Sequence[float]) -> np.ndarray:
    """Weighted average of per-stream prediction maps, detached."""
    arrs = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in maps]
    if len(arrs) != len(weights):
        raise ValueError(f"{len(arrs)} maps but {len(weights)} weights")
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ValueError(f"ensemble_map shape mismatch: {shape} vs {a.shape}")
    total = math.fsum(weights)
    out = np.zeros(shape, dtype=arrs[0].dtype)
    for a, w in zip(arrs, weights):
        out += a * np.asarray(w / total, dtype=arrs[0].dtype)
    return out


def pseudo_gt(ens_map, threshold: float) -> np.ndarray:
    """Binarized ensemble map; a constant as far as gradients are concerned."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    data = ens_map.data if isinstance(ens_map, Tensor) else np.asarray(ens_map)
    return ge_mask(data, threshold)


def msc_loss(pseudo: np.ndarray, source_map: Tensor) -> Tensor:
    """Mean per-pixel BCE of one stream's map against the pseudo-GT."""
    if np.asarray(pseudo).shape != source_map.shape:
        raise ValueError(
            f"msc_loss shape mismatch: pseudo {np.asarray(pseudo).shape} vs map {source_map.shape}"
        )
    return T.bce(pseudo, source_map)


def consistency_volume(e1: Tensor, e2: Tensor, scale_channels: int) -> Tensor:
    """All-pairs patch dissimilarity 1 - sigmoid(<e1_p, e2_q> / sqrt(C)).

    Inputs are (H',W',D) or (N,H',W',D); output has two patch grids,
    (H',W',H',W') or (N,H',W',H',W'), values in (0,1). Entry [i,j,h,k]
    compares the query patch (i,j) against patch (h,k).
    """
    single = e1.ndim == 3
    a, b = (e1, e2)
    if single:
        a = T.reshape(a, (1,) + a.shape)
        b = T.reshape(b, (1,) + b.shape)
    if a.shape != b.shape:
        raise ValueError(f"consistency_volume shape mismatch: {e1.shape} vs {e2.shape}")
    n, hh, ww, d = a.shape
    p = hh * ww
    af = T.reshape(a, (n, p, d))
    bf = T.reshape(b, (n, p, d))
    logits = T.scale(T.matmul(af, T.transpose(bf, (0, 2, 1))), 1.0 / math.sqrt(scale_channels))
    vol = T.sub(T.as_tensor(1.0, like=logits), T.sigmoid(logits))
    shape = (hh, ww, hh, ww) if single else (n, hh, ww, hh, ww)
    return T.reshape(vol, shape)


def nearest_downsample(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-of-cell nearest-neighbor downsample of (...,H,W) arrays."""
    m = np.asarray(mask)
    h, w = m.shape[-2], m.shape[-1]
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return m[..., ys[:, None], xs[None, :]]


def target_volume(binary_map: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Binary supervision volume from a binary map.

    After nearest-neighbor downsampling to (out_h, out_w), the entry for a
    patch pair is 0 when both patches hold the same value and 1 otherwise:
    symmetric, zero on the diagonal, and all-zero for untouched images.
    Returns (out_h,out_w,out_h,out_w) or (N,...) float32, detached.
    """
    m = np.asarray(binary_map)
    single = m.ndim == 2
    if single:
        m = m[None]
    d = nearest_downsample(m, out_h, out_w).reshape(m.shape[0], out_h * out_w)
    v = (d[:, :, None] != d[:, None, :]).astype(np.float32)
    v = v.reshape(m.shape[0], out_h, out_w, out_h, out_w)
    return v[0] if single else v


def ipc_loss(target: np.ndarray, volume: Tensor) -> Tensor:
    """Mean BCE over every patch pair of the volume."""
    if np.asarray(target).shape != volume.shape:
        raise ValueError(
            f"ipc_loss shape mismatch: target {np.asarray(target).shape} vs volume {volume.shape}"
        )
    return T.bce(target, volume)


def warmup_weight(t: float, total_epochs: float) -> float:
    """Gaussian ramp exp(-5 (1 - t/T)^2): e^-5 at t=0, 1 at t=T."""
    return math.exp(-5.0 * (1.0 - t / total_epochs) ** 2)


def total_loss(stream_terms: Sequence[dict], t: float, cfg: EnsembleConfig) -> Tensor:
    """Sum of per-stream totals: acls + w(t) (lambda_msc msc + lambda_ipc ipc).

    ``stream_terms`` is one dict per stream with keys "acls" and optionally
    "msc"/"ipc" (None to skip). Every present term must be finite.
    """
    w = warmup_weight(t, cfg.total_epochs)
    pieces = []
    for idx, terms in enumerate(stream_terms):
        for name, term in terms.items():
            if term is not None and not np.isfinite(term.data).all():
                raise NumericError(f"non-finite {name} loss in stream {idx}: {float(term.data)}")
        total = terms["acls"]
        if terms.get("msc") is not None and cfg.lambda_msc > 0:
            total = T.add(total, T.scale(terms["msc"], w * cfg.lambda_msc))
        if terms.get("ipc") is not None and cfg.lambda_ipc > 0:
            total = T.add(total, T.scale(terms["ipc"], w * cfg.lambda_ipc))
        pieces.append(total)
    out = pieces[0]
    for piece in pieces[1:]:
        out = T.add(out, piece)
    return out


def infer(streams, images, cfg: EnsembleConfig):
    """Score a batch with trained streams.

    Returns (scores, binary_map): scores (N,) is the weighted average of
    per-stream pooled image scores, binary_map (N,H,W) is the thresholded
    ensemble map. Runs without gradient tracking.
    """
    weights = list(cfg.weights[: len(streams)])
    if len(weights) != len(streams):
        raise ValueError(f"{len(streams)} streams but {len(cfg.weights)} weights")
    with T.no_grad():
        maps = []
        scores = []
        for stream in streams:
            out = stream.model.forward(stream.source(images))
            maps.append(out.prediction_map.data)
            scores.append(pool(out.prediction_map, cfg.pooling).data)
    total = math.fsum(weights)
    score = np.zeros_like(scores[0])
    for s, w in zip(scores, weights):
        score += s * np.asarray(w / total, dtype=s.dtype)
    ens = ensemble_map(maps, weights)
    return score, pseudo_gt(ens, cfg.threshold)
