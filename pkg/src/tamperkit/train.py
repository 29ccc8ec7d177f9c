"""The training loop: weakly-supervised multi-stream self-consistency.

This module sees the data exclusively through load_weak_batch, which
carries images and image-level labels and nothing else; that is the
weak-supervision firewall. Per batch:

  1. forward every stream, pool each prediction map to an image score,
     and take the BCE against the image labels (A-CLS);
  2. build the detached ensemble pseudo ground truth and fit each stream's
     map to it (MSC, late fusion with several streams only);
  3. build each stream's patch consistency volume and fit it to the
     target volume derived from the pseudo ground truth (ENSEMBLE mode)
     or the stream's own binarized map (SELF mode) (IPC);
  4. sum per-stream totals with the Gaussian warm-up on MSC/IPC, backprop,
     step each stream's AdamW, and re-project the constrained kernels.

Everything stochastic draws from one seeded generator whose state is
checkpointed, so a resumed run is bitwise identical to an uninterrupted
one.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .consistency import (FusionMode, IpcMode, consistency_volume, ensemble_map, infer,
                          ipc_loss, msc_loss, pseudo_gt, target_volume, total_loss,
                          warmup_weight)
from .datagen import DatasetManifest, augment, load_manifest, load_weak_batch
from .metrics import roc_auc
from .model import Stream, build_streams
from .optim import AdamW
from .pooling import binarize, pool
from .tensor import NumericError, Tensor


@dataclass
class TrainResult:
    out_dir: Path
    epochs_run: int
    best_val_auc: float
    best_epoch: int
    best_path: Path
    last_path: Path
    log_path: Path
    final_losses: dict


def stratified_split(labels, fraction: float, seed: int):
    """Deterministic per-class holdout; returns (train_idx, val_idx)."""
    y = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x5917,)))
    train_idx, val_idx = [], []
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        perm = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx))) if fraction > 0 else 0
        k = min(k, max(0, len(idx) - 1))
        val_idx.extend(perm[:k].tolist())
        train_idx.extend(perm[k:].tolist())
    return sorted(train_idx), sorted(val_idx)


def epoch_time(epoch: int, total: int) -> float:
    """Map epoch index 0..total-1 onto warm-up time 0..total."""
    if total <= 1:
        return float(total)
    return epoch * total / (total - 1)


def _batches(order, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _stream_tensors(streams: list[Stream], optims: list[AdamW]) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for i, (stream, opt) in enumerate(zip(streams, optims)):
        for name, p in stream.parameters().items():
            tensors[f"s{i}.{name}"] = p.data
        for name, arr in opt.m.items():
            tensors[f"opt{i}.m.{name}"] = arr
        for name, arr in opt.v.items():
            tensors[f"opt{i}.v.{name}"] = arr
    return tensors


def _restore_stream_tensors(streams: list[Stream], optims: list[AdamW], tensors: dict) -> None:
    for i, (stream, opt) in enumerate(zip(streams, optims)):
        for name, p in stream.parameters().items():
            p.data = np.asarray(tensors[f"s{i}.{name}"], dtype=p.data.dtype).reshape(p.data.shape).copy()
        opt.load_state_dict({
            "step_count": opt.step_count,  # overwritten by caller via opt_steps
            "m": {name: tensors[f"opt{i}.m.{name}"] for name in opt.m},
            "v": {name: tensors[f"opt{i}.v.{name}"] for name in opt.v},
        })


def _val_scores(streams, manifest, indices, ens_cfg, batch_size):
    scores, labels = [], []
    for chunk in _batches(indices, batch_size):
        batch = load_weak_batch(manifest, chunk)
        s, _ = infer(streams, batch.images, ens_cfg)
        scores.extend(float(v) for v in s)
        labels.extend(float(v) for v in batch.labels)
    return np.asarray(scores), np.asarray(labels)


def train(cfg: RunConfig, manifest_path, out_dir, resume=None, quiet: bool = True,
          stop_after: int | None = None) -> TrainResult:
    """Run the weakly supervised loop; see RunConfig for every knob.

    ``stop_after`` ends the run after that many epochs while keeping the
    full schedule (warm-up, lr decay) of ``cfg.epochs``, emulating an
    interrupted run that can be resumed bitwise from ``last.ckpt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    log_path = out / "log.jsonl"

    manifest = manifest_path if isinstance(manifest_path, DatasetManifest) else load_manifest(manifest_path)

    start_epoch = 0
    best_val = float("-inf")
    best_epoch = -1
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        cfg = RunConfig.from_dict(ckpt.config)  # resume must continue the original run exactly
    T.set_default_dtype(np.float32 if cfg.precision == "float32" else np.float64)

    master = np.random.default_rng(cfg.seed)
    streams = build_streams(cfg.fusion, master, image_size=cfg.image_size,
                            embed_hidden=cfg.embed_hidden, embed_dim=cfg.embed_dim,
                            kinds=cfg.streams)
    ens_cfg = cfg.ensemble()
    scale_channels = (streams[0].model.spec.channels[0] if cfg.volume_scale == "tap"
                      else cfg.embed_dim)
    ens_cfg.volume_scale_channels = scale_channels
    fusion = FusionMode(cfg.fusion)
    ipc_mode = IpcMode(cfg.ipc_mode)
    msc_on = (cfg.lambda_msc > 0 and fusion is FusionMode.LATE and len(streams) > 1)
    if fusion is FusionMode.EARLY and ipc_mode is IpcMode.ENSEMBLE:
        ipc_mode = IpcMode.NONE  # cross-stream supervision has no meaning for one fused stream
    ipc_on = cfg.lambda_ipc > 0 and ipc_mode is not IpcMode.NONE
    grid = cfg.image_size // 4

    def trainable(stream):
        params = stream.parameters()
        if not ipc_on:  # embedding heads receive gradients only through IPC
            params = {k: v for k, v in params.items()
                      if not k.startswith(("phi1.", "phi2."))}
        return params

    optims = [AdamW(trainable(s), lr=cfg.lr, weight_decay=cfg.weight_decay) for s in streams]

    labels_all = np.asarray([r.label for r in manifest.records])
    train_idx, val_idx = stratified_split(labels_all, cfg.val_fraction, cfg.seed)

    if ckpt is not None:
        _restore_stream_tensors(streams, optims, ckpt.tensors)
        for opt, steps in zip(optims, ckpt.opt_steps):
            opt.step_count = steps
        master.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch
        best_val = ckpt.best_val_auc
        best_epoch = ckpt.best_epoch

    log_mode = "a" if (resume is not None and log_path.exists()) else "w"
    log_f = open(log_path, log_mode)
    if log_mode == "w":
        log_f.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
        log_f.flush()

    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    last_losses: dict = {}
    try:
        for epoch in range(start_epoch, end_epoch):
            wall = time.monotonic()
            lr = cfg.lr_at_epoch(epoch)
            for opt in optims:
                opt.lr = lr
            t = epoch_time(epoch, cfg.epochs)
            w = warmup_weight(t, cfg.epochs)

            order = [train_idx[j] for j in master.permutation(len(train_idx))]
            sums = {"total": 0.0, "acls": 0.0, "msc": 0.0, "ipc": 0.0}
            n_batches = 0
            for chunk in _batches(order, cfg.batch_size):
                batch = load_weak_batch(manifest, chunk)
                images = augment(batch.images, master, train=True, pad=cfg.augment_pad)
                outs = [s.model.forward(s.source(images)) for s in streams]

                terms = []
                for o in outs:
                    score = pool(o.prediction_map, ens_cfg.pooling)
                    terms.append({"acls": T.bce(batch.labels, score)})

                pseudo = None
                if msc_on or (ipc_on and ipc_mode is IpcMode.ENSEMBLE):
                    ens = ensemble_map([o.prediction_map for o in outs], ens_cfg.weights)
                    pseudo = pseudo_gt(ens, cfg.threshold)
                if msc_on:
                    for o, term in zip(outs, terms):
                        term["msc"] = msc_loss(pseudo, o.prediction_map)
                if ipc_on:
                    for o, term in zip(outs, terms):
                        if ipc_mode is IpcMode.ENSEMBLE:
                            target_map = pseudo
                        else:
                            target_map = binarize(o.prediction_map.data, cfg.threshold)
                        vol = consistency_volume(o.embed1, o.embed2, scale_channels)
                        term["ipc"] = ipc_loss(target_volume(target_map, grid, grid), vol)

                loss = total_loss(terms, t, ens_cfg)
                T.backward(loss)
                for stream, opt in zip(streams, optims):
                    opt.step()
                    stream.project()

                n_batches += 1
                sums["total"] += float(loss.data)
                sums["acls"] += float(np.mean([float(tm["acls"].data) for tm in terms]))
                if msc_on:
                    sums["msc"] += float(np.mean([float(tm["msc"].data) for tm in terms]))
                if ipc_on:
                    sums["ipc"] += float(np.mean([float(tm["ipc"].data) for tm in terms]))

            means = {k: (v / n_batches if n_batches else 0.0) for k, v in sums.items()}
            val_auc = None
            if val_idx:
                scores, vlabels = _val_scores(streams, manifest, val_idx, ens_cfg, cfg.batch_size)
                if len(set(vlabels.tolist())) > 1:
                    val_auc = roc_auc(scores, vlabels)

            entry = {
                "epoch": epoch,
                "lr": lr,
                "t": t,
                "warmup": w,
                "loss_total": means["total"],
                "loss_acls": means["acls"],
                "loss_msc": means["msc"] if msc_on else None,
                "loss_ipc": means["ipc"] if ipc_on else None,
                "val_auc": val_auc,
            }
            log_f.write(json.dumps(entry, sort_keys=True) + "\n")
            log_f.flush()
            if not quiet:
                print(f"epoch {epoch}: loss {means['total']:.4f} val_auc {val_auc} "
                      f"({time.monotonic() - wall:.1f}s)")
            last_losses = means

            improved = val_auc is not None and val_auc > best_val
            if improved:
                best_val = val_auc
                best_epoch = epoch
            state = dict(config=cfg.to_dict(), epoch=epoch + 1,
                         tensors=_stream_tensors(streams, optims),
                         opt_steps=[o.step_count for o in optims],
                         rng_state=master.bit_generator.state,
                         best_val_auc=best_val, best_epoch=best_epoch)
            save_checkpoint(last_path, **state)
            # with no validation signal, "best" tracks the latest state
            if improved or (best_epoch == -1 and val_auc is None):
                save_checkpoint(best_path, **state)
    finally:
        log_f.close()
    return TrainResult(
        out_dir=out,
        epochs_run=max(0, end_epoch - start_epoch),
        best_val_auc=best_val,
        best_epoch=best_epoch,
        best_path=best_path,
        last_path=last_path,
        log_path=log_path,
        final_losses=last_losses,
    )


def restore_streams(ckpt_path):
    """Rebuild streams + config from a checkpoint (for eval and sweeps)."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = RunConfig.from_dict(ckpt.config)
    T.set_default_dtype(np.float32 if cfg.precision == "float32" else np.float64)
    rng = np.random.default_rng(cfg.seed)
    streams = build_streams(cfg.fusion, rng, image_size=cfg.image_size,
                            embed_hidden=cfg.embed_hidden, embed_dim=cfg.embed_dim,
                            kinds=cfg.streams)
    for i, stream in enumerate(streams):
        for name, p in stream.parameters().items():
            p.data = np.asarray(ckpt.tensors[f"s{i}.{name}"], dtype=p.data.dtype).reshape(p.data.shape).copy()
    return streams, cfg, ckpt
