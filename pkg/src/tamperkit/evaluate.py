"""Evaluation driver: score a trained model on a manifest, build metric
reports, dump predicted masks, and run robustness sweeps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .consistency import EnsembleConfig, infer
from .datagen import (DEFAULT_BLUR_GRID, DEFAULT_JPEG_GRID, DatasetManifest, load_eval_batch,
                      load_manifest, perturb)
from .metrics import MetricsReport, compute_report


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield list(range(i, min(i + size, n)))


def collect_predictions(streams, ens_cfg: EnsembleConfig, manifest: DatasetManifest,
                        batch_size: int = 16, perturbation=None):
    """Run inference over a whole manifest.

    Returns (scores, labels, binary_maps, gt_masks, kinds, ids). When
    ``perturbation`` is (kind, params), each image is perturbed before
    scoring; ground-truth masks are never perturbed.
    """
    scores, labels, maps, masks, kinds, ids = [], [], [], [], [], []
    for chunk in _batches(len(manifest.records), batch_size):
        batch = load_eval_batch(manifest, chunk)
        images = batch.images
        if perturbation is not None:
            kind, params = perturbation
            hwc = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
            hwc = np.stack([perturb(np.round(im).astype(np.uint8), kind, **params) for im in hwc])
            images = np.ascontiguousarray(hwc.transpose(0, 3, 1, 2).astype(np.float32))
        s, binmap = infer(streams, images, ens_cfg)
        scores.extend(float(v) for v in s)
        labels.extend(float(v) for v in batch.labels)
        maps.append(binmap)
        masks.append(batch.masks)
        kinds.extend(batch.kinds)
        ids.extend(batch.ids)
    return (np.asarray(scores), np.asarray(labels), np.concatenate(maps),
            np.concatenate(masks), kinds, ids)


def evaluate_streams(streams, ens_cfg: EnsembleConfig, manifest, *, batch_size: int = 16,
                     metadata: dict | None = None, dump_dir=None) -> MetricsReport:
    """Full metric set on one manifest; optionally dump predicted masks as
    PNGs (tampered images only)."""
    man = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    scores, labels, maps, masks, kinds, ids = collect_predictions(streams, ens_cfg, man, batch_size)
    meta = {"threshold": ens_cfg.threshold, "dataset": man.split, "n": len(man.records)}
    meta.update(metadata or {})
    report = compute_report(scores, labels, maps, masks, ens_cfg.threshold, meta)
    if dump_dir is not None:
        out = Path(dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, rid in enumerate(ids):
            if labels[i] == 1:
                Image.fromarray((maps[i] * 255).astype(np.uint8)).save(out / f"{rid}_pred.png")
    return report


@dataclass
class SweepPoint:
    kind: str
    param: dict
    report: MetricsReport | None
    error: str | None = None

    def key(self) -> str:
        if self.kind == "baseline":
            return "baseline"
        val = self.param.get("quality", self.param.get("kernel_size"))
        return f"{self.kind}_{val}"


@dataclass
class RobustnessReport:
    baseline: MetricsReport
    points: list[SweepPoint]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "baseline": self.baseline.to_dict(),
            "points": [
                {
                    "kind": p.kind,
                    "param": p.param,
                    "report": p.report.to_dict() if p.report else None,
                    "error": p.error,
                }
                for p in self.points
            ],
        }


def robustness_sweep(streams, ens_cfg: EnsembleConfig, manifest, *,
                     jpeg_grid=DEFAULT_JPEG_GRID, blur_grid=DEFAULT_BLUR_GRID,
                     batch_size: int = 16, metadata: dict | None = None) -> RobustnessReport:
    """Evaluate the unperturbed baseline plus every grid point. A failing
    point records its error and the sweep continues."""
    man = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    baseline = evaluate_streams(streams, ens_cfg, man, batch_size=batch_size,
                                metadata={"perturbation": "none"})
    points: list[SweepPoint] = []
    grid = [("jpeg", {"quality": int(q)}) for q in jpeg_grid]
    grid += [("blur", {"kernel_size": int(k)}) for k in blur_grid]
    for kind, params in grid:
        try:
            scores, labels, maps, masks, _, _ = collect_predictions(
                streams, ens_cfg, man, batch_size, perturbation=(kind, params))
            meta = {"threshold": ens_cfg.threshold, "dataset": man.split,
                    "perturbation": kind, **params}
            report = compute_report(scores, labels, maps, masks, ens_cfg.threshold, meta)
            points.append(SweepPoint(kind, params, report))
        except (ValueError, OSError) as exc:
            points.append(SweepPoint(kind, params, None, error=str(exc)))
    return RobustnessReport(baseline=baseline, points=points, metadata=dict(metadata or {}))


# ------------------------------------------------------------ serialization

REPORT_FIELDS = ("auc", "specificity", "sensitivity", "i_f1",
                 "pixel_precision", "pixel_recall", "p_f1", "c_f1")


def write_report_json(report, path) -> None:
    data = report.to_dict()
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_sweep_csv(sweep: RobustnessReport, path, dataset: str = "") -> None:
    """Flat CSV: one row per (dataset, point), baseline included."""
    rows = [("baseline", {}, sweep.baseline, None)]
    rows += [(p.kind, p.param, p.report, p.error) for p in sweep.points]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dataset", "perturbation", "param", *REPORT_FIELDS, "error"])
        for kind, param, report, error in rows:
            pval = param.get("quality", param.get("kernel_size", ""))
            metric_cells = [getattr(report, fname) if report else "" for fname in REPORT_FIELDS]
            writer.writerow([dataset, kind, pval, *metric_cells, error or ""])
