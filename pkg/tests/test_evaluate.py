"""Evaluation-driver oracles: prediction collection, mask dumping, and the
robustness sweep's identity point (blur kernel 1 == baseline)."""
import csv
import json

import numpy as np
import pytest

from tamperkit.consistency import EnsembleConfig
from tamperkit.evaluate import (
    REPORT_FIELDS,
    RobustnessReport,
    SweepPoint,
    collect_predictions,
    evaluate_streams,
    robustness_sweep,
    write_report_json,
    write_sweep_csv,
)
from tamperkit.metrics import MetricsReport
from tamperkit.model import build_streams


@pytest.fixture(scope="module")
def streams():
    return build_streams("late", np.random.default_rng(11))


@pytest.fixture(scope="module")
def ens_cfg():
    return EnsembleConfig(pooling="avg")


def test_collect_predictions_shapes(streams, ens_cfg, tiny_manifest):
    scores, labels, maps, masks, kinds, ids = collect_predictions(
        streams, ens_cfg, tiny_manifest, batch_size=8)
    n = len(tiny_manifest.records)
    assert scores.shape == labels.shape == (n,)
    assert maps.shape == masks.shape == (n, 64, 64)
    assert len(kinds) == len(ids) == n
    assert set(np.unique(maps)) <= {0.0, 1.0}
    assert sorted(ids) == sorted(r.id for r in tiny_manifest.records)


def test_collect_predictions_batch_size_invariant(streams, ens_cfg, tiny_manifest):
    a = collect_predictions(streams, ens_cfg, tiny_manifest, batch_size=5)
    b = collect_predictions(streams, ens_cfg, tiny_manifest, batch_size=24)
    np.testing.assert_allclose(a[0], b[0], atol=1e-5)
    assert a[5] == b[5]


def test_evaluate_streams_report_and_dump(streams, ens_cfg, tiny_manifest, tmp_path):
    dump = tmp_path / "masks"
    report = evaluate_streams(streams, ens_cfg, tiny_manifest, dump_dir=dump,
                              metadata={"tag": "t"})
    assert isinstance(report, MetricsReport)
    assert 0.0 <= report.auc <= 1.0
    assert report.metadata["tag"] == "t"
    assert report.metadata["n"] == 24
    dumped = sorted(p.name for p in dump.glob("*_pred.png"))
    assert len(dumped) == 12  # tampered records only
    assert all(name.endswith("_pred.png") for name in dumped)


def test_sweep_blur_identity_point(streams, ens_cfg, tiny_manifest):
    sweep = robustness_sweep(streams, ens_cfg, tiny_manifest,
                             jpeg_grid=(90,), blur_grid=(1,))
    assert isinstance(sweep, RobustnessReport)
    keys = [p.key() for p in sweep.points]
    assert keys == ["jpeg_90", "blur_1"]
    blur1 = next(p for p in sweep.points if p.key() == "blur_1")
    base = sweep.baseline
    # kernel 1 is a bitwise no-op, so every metric matches the baseline
    for fname in REPORT_FIELDS:
        assert getattr(blur1.report, fname) == getattr(base, fname), fname
    jpeg = next(p for p in sweep.points if p.key() == "jpeg_90")
    assert jpeg.report is not None and jpeg.error is None


def test_sweep_survives_failing_point(streams, ens_cfg, tiny_manifest, monkeypatch):
    import tamperkit.evaluate as ev

    real = ev.collect_predictions
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if kwargs.get("perturbation") and kwargs["perturbation"][0] == "jpeg":
            raise ValueError("synthetic failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(ev, "collect_predictions", flaky)
    sweep = robustness_sweep(streams, ens_cfg, tiny_manifest,
                             jpeg_grid=(90,), blur_grid=(1,))
    jpeg = next(p for p in sweep.points if p.kind == "jpeg")
    assert jpeg.report is None and "synthetic failure" in jpeg.error
    blur = next(p for p in sweep.points if p.kind == "blur")
    assert blur.report is not None


def test_sweep_point_keys():
    r = MetricsReport(0, 0, 0, 0, 0, 0, 0, 0)
    assert SweepPoint("baseline", {}, r).key() == "baseline"
    assert SweepPoint("jpeg", {"quality": 50}, r).key() == "jpeg_50"
    assert SweepPoint("blur", {"kernel_size": 7}, r).key() == "blur_7"


def test_report_serialization(streams, ens_cfg, tiny_manifest, tmp_path):
    sweep = robustness_sweep(streams, ens_cfg, tiny_manifest,
                             jpeg_grid=(90,), blur_grid=(1,))
    jpath = tmp_path / "sweep.json"
    write_report_json(sweep, jpath)
    data = json.loads(jpath.read_text())
    assert set(data) == {"metadata", "baseline", "points"}
    assert len(data["points"]) == 2
    assert data["baseline"]["auc"] == sweep.baseline.auc

    cpath = tmp_path / "sweep.csv"
    write_sweep_csv(sweep, cpath, dataset="tiny")
    with open(cpath) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["dataset", "perturbation", "param", *REPORT_FIELDS, "error"]
    assert len(rows) == 4  # header + baseline + 2 points
    assert rows[1][1] == "baseline"
    assert all(r[0] == "tiny" for r in rows[1:])
    # the blur-1 row repeats the baseline metrics exactly
    assert rows[3][3:-1] == rows[1][3:-1]
