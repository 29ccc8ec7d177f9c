"""Command-line contract: exit codes, artifacts on disk, and output-root
resolution. All invocations run in-process through main()."""
import json

import numpy as np
import pytest

import tamperkit.cli as cli
from tamperkit.gradchecks import CheckResult


def run_cli(argv):
    return cli.main(argv)


# --------------------------------------------------------------- exit codes


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["--help"])
    assert exc.value.code == 0
    assert "generate" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["generate", "--out", "x", "--frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run_cli([])
    assert exc.value.code == cli.EXIT_USAGE


def test_invalid_config_value_is_usage_error(tmp_path, tiny_dataset, capsys):
    code = run_cli(["train", "--data", str(tiny_dataset), "--out", str(tmp_path / "o"),
                    "--streams", "rgb,dct", "--weights", "1,1", "--epochs", "1"])
    assert code == cli.EXIT_USAGE
    assert "stream kind" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path, capsys):
    code = run_cli(["train", "--data", str(tmp_path / "absent"),
                    "--out", str(tmp_path / "o"), "--epochs", "1"])
    assert code == cli.EXIT_IO


def test_missing_checkpoint_is_io_error(tmp_path, tiny_dataset):
    code = run_cli(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                    "--data", str(tiny_dataset), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_IO


def test_gradcheck_failure_is_numeric_error(monkeypatch, capsys):
    def fake_checks(**kwargs):
        return [CheckResult(name="mul", trials=1, max_err=1.0, tol=1e-6)]

    monkeypatch.setattr(cli, "run_op_checks", fake_checks)
    code = run_cli(["gradcheck", "--trials", "1", "--skip-composed"])
    assert code == cli.EXIT_NUMERIC
    out = capsys.readouterr()
    assert "FAIL" in out.out
    assert "numeric failure" in out.err


# ----------------------------------------------------------------- generate


def test_generate_writes_dataset_and_counts(tmp_path, capsys):
    out = tmp_path / "ds"
    code = run_cli(["generate", "--out", str(out), "--seed", "5", "--n", "3",
                    "--size", "64"])
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "6 samples" in printed
    assert "copy_move" in printed and "splice" in printed
    assert (out / "manifest.jsonl").exists()
    assert (out / "meta.json").exists()


def test_generate_same_seed_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run_cli(["generate", "--out", str(d), "--seed", "8", "--n", "2",
                        "--size", "64"]) == cli.EXIT_OK
    for p in sorted(a.rglob("*")):
        if p.is_file():
            q = b / p.relative_to(a)
            assert q.read_bytes() == p.read_bytes(), p.name


def test_generate_nonempty_dir_needs_force(tmp_path, capsys):
    out = tmp_path / "ds"
    assert run_cli(["generate", "--out", str(out), "--n", "1", "--size", "32"]) == cli.EXIT_OK
    code = run_cli(["generate", "--out", str(out), "--n", "1", "--size", "32"])
    assert code == cli.EXIT_IO  # FileExistsError maps to the I/O code
    assert run_cli(["generate", "--out", str(out), "--n", "1", "--size", "32",
                    "--force"]) == cli.EXIT_OK


def test_generate_inpaint_split(tmp_path):
    out = tmp_path / "ood"
    code = run_cli(["generate", "--out", str(out), "--n", "2", "--size", "64",
                    "--kinds", "inpaint", "--split", "ood_test", "--seed", "1"])
    assert code == cli.EXIT_OK
    meta = json.loads((out / "meta.json").read_text())
    assert meta["split"] == "ood_test"
    assert meta["counts"] == {"none": 2, "inpaint": 2}


def test_generate_bad_kind_is_usage_error(tmp_path, capsys):
    code = run_cli(["generate", "--out", str(tmp_path / "x"), "--n", "1",
                    "--size", "64", "--kinds", "morph"])
    assert code == cli.EXIT_USAGE


def test_output_root_env_resolves_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert run_cli(["generate", "--out", "nested/ds", "--n", "1", "--size", "32"]) == cli.EXIT_OK
    assert (tmp_path / "nested" / "ds" / "manifest.jsonl").exists()


def test_output_root_ignored_for_absolute_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    out = tmp_path / "abs_ds"
    assert run_cli(["generate", "--out", str(out), "--n", "1", "--size", "32"]) == cli.EXIT_OK
    assert (out / "manifest.jsonl").exists()
    assert not (tmp_path / "root").exists()


# ------------------------------------------------------- train / eval / sweep


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory, tiny_dataset):
    out = tmp_path_factory.mktemp("cli_run")
    code = run_cli(["train", "--data", str(tiny_dataset), "--out", str(out),
                    "--epochs", "1", "--batch-size", "8", "--streams", "rgb",
                    "--weights", "1", "--lambda-msc", "0", "--lambda-ipc", "0",
                    "--pooling", "max", "--seed", "4", "--quiet"])
    assert code == cli.EXIT_OK
    return out


def test_train_artifacts(cli_run, capsys):
    assert (cli_run / "best.ckpt").exists()
    assert (cli_run / "last.ckpt").exists()
    lines = (cli_run / "log.jsonl").read_text().splitlines()
    header = json.loads(lines[0])["config"]
    assert header["epochs"] == 1
    assert header["streams"] == ["rgb"]
    assert header["pooling"] == "max"
    assert len(lines) == 2


def test_eval_writes_report(cli_run, tiny_dataset, tmp_path, capsys):
    out = tmp_path / "eval"
    code = run_cli(["eval", "--checkpoint", str(cli_run / "best.ckpt"),
                    "--data", str(tiny_dataset), "--out", str(out), "--dump-masks"])
    assert code == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    for key in ("auc", "i_f1", "p_f1", "c_f1", "specificity", "sensitivity"):
        assert key in report
    assert report["metadata"]["checkpoint"].endswith("best.ckpt")
    masks = list((out / "masks").glob("*_pred.png"))
    assert len(masks) == 12
    printed = json.loads(capsys.readouterr().out)
    assert printed["auc"] == report["auc"]


def test_eval_threshold_override_validation(cli_run, tiny_dataset, tmp_path, capsys):
    code = run_cli(["eval", "--checkpoint", str(cli_run / "best.ckpt"),
                    "--data", str(tiny_dataset), "--out", str(tmp_path / "e2"),
                    "--threshold", "1.5"])
    assert code == cli.EXIT_USAGE


def test_sweep_outputs(cli_run, tiny_dataset, tmp_path, capsys):
    out = tmp_path / "sweep"
    code = run_cli(["sweep", "--checkpoint", str(cli_run / "best.ckpt"),
                    "--data", str(tiny_dataset), "--out", str(out),
                    "--jpeg-grid", "90", "--blur-grid", "1", "--dataset", "tiny"])
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "jpeg_90" in printed and "blur_1" in printed and "auc=" in printed
    data = json.loads((out / "sweep.json").read_text())
    assert len(data["points"]) == 2
    rows = (out / "sweep.csv").read_text().splitlines()
    assert len(rows) == 4  # header + baseline + jpeg_90 + blur_1
    base_cells = rows[1].split(",")
    blur_cells = rows[3].split(",")
    assert blur_cells[3:] == base_cells[3:]  # kernel 1 repeats the baseline


def test_sweep_bad_grid_is_usage_error(cli_run, tiny_dataset, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli(["sweep", "--checkpoint", str(cli_run / "best.ckpt"),
                 "--data", str(tiny_dataset), "--out", str(tmp_path / "s2"),
                 "--jpeg-grid", "90,high"])
    assert exc.value.code == cli.EXIT_USAGE


def test_resume_via_cli(cli_run, tiny_dataset, tmp_path, capsys):
    out = tmp_path / "resume_run"
    assert run_cli(["train", "--data", str(tiny_dataset), "--out", str(out),
                    "--epochs", "2", "--batch-size", "8", "--streams", "rgb",
                    "--weights", "1", "--lambda-msc", "0", "--lambda-ipc", "0",
                    "--pooling", "max", "--seed", "4", "--quiet",
                    "--stop-after", "1"]) == cli.EXIT_OK
    assert run_cli(["train", "--data", str(tiny_dataset), "--out", str(out),
                    "--resume", str(out / "last.ckpt"), "--quiet"]) == cli.EXIT_OK
    lines = (out / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3  # header + 2 epochs
    assert json.loads(lines[2])["epoch"] == 1


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_quick_pass(capsys):
    code = run_cli(["gradcheck", "--trials", "2", "--skip-composed"])
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "all" in printed and "passed" in printed
    assert "FAIL" not in printed
