"""Command-line front end: dataset generation, training, evaluation,
robustness sweeps, and gradient checks.

Exit codes: 0 success, 1 usage/validation error, 2 numeric failure,
3 I/O failure. Relative output paths resolve under $TAMPERKIT_OUTPUT_ROOT
when that variable is set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import STREAM_KINDS, RunConfig
from .consistency import FusionMode, IpcMode
from .datagen import (DEFAULT_BLUR_GRID, DEFAULT_JPEG_GRID, generate_dataset,
                      load_manifest)
from .evaluate import (evaluate_streams, robustness_sweep, write_report_json,
                       write_sweep_csv)
from .gradchecks import run_composed_check, run_op_checks
from .pooling import PoolKind
from .tensor import NumericError
from .train import restore_streams, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

OUTPUT_ROOT_ENV = "TAMPERKIT_OUTPUT_ROOT"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; remap to the usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_out(path) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return (Path(root) / p) if root else p


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / "manifest.jsonl" if p.is_dir() else p


def _comma_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _comma_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in _comma_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _comma_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in _comma_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    out = _resolve_out(args.out)
    manifest = generate_dataset(out, seed=args.seed, n_per_class=args.n,
                                size=args.size, kinds=tuple(args.kinds),
                                split=args.split, force=args.force)
    print(f"wrote {len(manifest.records)} samples to {out}")
    for kind in sorted(manifest.counts):
        print(f"  {kind}: {manifest.counts[kind]}")
    return EXIT_OK


_CONFIG_FLAGS: dict[str, dict] = {
    "image_size": dict(type=int),
    "epochs": dict(type=int),
    "batch_size": dict(type=int),
    "lr": dict(type=float),
    "lr_decay_factor": dict(type=float),
    "weight_decay": dict(type=float),
    "threshold": dict(type=float),
    "lambda_msc": dict(type=float),
    "lambda_ipc": dict(type=float),
    "streams": dict(type=_comma_list, metavar="KIND,KIND,..",
                    help=f"subset of {','.join(STREAM_KINDS)}"),
    "weights": dict(type=_comma_floats, metavar="W,W,.."),
    "ipc_mode": dict(choices=[m.value for m in IpcMode]),
    "fusion": dict(choices=[m.value for m in FusionMode]),
    "pooling": dict(choices=[k.value for k in PoolKind]),
    "seed": dict(type=int),
    "val_fraction": dict(type=float),
    "embed_hidden": dict(type=int),
    "embed_dim": dict(type=int),
    "volume_scale": dict(choices=["tap", "embed"]),
    "precision": dict(choices=["float32", "float64"]),
    "augment_pad": dict(type=int),
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for field, opts in _CONFIG_FLAGS.items():
        parser.add_argument(f"--{field.replace('_', '-')}", dest=field,
                            default=None, **opts)


def _config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k) is not None}
    return RunConfig(**overrides)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _resolve_out(args.out)
    result = train(cfg, _manifest_path(args.data), out,
                   resume=args.resume, quiet=args.quiet, stop_after=args.stop_after)
    print(f"trained {result.epochs_run} epochs; "
          f"best val AUC {result.best_val_auc:.4f} at epoch {result.best_epoch}")
    print(f"checkpoints: {result.best_path} (best), {result.last_path} (last)")
    return EXIT_OK


def cmd_eval(args) -> int:
    streams, cfg, _ = restore_streams(args.checkpoint)
    ens = cfg.ensemble()
    if args.threshold is not None:
        from dataclasses import replace
        ens = replace(ens, threshold=args.threshold)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args.data))
    report = evaluate_streams(streams, ens, manifest, batch_size=args.batch_size,
                              metadata={"config": cfg.to_dict(),
                                        "checkpoint": str(args.checkpoint)},
                              dump_dir=(out / "masks") if args.dump_masks else None)
    write_report_json(report, out / "report.json")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    streams, cfg, _ = restore_streams(args.checkpoint)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args.data))
    sweep = robustness_sweep(streams, cfg.ensemble(), manifest,
                             jpeg_grid=args.jpeg_grid, blur_grid=args.blur_grid,
                             batch_size=args.batch_size,
                             metadata={"config": cfg.to_dict(),
                                       "checkpoint": str(args.checkpoint)})
    write_report_json(sweep, out / "sweep.json")
    write_sweep_csv(sweep, out / "sweep.csv", dataset=args.dataset)
    for point in sweep.points:
        label = point.key()
        if point.error:
            print(f"{label:<12} error: {point.error}")
        else:
            print(f"{label:<12} auc={point.report.auc:.4f} "
                  f"i_f1={point.report.i_f1:.4f} p_f1={point.report.p_f1:.4f}")
    print(f"reports: {out / 'sweep.json'}, {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.dtype == "float64" else np.float32
    print(f"gradient checks: trials={args.trials} dtype={args.dtype} seed={args.seed}")
    results = run_op_checks(trials=args.trials, dtype=dtype, seed=args.seed)
    if not args.skip_composed:
        results.append(run_composed_check(seed=args.seed, dtype=dtype))
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{r.name:<{width}}  trials={r.trials:<6} max_err={r.max_err:.3e} "
              f"tol={r.tol:.0e}  {status}")
    if failures:
        raise NumericError(f"{failures} gradient check(s) exceeded tolerance")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="tamperkit",
                     description="Weakly supervised image-manipulation detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a dataset with ground-truth masks")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=100, help="samples per class")
    g.add_argument("--size", type=int, default=64, help="square image side")
    g.add_argument("--kinds", type=_comma_list, default=["copy_move", "splice"],
                   metavar="KIND,KIND,..", help="tamper kinds: copy_move,splice,inpaint")
    g.add_argument("--split", default="train")
    g.add_argument("--force", action="store_true",
                   help="allow writing into an existing non-empty directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the weakly supervised training loop")
    t.add_argument("--data", required=True, help="dataset directory or manifest path")
    t.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, default=None, metavar="E",
                   help="stop after E epochs, keeping the full schedule (resumable)")
    t.add_argument("--quiet", action="store_true")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--threshold", type=float, default=None,
                   help="override the decision threshold from the checkpoint")
    e.add_argument("--dump-masks", action="store_true",
                   help="write predicted masks as PNGs for tampered images")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="JPEG/blur robustness sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--jpeg-grid", type=_comma_ints, default=DEFAULT_JPEG_GRID,
                   metavar="Q,Q,..")
    s.add_argument("--blur-grid", type=_comma_ints, default=DEFAULT_BLUR_GRID,
                   metavar="K,K,..")
    s.add_argument("--dataset", default="synthetic", help="dataset label for the CSV")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--skip-composed", action="store_true",
                   help="skip the composed per-stream loss check")
    c.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
