"""Weakly supervised image-manipulation detection on a desk-scale budget.

Self-contained NumPy autodiff engine, three forensic input streams
(RGB, fixed high-pass residuals, constrained learnable residuals),
image-level pooled classification with map- and patch-level
self-consistency losses, a synthetic tamper dataset generator, and a
deterministic train/eval/sweep CLI.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .consistency import (EnsembleConfig, FusionMode, IpcMode, consistency_volume,
                          ensemble_map, infer, ipc_loss, msc_loss, pseudo_gt,
                          target_volume, total_loss, warmup_weight)
from .datagen import (DatasetManifest, EvalBatch, SampleRecord, WeakBatch, augment,
                      generate_dataset, load_eval_batch, load_manifest,
                      load_weak_batch, perturb, perturb_blur, perturb_jpeg)
from .evaluate import (RobustnessReport, evaluate_streams, robustness_sweep,
                       write_report_json, write_sweep_csv)
from .gradchecks import run_composed_check, run_op_checks
from .metrics import MetricsReport, combined_f1, compute_report, image_metrics, pixel_f1, roc_auc
from .model import StreamModel, StreamOutput, StreamSpec, group_norm
from .optim import AdamW
from .pooling import PoolKind, adaptive_pool, binarize, ge_mask, otsu_threshold, pool
from .sources import (BayarKernel, SourceKind, SrmBank, bayar_project, bayar_response,
                      init_bayar_kernel, make_source, srm_kernel_bank, srm_residual)
from .tensor import NumericError, Tensor, backward, grad_check, no_grad, set_default_dtype
from .train import TrainResult, restore_streams, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BayarKernel", "DatasetManifest", "EnsembleConfig", "EvalBatch",
    "FusionMode", "IpcMode", "MetricsReport", "NumericError", "PoolKind",
    "RobustnessReport", "RunConfig", "SampleRecord", "SourceKind", "SrmBank",
    "StreamModel", "StreamOutput", "StreamSpec", "Tensor", "TrainResult",
    "WeakBatch", "adaptive_pool", "augment", "backward", "bayar_project",
    "bayar_response", "binarize", "combined_f1", "compute_report",
    "consistency_volume", "ensemble_map", "evaluate_streams", "ge_mask",
    "generate_dataset", "grad_check", "group_norm", "image_metrics", "infer",
    "init_bayar_kernel", "ipc_loss", "load_checkpoint", "load_eval_batch",
    "load_manifest", "load_weak_batch", "make_source", "msc_loss", "no_grad",
    "otsu_threshold", "perturb", "perturb_blur", "perturb_jpeg", "pixel_f1",
    "pool", "pseudo_gt", "restore_streams", "robustness_sweep", "roc_auc",
    "run_composed_check", "run_op_checks", "save_checkpoint",
    "set_default_dtype", "srm_kernel_bank", "srm_residual", "target_volume",
    "total_loss", "train", "warmup_weight", "write_report_json",
    "write_sweep_csv",
]
