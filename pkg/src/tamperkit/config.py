"""Run configuration shared by training, evaluation, and the CLI."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .consistency import EnsembleConfig, FusionMode, IpcMode
from .pooling import PoolKind

STREAM_KINDS = ("rgb", "srm", "bayar")


@dataclass
class RunConfig:
    image_size: int = 64
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    threshold: float = 0.5
    lambda_msc: float = 0.1
    lambda_ipc: float = 0.1
    streams: tuple[str, ...] = ("rgb", "srm", "bayar")
    weights: tuple[float, ...] = (1.0, 2.0, 2.0)
    ipc_mode: str = "ensemble"
    fusion: str = "late"
    pooling: str = "adaptive"
    seed: int = 0
    val_fraction: float = 0.1
    embed_hidden: int = 64
    embed_dim: int = 32
    volume_scale: str = "tap"  # denominator of the volume logits: tap channels or embed dim
    precision: str = "float32"
    augment_pad: int = 4

    def __post_init__(self):
        self.streams = tuple(self.streams)
        self.weights = tuple(float(w) for w in self.weights)
        IpcMode(self.ipc_mode)
        FusionMode(self.fusion)
        PoolKind(self.pooling)
        if self.image_size < 32 or self.image_size % 8:
            raise ValueError(f"image_size must be >= 32 and divisible by 8, got {self.image_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold}")
        if not self.streams:
            raise ValueError("streams must be non-empty")
        for s in self.streams:
            if s not in STREAM_KINDS:
                raise ValueError(f"unknown stream kind {s!r}; expected subset of {STREAM_KINDS}")
        if len(set(self.streams)) != len(self.streams):
            raise ValueError(f"duplicate stream kinds in {self.streams}")
        if len(self.weights) != len(self.streams):
            raise ValueError(
                f"{len(self.weights)} weights for {len(self.streams)} streams; they must pair up"
            )
        if any(w <= 0 for w in self.weights):
            raise ValueError(f"stream weights must be positive, got {self.weights}")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError(f"val_fraction must lie in [0,1), got {self.val_fraction}")
        if self.volume_scale not in ("tap", "embed"):
            raise ValueError(f"volume_scale must be 'tap' or 'embed', got {self.volume_scale!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be 'float32' or 'float64', got {self.precision!r}")

    @property
    def lr_decay_epoch(self) -> int:
        """The x0.1 step lands at ceil(5T/6), generalizing 50-of-60."""
        return math.ceil(5 * self.epochs / 6)

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * (self.lr_decay_factor if epoch >= self.lr_decay_epoch else 1.0)

    def effective_weights(self) -> tuple[float, ...]:
        """Per-active-stream ensemble weights (single weight for early fusion)."""
        if FusionMode(self.fusion) is FusionMode.EARLY:
            return (1.0,)
        return self.weights

    def ensemble(self) -> EnsembleConfig:
        return EnsembleConfig(
            weights=self.effective_weights(),
            threshold=self.threshold,
            lambda_msc=self.lambda_msc,
            lambda_ipc=self.lambda_ipc,
            total_epochs=self.epochs,
            ipc_mode=self.ipc_mode,
            fusion=self.fusion,
            pooling=self.pooling,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**{k: tuple(v) if k in ("streams", "weights") else v for k, v in dict(d).items()})
