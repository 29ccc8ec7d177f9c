"""One detector stream: small CNN -> per-pixel manipulation probability map.

Geometry (input H x W, H and W divisible by 8):
  block 1: 3x3 conv stride 2 + group norm + relu, then 2x2 avg pool  -> H/4, 16 ch
           (the feature tap and the two embedding heads live here)
  block 2: 3x3 conv stride 2 + group norm + relu                     -> H/8, 32 ch
  block 3: 3x3 conv stride 1 + group norm + relu                     -> H/8, 64 ch
  block 4: 3x3 conv stride 1 + group norm + relu                     -> H/8, 64 ch
  head:    1x1 conv + clamped sigmoid + bilinear upsample to H x W

Each embedding head is a two-layer MLP applied at every tap location.
Streams never share parameters; construct one model per stream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sources import (BayarKernel, SourceKind, SrmBank, bayar_project, init_bayar_kernel,
                      make_source, srm_kernel_bank)
from .tensor import Tensor

GN_EPS = 1e-5

EARLY_FUSED = "early"  # pseudo-kind for the single fused stream
EARLY_IN_CHANNELS = 9


@dataclass
class StreamSpec:
    in_channels: int = 3
    channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    norm_groups: int = 8
    embed_hidden: int = 64
    embed_dim: int = 32
    image_size: int | None = None  # when set, forward rejects other sizes


@dataclass
class StreamOutput:
    prediction_map: Tensor  # (N, H, W), values in (0,1)
    tap: Tensor             # (N, C1, H/4, W/4)
    embed1: Tensor          # (N, H/4, W/4, D)
    embed2: Tensor          # (N, H/4, W/4, D)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = GN_EPS) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = T.reshape(x, (n, groups, (c // groups) * h * w))
    mu = T.reduce_mean(xg, axis=2, keepdims=True)
    xc = T.sub(xg, mu)
    var = T.reduce_mean(T.mul(xc, xc), axis=2, keepdims=True)
    xn = T.div(xc, T.sqrt(T.add(var, T.as_tensor(eps, like=x))))
    xn = T.reshape(xn, (n, c, h, w))
    g = T.reshape(gamma, (1, c, 1, 1))
    b = T.reshape(beta, (1, c, 1, 1))
    return T.add(T.mul(xn, g), b)


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / (cin * k * k))
    w = rng.standard_normal((cout, cin, k, k)) * std
    return Tensor(w.astype(dtype), requires_grad=True, dtype=dtype)


def _kaiming_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    w = rng.standard_normal((fan_in, fan_out)) * std
    return Tensor(w.astype(dtype), requires_grad=True, dtype=dtype)


class StreamModel:
    """Holds the parameter dict and the pure forward pass for one stream."""

    def __init__(self, spec: StreamSpec, rng: np.random.Generator, dtype=None):
        self.spec = spec
        dt = np.dtype(dtype) if dtype is not None else T.default_dtype()
        c1, c2, c3, c4 = spec.channels
        p: dict[str, Tensor] = {}

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dt), requires_grad=True, dtype=dt)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dt), requires_grad=True, dtype=dt)

        p["conv1.w"] = _kaiming_conv(rng, c1, spec.in_channels, 3, dt)
        p["gn1.g"], p["gn1.b"] = ones(c1), zeros(c1)
        p["conv2.w"] = _kaiming_conv(rng, c2, c1, 3, dt)
        p["gn2.g"], p["gn2.b"] = ones(c2), zeros(c2)
        p["conv3.w"] = _kaiming_conv(rng, c3, c2, 3, dt)
        p["gn3.g"], p["gn3.b"] = ones(c3), zeros(c3)
        p["conv4.w"] = _kaiming_conv(rng, c4, c3, 3, dt)
        p["gn4.g"], p["gn4.b"] = ones(c4), zeros(c4)
        p["head.w"] = _kaiming_conv(rng, 1, c4, 1, dt)
        p["head.b"] = zeros(1)
        for name in ("phi1", "phi2"):
            p[f"{name}.w1"] = _kaiming_linear(rng, c1, spec.embed_hidden, dt)
            p[f"{name}.b1"] = zeros(spec.embed_hidden)
            p[f"{name}.w2"] = _kaiming_linear(rng, spec.embed_hidden, spec.embed_dim, dt)
            p[f"{name}.b2"] = zeros(spec.embed_dim)
        self.params = p

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _embed(self, which: str, tap: Tensor) -> Tensor:
        n, c, hh, ww = tap.shape
        p = self.params
        x = T.reshape(T.transpose(tap, (0, 2, 3, 1)), (n, hh * ww, c))
        h = T.relu(T.add(T.matmul(x, p[f"{which}.w1"]), p[f"{which}.b1"]))
        e = T.add(T.matmul(h, p[f"{which}.w2"]), p[f"{which}.b2"])
        return T.reshape(e, (n, hh, ww, self.spec.embed_dim))

    def forward(self, x: Tensor) -> StreamOutput:
        if x.ndim != 4:
            raise ValueError(f"forward expects (N,C,H,W) input, got shape {x.shape}")
        n, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ValueError(f"forward: input has {c} channels, model expects {self.spec.in_channels}")
        if self.spec.image_size is not None and (h, w) != (self.spec.image_size, self.spec.image_size):
            raise ValueError(
                f"forward: input is {h}x{w}, model is configured for "
                f"{self.spec.image_size}x{self.spec.image_size}"
            )
        if h % 8 or w % 8:
            raise ValueError(f"forward: spatial dims must be divisible by 8, got {h}x{w}")
        p = self.params
        g = self.spec.norm_groups

        h1 = T.relu(group_norm(T.conv2d(x, p["conv1.w"], stride=2, padding=1), p["gn1.g"], p["gn1.b"], g))
        tap = T.avg_pool2(h1)  # H/4, the feature tap
        h2 = T.relu(group_norm(T.conv2d(tap, p["conv2.w"], stride=2, padding=1), p["gn2.g"], p["gn2.b"], g))
        h3 = T.relu(group_norm(T.conv2d(h2, p["conv3.w"], stride=1, padding=1), p["gn3.g"], p["gn3.b"], g))
        h4 = T.relu(group_norm(T.conv2d(h3, p["conv4.w"], stride=1, padding=1), p["gn4.g"], p["gn4.b"], g))
        logits = T.add(T.conv2d(h4, p["head.w"], stride=1, padding=0),
                       T.reshape(p["head.b"], (1, 1, 1, 1)))
        prob = T.sigmoid(logits)
        pred = T.upsample_bilinear(prob, h, w)
        return StreamOutput(
            prediction_map=T.reshape(pred, (n, h, w)),
            tap=tap,
            embed1=self._embed("phi1", tap),
            embed2=self._embed("phi2", tap),
        )


class Stream:
    """A source transform bound to its own (unshared) model.

    ``kind`` is one of the three source kinds, or "early" for the fused
    single-stream variant whose input is all three sources concatenated
    along channels.
    """

    def __init__(self, kind, model: StreamModel, bayar: BayarKernel | None = None,
                 bank: SrmBank | None = None):
        self.kind = kind if kind == EARLY_FUSED else SourceKind(kind)
        self.model = model
        self.bayar = bayar
        self.bank = bank
        if self._needs_bayar() and bayar is None:
            raise ValueError(f"stream kind {kind!r} requires a Bayar kernel")

    def _needs_bayar(self) -> bool:
        return self.kind in (SourceKind.BAYAR, EARLY_FUSED)

    def source(self, images) -> Tensor:
        if self.kind == EARLY_FUSED:
            parts = [
                make_source(images, SourceKind.RGB),
                make_source(images, SourceKind.SRM, bank=self.bank),
                make_source(images, SourceKind.BAYAR, bayar=self.bayar),
            ]
            return T.concat(parts, axis=1)
        return make_source(images, self.kind, bank=self.bank, bayar=self.bayar)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.model.params)
        if self.bayar is not None:
            params["bayar.w"] = self.bayar.weights
        return params

    def project(self) -> None:
        """Restore the constrained-conv invariant (call after optimizer steps)."""
        if self.bayar is not None:
            bayar_project(self.bayar)


def build_streams(fusion: str, rng: np.random.Generator, *, image_size: int | None = None,
                  embed_hidden: int = 64, embed_dim: int = 32,
                  kinds=(SourceKind.RGB, SourceKind.SRM, SourceKind.BAYAR)) -> list[Stream]:
    """Fresh streams for a training run: one per kind for late fusion, one
    9-channel stream for early fusion. Draw order is fixed for determinism."""
    bank = srm_kernel_bank(dtype=T.default_dtype())
    if fusion == "early":
        bayar = init_bayar_kernel(rng)
        spec = StreamSpec(in_channels=EARLY_IN_CHANNELS, embed_hidden=embed_hidden,
                          embed_dim=embed_dim, image_size=image_size)
        return [Stream(EARLY_FUSED, StreamModel(spec, rng), bayar=bayar, bank=bank)]
    streams = []
    for kind in (SourceKind(k) for k in kinds):
        bayar = init_bayar_kernel(rng) if kind is SourceKind.BAYAR else None
        spec = StreamSpec(in_channels=3, embed_hidden=embed_hidden,
                          embed_dim=embed_dim, image_size=image_size)
        streams.append(Stream(kind, StreamModel(spec, rng), bayar=bayar, bank=bank))
    return streams
