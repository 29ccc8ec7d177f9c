"""Stream inputs: raw RGB, fixed residual filters, learnable constrained conv.

The fixed bank holds three classic high-pass residual kernels (first-order
horizontal, 3x3 second-order, 5x5 square), each with its integer divisor.
Residuals are computed on the [0,255] intensity scale and truncated.

The constrained ("Bayar") layer is a learnable 5x5 conv whose kernels are
re-projected after every optimizer step so that each (out, in) slice has
center weight exactly -1 and non-center weights summing to 1: on constant
inputs the response vanishes, so the layer can only express prediction
errors, i.e. noise.

Source convolutions use reflect padding so constant images map to exact
zeros all the way to the border.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SourceKind(str, Enum):
    RGB = "rgb"
    SRM = "srm"
    BAYAR = "bayar"


SRM_KERNEL_SIZE = 5
SRM_TRUNCATION = 2.0
BAYAR_KERNEL_SIZE = 5
BAYAR_DEGENERACY_EPS = 1e-8

# integer stencils; each sums to zero
_FIRST_ORDER = np.zeros((5, 5))
_FIRST_ORDER[2, 1:4] = [1, -2, 1]
_FIRST_ORDER_DIV = 2.0

_SECOND_ORDER = np.zeros((5, 5))
_SECOND_ORDER[1:4, 1:4] = [[-1, 2, -1], [2, -4, 2], [-1, 2, -1]]
_SECOND_ORDER_DIV = 4.0

_SQUARE = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)
_SQUARE_DIV = 12.0


@dataclass(frozen=True)
class SrmBank:
    """Fixed residual kernels, shape (3, Cin, k, k), plus truncation bound.

    ``raw`` holds the integer stencils and ``divisors`` their per-output
    normalizers; ``kernels`` is the normalized product. Convolving with the
    integers and scaling afterwards keeps zero-sum cancellation exact in
    floating point, so constant images map to exact zeros.
    """

    kernels: np.ndarray
    raw: np.ndarray
    divisors: np.ndarray
    truncation: float = SRM_TRUNCATION

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[-1]


def srm_kernel_bank(in_channels: int = 3, dtype=np.float32) -> SrmBank:
    """Build the fixed bank: one output channel per stencil, the stencil
    replicated across every input channel.

    Divisors carry the per-stencil normalizer times the channel count, so
    each residual equals the stencil response of the channel-mean image;
    summing un-averaged channels would triple the noise power and saturate
    the truncation rails.
    """
    stencils = [_FIRST_ORDER, _SECOND_ORDER, _SQUARE]
    divisors = np.asarray([_FIRST_ORDER_DIV, _SECOND_ORDER_DIV, _SQUARE_DIV]) * in_channels
    raw = np.zeros((3, in_channels, 5, 5), dtype=np.float64)
    for o, s in enumerate(stencils):
        raw[o, :, :, :] = s
    kernels = raw / divisors[:, None, None, None]
    return SrmBank(kernels=kernels.astype(dtype), raw=raw.astype(dtype), divisors=divisors)


def _reflect_pad(images: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")


def srm_residual(image, bank: SrmBank | None = None) -> Tensor:
    """Fixed residual maps of a [0,255]-scale image batch (N,3,H,W).

    Non-differentiable by construction: the result is a plain data tensor.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 4 or data.shape[1] != 3:
        raise ValueError(f"srm_residual expects (N,3,H,W) input, got shape {data.shape}")
    if bank is None:
        bank = srm_kernel_bank(dtype=T.default_dtype())
    kern = bank.raw.astype(data.dtype, copy=False)
    pad = bank.kernel_size // 2
    with T.no_grad():
        x = Tensor(_reflect_pad(data, pad), dtype=data.dtype)
        out = T.conv2d(x, Tensor(kern, dtype=data.dtype), stride=1, padding=0)
    scale = (1.0 / bank.divisors).astype(data.dtype).reshape(1, -1, 1, 1)
    res = np.clip(out.data * scale, -bank.truncation, bank.truncation)
    return Tensor(res, requires_grad=False, dtype=data.dtype)


@dataclass
class BayarKernel:
    """Learnable constrained conv weights (Cout, Cin, k, k)."""

    weights: Tensor

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[-1]


def init_bayar_kernel(rng: np.random.Generator, out_channels: int = 3, in_channels: int = 3,
                      kernel_size: int = BAYAR_KERNEL_SIZE, dtype=None) -> BayarKernel:
    dt = dtype if dtype is not None else T.default_dtype()
    w = rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * 0.1
    kernel = BayarKernel(weights=Tensor(w.astype(dt), requires_grad=True, dtype=dt))
    return bayar_project(kernel)

def bayar_project(kernel: BayarKernel) -> BayarKernel:
    """Restore the constraint in place: per (out, in) slice, center = -1 and
    non-center weights rescaled to sum to 1.

    A slice whose non-center sum is smaller than 1e-8 in magnitude cannot be
    rescaled; its neighbors are reinitialized uniformly to 1/(k^2-1).
    Idempotent, and applied outside the gradient tape.
    """
    w = kernel.weights.data
    k = w.shape[-1]
    c = k // 2
    mask = np.ones((k, k), dtype=bool)
    mask[c, c] = False
    flat = w.reshape(-1, k, k)
    for sl in flat:
        s = float(sl[mask].sum(dtype=np.float64))
        if abs(s) < BAYAR_DEGENERACY_EPS:
            sl[mask] = 1.0 / (k * k - 1)
        else:
            sl[mask] = (sl[mask].astype(np.float64) / s).astype(w.dtype)
        sl[c, c] = -1.0
    return kernel


def bayar_response(image, kernel: BayarKernel) -> Tensor:
    """Constrained conv of a [0,255]-scale batch; differentiable w.r.t. the
    kernel (the image is treated as data)."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 4 or data.shape[1] != kernel.weights.shape[1]:
        raise ValueError(
            f"bayar_response expects (N,{kernel.weights.shape[1]},H,W) input, got shape {data.shape}"
        )
    pad = kernel.kernel_size // 2
    x = Tensor(_reflect_pad(data, pad), dtype=kernel.weights.dtype)
    return T.conv2d(x, kernel.weights, stride=1, padding=0)


def make_source(image, kind: SourceKind, *, bank: SrmBank | None = None,
                bayar: BayarKernel | None = None) -> Tensor:
    """Turn a decoded [0,255]-scale image batch into one stream's input."""
    kind = SourceKind(kind)
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if kind is SourceKind.RGB:
        return Tensor(np.asarray(data, dtype=T.default_dtype()) / np.asarray(255.0, dtype=T.default_dtype()),
                      requires_grad=False)
    if kind is SourceKind.SRM:
        return srm_residual(data, bank)
    if kind is SourceKind.BAYAR:
        if bayar is None:
            raise ValueError("make_source(kind=BAYAR) requires a BayarKernel")
        bayar_project(bayar)
        return bayar_response(data, bayar)
    raise ValueError(f"unknown source kind: {kind!r}")
