"""2-D convolution with a fixed, reproducible accumulation order.

The forward pass accumulates, for every output element, the products over
input channel, kernel row and kernel column in exactly that nesting order,
starting from zero and adding the bias last.  Two calls that differ only
in trailing all-zero input channels, or in the number of output channels,
therefore produce bitwise-identical values where they overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigurationError, ShapeError, StateError
from .tensor import Tensor, _make

__all__ = ["Kernel4", "ConvContext", "conv2d_raw", "conv2d_backward", "conv2d_forward"]


@dataclass
class Kernel4:
    """Convolution weight ``(out_c, in_c, k, k)`` with optional bias ``(out_c,)``."""

    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        shape = self.weight.shape
        if len(shape) != 4 or shape[2] != shape[3]:
            raise ShapeError(f"kernel must be (out_c, in_c, k, k), got {shape}")
        if shape[2] < 1 or shape[2] % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd and >= 1, got {shape[2]}")
        if self.bias is not None and self.bias.shape != (shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_c={shape[0]}")

    @property
    def out_c(self) -> int:
        return self.weight.shape[0]

    @property
    def in_c(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


@dataclass
class ConvContext:
    """Forward state needed by :func:`conv2d_backward`."""

    x_padded: np.ndarray
    weight: np.ndarray
    has_bias: bool
    stride: int
    padding: int
    input_shape: tuple[int, int, int, int]


@numba.njit(cache=True)
def _conv_forward_unit_stride(xp, w, b, has_bias, ho, wo):
    n_batch, c_in = xp.shape[0], xp.shape[1]
    d_out, k = w.shape[0], w.shape[2]
    out = np.zeros((n_batch, d_out, ho, wo), dtype=xp.dtype)
    for n in range(n_batch):
        for d in range(d_out):
            acc = out[n, d]
            for c in range(c_in):
                for m in range(k):
                    for q in range(k):
                        wv = w[d, c, m, q]
                        for i in range(ho):
                            src = xp[n, c, i + m, q : q + wo]
                            dst = acc[i]
                            for j in range(wo):
                                dst[j] += src[j] * wv
            if has_bias:
                bv = b[d]
                for i in range(ho):
                    for j in range(wo):
                        acc[i, j] += bv
    return out


@numba.njit(cache=True)
def _conv_forward_kernel(xp, w, b, has_bias, stride, ho, wo):
    n_batch, c_in = xp.shape[0], xp.shape[1]
    d_out, k = w.shape[0], w.shape[2]
    out = np.zeros((n_batch, d_out, ho, wo), dtype=xp.dtype)
    for n in range(n_batch):
        for d in range(d_out):
            acc = out[n, d]
            for c in range(c_in):
                for m in range(k):
                    for q in range(k):
                        wv = w[d, c, m, q]
                        for i in range(ho):
                            row = i * stride + m
                            for j in range(wo):
                                acc[i, j] += xp[n, c, row, j * stride + q] * wv
            if has_bias:
                bv = b[d]
                for i in range(ho):
                    for j in range(wo):
                        acc[i, j] += bv
    return out


def _output_dims(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if h + 2 * padding - k < 0 or w + 2 * padding - k < 0 or ho < 1 or wo < 1:
        raise ConfigurationError(
            f"non-positive output dims for input {h}x{w}, k={k}, stride={stride}, padding={padding}"
        )
    return ho, wo


def conv2d_raw(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
               stride: int = 1, padding: int = 0) -> tuple[np.ndarray, ConvContext]:
    """Array-level convolution; returns the output and its backward context."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input shape {x.shape} incompatible with kernel shape {weight.shape}")
    dtype = np.result_type(x.dtype, weight.dtype)
    k = weight.shape[2]
    ho, wo = _output_dims(x.shape[2], x.shape[3], k, stride, padding)
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = np.ascontiguousarray(weight, dtype=dtype)
    has_bias = bias is not None
    b = np.ascontiguousarray(bias, dtype=dtype) if has_bias else np.zeros(w.shape[0], dtype)
    if stride == 1:
        out = _conv_forward_unit_stride(xp, w, b, has_bias, ho, wo)
    else:
        out = _conv_forward_kernel(xp, w, b, has_bias, stride, ho, wo)
    ctx = ConvContext(xp, w, has_bias, stride, padding, tuple(x.shape))
    return out, ctx


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d_backward(grad_out: np.ndarray, ctx: ConvContext | None):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_raw`.

    ``grad_b`` is ``None`` when the forward pass had no bias.
    """
    if ctx is None:
        raise StateError("conv2d_backward called without a saved forward context")
    n, _, ho, wo = grad_out.shape
    d, c, k, _ = ctx.weight.shape
    expected = (ctx.input_shape[0], d)
    if grad_out.shape[:2] != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected + (ho, wo)}")
    s, p = ctx.stride, ctx.padding
    g = grad_out.astype(ctx.weight.dtype, copy=False)
    cols = _windows(ctx.x_padded, k, s, ho, wo)
    grad_w = np.einsum("ndij,ncijmq->dcmq", g, cols, optimize=True)
    gcols = np.einsum("ndij,dcmq->ncmqij", g, ctx.weight, optimize=True)
    gxp = np.zeros_like(ctx.x_padded)
    for m in range(k):
        for q in range(k):
            gxp[:, :, m : m + (ho - 1) * s + 1 : s, q : q + (wo - 1) * s + 1 : s] += gcols[:, :, m, q]
    h, w = ctx.input_shape[2], ctx.input_shape[3]
    grad_x = gxp[:, :, p : p + h, p : p + w]
    grad_b = g.sum(axis=(0, 2, 3)) if ctx.has_bias else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d_forward(x: Tensor, kernel: Kernel4, stride: int = 1, padding: int = 0) -> Tensor:
    """Differentiable convolution of ``x`` ``(n, c, h, w)`` with ``kernel``.

    Out-of-range reads are zero.  Raises :class:`ShapeError` when
    ``x`` has a channel count different from ``kernel.in_c``.
    """
    if x.ndim != 4 or x.shape[1] != kernel.in_c:
        raise ShapeError(f"input shape {x.shape} incompatible with kernel shape {kernel.weight.shape}")
    bias = kernel.bias
    out, ctx = conv2d_raw(x.data, kernel.weight.data, None if bias is None else bias.data, stride, padding)
    parents = (x, kernel.weight) if bias is None else (x, kernel.weight, bias)

    def backward(g):
        gx, gw, gb = conv2d_backward(g, ctx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, backward, "conv2d")
