"""Matryoshka kernel layers: one nested convolution weight for any band count.

The input layer stores ``w_nested`` with shape ``(D, c_max, k, k)`` and
serves an input with ``c_in <= c_max`` bands through the prefix
``w_nested[:, :c_in]``.  The output layer stores ``(c_max, D, k, k)`` plus
a ``c_max`` bias and emits ``c_out`` bands through ``w_nested[:c_out]``.
Gradients only reach the sliced prefix.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .conv import Kernel4, conv2d_forward
from .errors import ArgumentError, BandOverflowError, ConfigurationError, ShapeError
from .tensor import Tensor, prefix

__all__ = [
    "MKInputLayer",
    "MKOutputLayer",
    "slice_input_kernel",
    "slice_output_kernel",
    "mk_input_forward",
    "mk_output_forward",
    "export_kernel_slabs",
    "read_kernel_slabs",
]


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _check_geometry(d: int, c_max: int, k: int, stride: int, padding: int) -> None:
    if d < 1 or c_max < 1:
        raise ConfigurationError(f"D and c_max must be >= 1, got D={d}, c_max={c_max}")
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride/padding {stride}/{padding}")


class MKInputLayer:
    """Embeds ``c_in <= c_max`` bands into ``d`` feature channels."""

    def __init__(self, d: int, c_max: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, w_nested=None, bias=None):
        padding = (k - 1) // 2 if padding is None else padding
        _check_geometry(d, c_max, k, stride, padding)
        self.d, self.c_max, self.k, self.stride, self.padding = d, c_max, k, stride, padding
        rng = np.random.default_rng() if rng is None else rng
        fan_in = c_max * k * k
        if w_nested is None:
            w_nested = _fan_in_uniform(rng, (d, c_max, k, k), fan_in)
        if bias is None:
            bias = _fan_in_uniform(rng, (d,), fan_in)
        self.w_nested = Tensor(w_nested, requires_grad=True, name="w_nested")
        self.bias = Tensor(bias, requires_grad=True, name="bias")
        if self.w_nested.shape != (d, c_max, k, k):
            raise ShapeError(f"w_nested shape {self.w_nested.shape} != {(d, c_max, k, k)}")
        if self.bias.shape != (d,):
            raise ShapeError(f"bias shape {self.bias.shape} != {(d,)}")

    def parameters(self) -> dict[str, Tensor]:
        return {"w_nested": self.w_nested, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return mk_input_forward(self, x)


class MKOutputLayer:
    """Projects ``d`` feature channels onto the first ``c_out <= c_max`` bands."""

    def __init__(self, d: int, c_max: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, w_nested=None, bias_nested=None):
        padding = (k - 1) // 2 if padding is None else padding
        _check_geometry(d, c_max, k, stride, padding)
        self.d, self.c_max, self.k, self.stride, self.padding = d, c_max, k, stride, padding
        rng = np.random.default_rng() if rng is None else rng
        fan_in = d * k * k
        if w_nested is None:
            w_nested = _fan_in_uniform(rng, (c_max, d, k, k), fan_in)
        if bias_nested is None:
            bias_nested = _fan_in_uniform(rng, (c_max,), fan_in)
        self.w_nested = Tensor(w_nested, requires_grad=True, name="w_nested")
        self.bias_nested = Tensor(bias_nested, requires_grad=True, name="bias_nested")
        if self.w_nested.shape != (c_max, d, k, k):
            raise ShapeError(f"w_nested shape {self.w_nested.shape} != {(c_max, d, k, k)}")
        if self.bias_nested.shape != (c_max,):
            raise ShapeError(f"bias_nested shape {self.bias_nested.shape} != {(c_max,)}")

    def parameters(self) -> dict[str, Tensor]:
        return {"w_nested": self.w_nested, "bias_nested": self.bias_nested}

    def __call__(self, y: Tensor, c_out: int) -> Tensor:
        return mk_output_forward(self, y, c_out)


def slice_input_kernel(layer: MKInputLayer, c_in: int) -> Kernel4:
    """Kernel for a ``c_in``-band input: ``w_nested[:, :c_in]`` with the full bias."""
    if not 1 <= c_in <= layer.c_max:
        raise ArgumentError(f"c_in={c_in} outside [1, c_max={layer.c_max}]")
    if c_in == layer.c_max:
        return Kernel4(layer.w_nested, layer.bias)
    return Kernel4(prefix(layer.w_nested, c_in, axis=1), layer.bias)


def slice_output_kernel(layer: MKOutputLayer, c_out: int) -> Kernel4:
    if not 1 <= c_out <= layer.c_max:
        raise ArgumentError(f"c_out={c_out} outside [1, c_max={layer.c_max}]")
    if c_out == layer.c_max:
        return Kernel4(layer.w_nested, layer.bias_nested)
    return Kernel4(prefix(layer.w_nested, c_out, axis=0), prefix(layer.bias_nested, c_out, axis=0))


def mk_input_forward(layer: MKInputLayer, x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"expected an (n, c, h, w) input, got {x.shape}")
    c_in = x.shape[1]
    if c_in > layer.c_max:
        raise BandOverflowError(
            f"input has {c_in} bands but the nested kernel holds at most c_max={layer.c_max}"
        )
    kernel = slice_input_kernel(layer, c_in)
    return conv2d_forward(x, kernel, layer.stride, layer.padding)


def mk_output_forward(layer: MKOutputLayer, y: Tensor, c_out: int) -> Tensor:
    if y.ndim != 4 or y.shape[1] != layer.d:
        raise ShapeError(f"feature map {y.shape} does not have D={layer.d} channels")
    kernel = slice_output_kernel(layer, c_out)
    return conv2d_forward(y, kernel, layer.stride, layer.padding)


def export_kernel_slabs(path, layers: dict[str, MKInputLayer | MKOutputLayer]) -> int:
    """Write one CSV row per channel slab of each layer; returns the row count.

    Row format: ``layer, role, slab, v0, v1, ...`` where ``role`` is
    ``input`` or ``output`` and the values are the ``D*k*k`` weights of
    that band's slab, flattened row-major.
    """
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for name, layer in layers.items():
            w = layer.w_nested.data
            if isinstance(layer, MKInputLayer):
                role, slabs = "input", np.moveaxis(w, 1, 0)
            else:
                role, slabs = "output", w
            for idx, slab in enumerate(slabs):
                writer.writerow([name, role, idx] + [format(float(v), ".9g") for v in slab.ravel()])
                rows += 1
    return rows


def read_kernel_slabs(path) -> dict[str, np.ndarray]:
    """Parse an export back into ``{layer: (c_max, D*k*k) float32 array}``."""
    slabs: dict[str, list[tuple[int, list[float]]]] = {}
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            slabs.setdefault(row[0], []).append((int(row[2]), [float(v) for v in row[3:]]))
    return {
        name: np.array([vals for _, vals in sorted(entries)], dtype=np.float32)
        for name, entries in slabs.items()
    }
