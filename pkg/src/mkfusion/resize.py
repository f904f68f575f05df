"""Separable Keys cubic resampling on the align-corners grid.

Output sample ``o`` of an axis of length ``out_len`` reads the input at the
continuous position ``o * (in_len - 1) / (out_len - 1)`` (the centre
``(in_len - 1) / 2`` when ``out_len == 1``), so corner samples map onto
corner samples, matching :func:`mkfusion.model.normalize_coords`.

The four taps straddling a position are combined in difference form,
``x[a] + sum_k w_k (x[t_k] - x[a])`` with ``a`` the nearest tap, which
keeps constant inputs and same-size resampling exact.  Taps that fall one
sample outside the axis use Keys' boundary extrapolation
``3 x[0] - 3 x[1] + x[2]`` (linear extrapolation on two-sample axes), so
linear and quadratic ramps are reproduced up to the borders.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ArgumentError
from .tensor import Tensor, _make

__all__ = ["keys_weights", "resample_matrix", "bicubic_resize"]

KEYS_A = -0.5


def keys_weights(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Weights of the taps at offsets ``-1, 0, 1, 2`` for fractional position ``t``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    dist = np.abs(t - np.array([-1.0, 0.0, 1.0, 2.0]))
    near = ((a + 2) * dist - (a + 3)) * dist * dist + 1
    far = ((a * dist - 5 * a) * dist + 8 * a) * dist - 4 * a
    return np.where(dist <= 1, near, np.where(dist < 2, far, 0.0))


@lru_cache(maxsize=256)
def _plan(in_len: int, out_len: int):
    """Tap indices into the ghost-padded axis, weights, and anchor per output."""
    if out_len == 1:
        pos = np.array([(in_len - 1) / 2.0])
    else:
        pos = np.arange(out_len, dtype=np.float64) * (in_len - 1) / (out_len - 1)
    if in_len == 1:
        base = np.zeros(out_len, dtype=np.intp)
        frac = np.zeros(out_len)
    else:
        base = np.minimum(np.floor(pos).astype(np.intp), in_len - 2)
        frac = pos - base
    weights = keys_weights(frac)
    # padded index = input index + 1; taps are base-1 .. base+2
    taps = base[:, None] + np.arange(4)[None, :]
    anchor = base + 1 + (frac >= 0.5)
    if in_len == 1:
        taps = np.ones((out_len, 4), dtype=np.intp)
        anchor = np.ones(out_len, dtype=np.intp)
    return taps, weights, anchor


def _ghost_coeffs(in_len: int) -> tuple[dict[int, float], dict[int, float]]:
    if in_len >= 3:
        return {0: 3.0, 1: -3.0, 2: 1.0}, {in_len - 1: 3.0, in_len - 2: -3.0, in_len - 3: 1.0}
    if in_len == 2:
        return {0: 2.0, 1: -1.0}, {1: 2.0, 0: -1.0}
    return {0: 1.0}, {0: 1.0}


def _pad_ghosts(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    take = lambda i: np.take(x, [i], axis=axis)  # noqa: E731
    if n >= 3:
        left = 3 * take(0) - 3 * take(1) + take(2)
        right = 3 * take(n - 1) - 3 * take(n - 2) + take(n - 3)
    elif n == 2:
        left = 2 * take(0) - take(1)
        right = 2 * take(1) - take(0)
    else:
        left = right = take(0)
    return np.concatenate([left, x, right], axis=axis)


def _resize_axis(x: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = x.shape[axis]
    if in_len == out_len:
        return x.copy()
    taps, weights, anchor = _plan(in_len, out_len)
    xp = np.moveaxis(_pad_ghosts(x, axis), axis, -1)
    w = weights.astype(x.dtype)
    base = xp[..., anchor]
    out = base.copy()
    for k in range(4):
        out += w[:, k] * (xp[..., taps[:, k]] - base)
    return np.moveaxis(out, -1, axis)


@lru_cache(maxsize=256)
def resample_matrix(in_len: int, out_len: int) -> np.ndarray:
    """Dense ``(out_len, in_len)`` matrix of the 1-D resampling map (float64)."""
    if in_len == out_len:
        return np.eye(in_len)
    taps, weights, _ = _plan(in_len, out_len)
    left, right = _ghost_coeffs(in_len)
    mat = np.zeros((out_len, in_len))
    for o in range(out_len):
        for k in range(4):
            p = taps[o, k]
            if p == 0:
                for i, c in left.items():
                    mat[o, i] += weights[o, k] * c
            elif p == in_len + 1:
                for i, c in right.items():
                    mat[o, i] += weights[o, k] * c
            else:
                mat[o, p - 1] += weights[o, k]
    return mat


def bicubic_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample the spatial axes of ``x`` ``(n, c, h, w)`` to ``(out_h, out_w)``."""
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"target dims must be positive, got {out_h}x{out_w}")
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ArgumentError(f"bicubic_resize needs a non-empty (n, c, h, w) tensor, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out = _resize_axis(_resize_axis(x.data, out_h, 2), out_w, 3)

    def backward(g):
        mh = resample_matrix(h, out_h).astype(g.dtype)
        mw = resample_matrix(w, out_w).astype(g.dtype)
        return (np.einsum("ncij,ia,jb->ncab", g, mh, mw, optimize=True),)

    return _make(out, (x,), backward, "bicubic_resize")
