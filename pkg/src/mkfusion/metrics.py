"""Reconstruction quality indexes and the training objective.

All evaluation indexes take ``(n, bands, h, w)`` arrays (or tensors) and
compute in float64.  ``total_loss`` is differentiable and participates in
the active :class:`~mkfusion.tensor.Tape`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateBandError, ShapeError
from .tensor import Tensor, _make, absolute, as_tensor, mean, sub

__all__ = [
    "MetricsReport",
    "rmse",
    "per_band_rmse",
    "psnr",
    "sam",
    "ergas",
    "ssim",
    "ssim_tensor",
    "total_loss",
    "evaluate",
    "gaussian_window",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    b = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} != reference shape {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise ShapeError(f"expected (n, bands, h, w) arrays, got {a.shape}")
    return a, b


def rmse(pred, gt) -> float:
    """Frobenius norm of the error over ``sqrt(bands * pixels)``."""
    a, b = _arrays(pred, gt)
    d = a - b
    return float(np.linalg.norm(d.ravel()) / math.sqrt(d.size))


def per_band_rmse(pred, gt) -> np.ndarray:
    a, b = _arrays(pred, gt)
    return np.sqrt(((a - b) ** 2).mean(axis=(0, 2, 3)))


def psnr(pred, gt, peak: float = 255.0) -> float:
    """``20 log10(peak / rmse)``; ``inf`` for identical inputs."""
    err = rmse(pred, gt)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(peak / err)


def _sam_details(pred, gt) -> tuple[float, int]:
    a, b = _arrays(pred, gt)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    degenerate = (na == 0) | (nb == 0)
    ua = np.divide(a, na, out=np.zeros_like(a), where=~degenerate)
    ub = np.divide(b, nb, out=np.zeros_like(b), where=~degenerate)
    # atan2 form: exact zero for parallel spectra, accurate near 0 and 180 degrees
    angles = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=1), np.linalg.norm(ua + ub, axis=1))
    degenerate = degenerate[:, 0]
    angles[degenerate] = 0.0
    return float(np.degrees(angles.mean())), int(degenerate.sum())


def sam(pred, gt) -> float:
    """Mean per-pixel spectral angle in degrees.

    Pixels whose spectrum has zero norm contribute 0 and are still counted;
    a :class:`RuntimeWarning` reports how many there were.
    """
    value, zeros = _sam_details(pred, gt)
    if zeros:
        warnings.warn(f"SAM: {zeros} pixel(s) with a zero-norm spectrum", RuntimeWarning, stacklevel=2)
    return value


def ergas(pred, gt, scale: float) -> float:
    """``100 / scale * sqrt(mean_j (rmse_j / mu_j)^2)`` over bands ``j``."""
    if scale <= 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    a, b = _arrays(pred, gt)
    band_rmse = np.sqrt(((a - b) ** 2).mean(axis=(0, 2, 3)))
    mu = b.mean(axis=(0, 2, 3))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise DegenerateBandError(int(zero[0]))
    return float(100.0 / scale * np.sqrt(np.mean((band_rmse / mu) ** 2)))


# --- SSIM -----------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps (the 2-D window is their outer product)."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    a = np.lib.stride_tricks.sliding_window_view(a, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(a, k, axis=-1) @ g


def _filter_adjoint(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    pad = [(0, 0)] * (a.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _filter_valid(np.pad(a, pad), g[::-1])


def _window_size(h: int, w: int) -> tuple[int, bool]:
    size = min(SSIM_WINDOW, h, w)
    return size, size < SSIM_WINDOW


def _ssim_terms(x: np.ndarray, y: np.ndarray, peak: float):
    size, _ = _window_size(x.shape[-2], x.shape[-1])
    g = gaussian_window(size).astype(x.dtype)
    c1 = x.dtype.type((0.01 * peak) ** 2)
    c2 = x.dtype.type((0.03 * peak) ** 2)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    pxx, pyy, pxy = _filter_valid(x * x, g), _filter_valid(y * y, g), _filter_valid(x * y, g)
    sxx, syy, sxy = pxx - mx * mx, pyy - my * my, pxy - mx * my
    a1, a2 = 2 * mx * my + c1, 2 * sxy + c2
    b1, b2 = mx * mx + my * my + c1, sxx + syy + c2
    smap = (a1 * a2) / (b1 * b2)
    return smap, (g, mx, my, a1, a2, b1, b2)


def ssim(pred, gt, peak: float = 1.0) -> float:
    """Mean SSIM over bands (11x11 Gaussian window, sigma 1.5, valid positions).

    Images smaller than the window use a ``min(h, w)`` window and emit a
    :class:`RuntimeWarning`.
    """
    a, b = _arrays(pred, gt)
    if _window_size(a.shape[-2], a.shape[-1])[1]:
        warnings.warn(f"SSIM window shrunk to {min(a.shape[-2:])} for {a.shape[-2]}x{a.shape[-1]} images",
                      RuntimeWarning, stacklevel=2)
    smap, _ = _ssim_terms(a, b, peak)
    return float(smap.mean())


def ssim_tensor(pred: Tensor, gt, peak: float = 1.0) -> Tensor:
    """Differentiable SSIM (scalar tensor) with the gradient flowing to ``pred`` only."""
    gt = as_tensor(gt, like=pred)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ShapeError(f"prediction shape {pred.shape} != reference shape {gt.shape}")
    x, y = pred.data, gt.data
    smap, (g, mx, my, a1, a2, b1, b2) = _ssim_terms(x, y, peak)
    value = np.asarray(smap.mean(), dtype=x.dtype)

    def backward(grad):
        gs = grad / x.dtype.type(smap.size)
        denom = b1 * b2
        d_mx = 2 * my * (a2 - a1) / denom - 2 * mx * smap * (1 / b1 - 1 / b2)
        d_pxx = -smap / b2
        d_pxy = 2 * a1 / denom
        gx = (_filter_adjoint(gs * d_mx, g)
              + 2 * x * _filter_adjoint(gs * d_pxx, g)
              + y * _filter_adjoint(gs * d_pxy, g))
        return (gx.astype(x.dtype), None)

    return _make(value, (pred, gt), backward, "ssim")


def total_loss(pred: Tensor, gt, lam: float = 0.1, peak: float = 1.0, parts: bool = False):
    """``mean|pred - gt| + lam * (1 - SSIM(pred, gt))`` as a scalar tensor.

    With ``parts`` returns ``(loss, l1, ssim_loss)``.
    """
    if lam < 0:
        raise ArgumentError(f"lambda must be non-negative, got {lam}")
    gt = as_tensor(gt, like=pred)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != reference shape {gt.shape}")
    l1 = mean(absolute(sub(pred, gt)))
    if lam == 0:
        loss, ssim_loss = l1, Tensor(np.zeros((), dtype=pred.dtype))
    else:
        ssim_loss = sub(1.0, ssim_tensor(pred, gt, peak))
        loss = l1 + ssim_loss * lam
    return (loss, l1, ssim_loss) if parts else loss


# --- reports ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    psnr: float
    sam: float
    ergas: float
    ssim: float
    rmse: float
    per_band_rmse: np.ndarray = field(repr=False)
    zero_norm_pixels: int = 0
    ssim_window_shrunk: bool = False

    COLUMNS = ("dataset", "scale", "psnr", "sam_deg", "ergas", "ssim", "rmse")

    def csv_row(self, dataset: str, scale: float) -> list[str]:
        values = [self.psnr, self.sam, self.ergas, self.ssim, self.rmse]
        return [dataset, _fmt(scale)] + [_fmt(v) for v in values]


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def evaluate(pred, gt, scale: float, peak: float = 1.0) -> MetricsReport:
    """All indexes at once; ``peak`` is 1.0 for normalized data, 255 for 8-bit."""
    a, b = _arrays(pred, gt)
    sam_value, zeros = _sam_details(a, b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ssim_value = ssim(a, b, peak)
    return MetricsReport(
        psnr=psnr(a, b, peak),
        sam=sam_value,
        ergas=ergas(a, b, scale),
        ssim=ssim_value,
        rmse=rmse(a, b),
        per_band_rmse=per_band_rmse(a, b),
        zero_norm_pixels=zeros,
        ssim_window_shrunk=_window_size(a.shape[-2], a.shape[-1])[1],
    )
