"""Synthetic corpora under Wald's protocol, bucketing, sampling and tensor files.

Ground-truth cubes are linear mixtures of a few smooth spectral signatures
with spatially varying, softmax-normalized abundances, so neighbouring bands
are strongly correlated and every value lies in ``[0, 1]``.  An HR cube is
degraded into the LR hyperspectral input by Gaussian anti-aliasing and
decimation, and into the HR multispectral input by a spectral response
matrix.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, ConfigurationError, FormatError, ShapeError

__all__ = [
    "FusionSample",
    "DatasetBucket",
    "synth_ground_truth",
    "anti_alias_downsample",
    "degrade_to",
    "synth_srf",
    "apply_srf",
    "wald_simulate",
    "extract_patches",
    "build_bucket",
    "sample_minibatch",
    "stack_batch",
    "write_tensor",
    "read_tensor",
    "write_manifest",
    "read_manifest",
    "HEADER_SIZE",
]

N_ENDMEMBERS = 4
HEADER = struct.Struct("<4sI4I8x")
HEADER_SIZE = HEADER.size
MAGIC = b"HST1"
VERSION = 1


# --- ground truth -----------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, h: int, w: int, smoothness: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian random field with correlation length ``smoothness`` px."""
    noise = rng.standard_normal((h, w))
    if math.isinf(smoothness):
        return np.zeros((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    transfer = np.exp(-2.0 * (math.pi * smoothness) ** 2 * (fy * fy + fx * fx))
    f = np.real(np.fft.ifft2(np.fft.fft2(noise) * transfer))
    f -= f.mean()
    std = f.std()
    return f / std if std > 1e-12 else np.zeros_like(f)


def _signatures(rng: np.random.Generator, n_bands: int) -> np.ndarray:
    """``(N_ENDMEMBERS, n_bands)`` smooth spectra in ``[0.05, 0.95]``."""
    lam = np.linspace(0.0, 1.0, n_bands)
    sigs = np.empty((N_ENDMEMBERS, n_bands))
    for k in range(N_ENDMEMBERS):
        base = rng.uniform(0.15, 0.5)
        tilt = rng.uniform(-0.25, 0.25)
        centre, width = rng.uniform(0.0, 1.0), rng.uniform(0.25, 0.5)
        bump = rng.uniform(-0.35, 0.45) * np.exp(-0.5 * ((lam - centre) / width) ** 2)
        sigs[k] = base + tilt * (lam - 0.5) + bump
    return np.clip(sigs, 0.05, 0.95)


def synth_ground_truth(rng_seed: int, C: int, H: int, W: int, smoothness: float = 4.0,
                       contrast: float = 3.0) -> np.ndarray:
    """Band-correlated smooth random cube ``(1, C, H, W)`` in ``[0, 1]`` (float32).

    ``smoothness`` is the spatial correlation length in pixels; ``inf``
    yields a spatially constant cube.  ``contrast`` sharpens the abundance
    boundaries.
    """
    if C < 1 or H < 1 or W < 1:
        raise ArgumentError(f"cube dims must be >= 1, got C={C}, H={H}, W={W}")
    rng = np.random.default_rng(rng_seed)
    sigs = _signatures(rng, C)
    logits = np.stack([_smooth_field(rng, H, W, smoothness) for _ in range(N_ENDMEMBERS)])
    logits = contrast * logits
    logits -= logits.max(axis=0, keepdims=True)
    abund = np.exp(logits)
    abund /= abund.sum(axis=0, keepdims=True)
    cube = np.einsum("khw,kc->chw", abund, sigs)
    return np.clip(cube, 0.0, 1.0).astype(np.float32)[None]


# --- spatial degradation ----------------------------------------------------------

def _gaussian_taps(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(x: np.ndarray, sigma: float) -> np.ndarray:
    taps = _gaussian_taps(sigma)
    out = ndimage.correlate1d(np.asarray(x, dtype=np.float64), taps, axis=-2, mode="reflect")
    return ndimage.correlate1d(out, taps, axis=-1, mode="reflect")


def anti_alias_downsample(x: np.ndarray, s: int) -> np.ndarray:
    """Gaussian blur (sigma ``s/2``, radius ``ceil(3 sigma)``, reflective borders),
    then keep every ``s``-th pixel starting at ``(s - 1) // 2``."""
    x = np.asarray(x)
    if int(s) != s or s < 2:
        raise ArgumentError(f"downsampling factor must be an integer >= 2, got {s}")
    s = int(s)
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise ArgumentError(f"spatial dims {h}x{w} are not divisible by {s}")
    off = (s - 1) // 2
    return _blur(x, s / 2.0)[..., off::s, off::s].astype(np.float32)


def degrade_to(x: np.ndarray, lr_h: int, lr_w: int) -> np.ndarray:
    """Degrade to an arbitrary LR grid (fractional scale factors).

    Blurs with sigma = ratio / 2 and samples the blurred image bilinearly at
    ``i * ratio + floor((ratio - 1) / 2)``, which reduces to
    :func:`anti_alias_downsample` for integer ratios.
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    ry, rx = h / lr_h, w / lr_w
    if ry < 1 or rx < 1:
        raise ArgumentError(f"cannot degrade {h}x{w} to the larger grid {lr_h}x{lr_w}")
    blurred = _blur(x, max(ry, rx) / 2.0)
    pos_y = np.arange(lr_h) * ry + math.floor((ry - 1) / 2)
    pos_x = np.arange(lr_w) * rx + math.floor((rx - 1) / 2)
    out = _bilinear(blurred, np.clip(pos_y, 0, h - 1), np.clip(pos_x, 0, w - 1))
    return out.astype(np.float32)


def _bilinear(x: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    y0 = np.minimum(np.floor(py).astype(int), x.shape[-2] - 1)
    x0 = np.minimum(np.floor(px).astype(int), x.shape[-1] - 1)
    y1 = np.minimum(y0 + 1, x.shape[-2] - 1)
    x1 = np.minimum(x0 + 1, x.shape[-1] - 1)
    ty = (py - y0)[:, None]
    tx = (px - x0)[None, :]
    rows0 = x[..., y0, :]
    rows1 = x[..., y1, :]
    top = rows0[..., x0] * (1 - tx) + rows0[..., x1] * tx
    bottom = rows1[..., x0] * (1 - tx) + rows1[..., x1] * tx
    return top * (1 - ty) + bottom * ty


# --- spectral degradation ---------------------------------------------------------

def synth_srf(C: int, c: int) -> np.ndarray:
    """``(c, C)`` spectral response: ``c`` contiguous groups, each averaged uniformly.

    The first ``C % c`` groups hold one extra band.
    """
    if not 1 <= c <= C:
        raise ArgumentError(f"need 1 <= c <= C, got c={c}, C={C}")
    sizes = [C // c + (1 if j < C % c else 0) for j in range(c)]
    srf = np.zeros((c, C))
    start = 0
    for j, size in enumerate(sizes):
        srf[j, start:start + size] = 1.0 / size
        start += size
    return srf


def apply_srf(x: np.ndarray, srf: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if srf.shape[1] != x.shape[1]:
        raise ShapeError(f"SRF with {srf.shape[1]} columns cannot act on {x.shape[1]} bands")
    return np.einsum("kc,nchw->nkhw", srf, x.astype(np.float64)).astype(np.float32)


# --- samples ----------------------------------------------------------------------

@dataclass
class FusionSample:
    y_lr: np.ndarray
    z_hr: np.ndarray
    x_hr: np.ndarray
    scale: float
    dataset_id: str = ""

    @property
    def bands(self) -> int:
        return self.y_lr.shape[1]

    @property
    def msi_bands(self) -> int:
        return self.z_hr.shape[1]

    @property
    def signature(self) -> tuple:
        """Everything that must agree for two samples to share a minibatch."""
        return (self.y_lr.shape[1:], self.z_hr.shape[1:], self.x_hr.shape[1:], self.scale)


def wald_simulate(x_hr: np.ndarray, s: int, srf: np.ndarray, dataset_id: str = "") -> FusionSample:
    """Simulate ``(y_lr, z_hr)`` from a known HR cube ``(1, C, H, W)``."""
    x_hr = np.asarray(x_hr, dtype=np.float32)
    if srf.shape[1] != x_hr.shape[1]:
        raise ShapeError(f"SRF has {srf.shape[1]} columns but the cube has {x_hr.shape[1]} bands")
    return FusionSample(anti_alias_downsample(x_hr, s), apply_srf(x_hr, srf), x_hr, float(s), dataset_id)


def extract_patches(x: np.ndarray, patch: int, stride: int) -> list[np.ndarray]:
    """All ``patch x patch`` windows at offsets ``0, stride, ...``; row-major order."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if patch < 1 or patch > h or patch > w:
        raise ArgumentError(f"patch {patch} does not fit in a {h}x{w} image")
    return [
        x[..., i:i + patch, j:j + patch].copy()
        for i in range(0, h - patch + 1, stride)
        for j in range(0, w - patch + 1, stride)
    ]


@dataclass
class DatasetBucket:
    """Samples from one synthetic sensor; all share bands, dims and scale."""

    dataset_id: str
    band_count: int
    msi_bands: int
    scale: float
    patch_dims: tuple[int, int]
    samples: list[FusionSample] = field(default_factory=list)

    def add(self, sample: FusionSample) -> None:
        expected = (self.band_count, self.msi_bands, self.scale, self.patch_dims)
        got = (sample.bands, sample.msi_bands, sample.scale, tuple(sample.x_hr.shape[-2:]))
        if got != expected:
            raise ShapeError(f"sample {got} does not match bucket {self.dataset_id} {expected}")
        self.samples.append(sample)

    def __len__(self) -> int:
        return len(self.samples)


def build_bucket(dataset_id: str, C: int, c: int, scale: int, seed: int, n_images: int = 4,
                 image_size: int = 128, patch: int = 32, stride: int | None = None,
                 smoothness: float = 4.0) -> DatasetBucket:
    """Synthesize ``n_images`` cubes, cut patches, and simulate each patch."""
    stride = patch if stride is None else stride
    if patch % scale:
        raise ConfigurationError(f"patch {patch} is not divisible by scale {scale}")
    srf = synth_srf(C, c)
    bucket = DatasetBucket(dataset_id, C, c, float(scale), (patch, patch))
    seeds = np.random.SeedSequence([seed, C, c]).generate_state(n_images)
    for img_seed in seeds:
        cube = synth_ground_truth(int(img_seed), C, image_size, image_size, smoothness)
        for p in extract_patches(cube, patch, stride):
            bucket.add(wald_simulate(p, scale, srf, dataset_id))
    return bucket


def sample_minibatch(buckets: Sequence[DatasetBucket], rng: np.random.Generator,
                     batch_size: int) -> list[FusionSample]:
    """Pick a bucket uniformly, then ``batch_size`` of its samples with replacement."""
    if not buckets:
        raise ConfigurationError("no buckets to sample from")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    for b in buckets:
        if not b.samples:
            raise ConfigurationError(f"bucket {b.dataset_id!r} is empty")
    bucket = buckets[int(rng.integers(len(buckets)))]
    picks = rng.integers(len(bucket.samples), size=batch_size)
    return [bucket.samples[int(i)] for i in picks]


def stack_batch(samples: Sequence[FusionSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate samples along the batch axis after a same-shape check."""
    first = samples[0].signature
    for s in samples[1:]:
        if s.signature != first:
            raise ShapeError(f"heterogeneous minibatch: {s.signature} vs {first}")
    return (np.concatenate([s.y_lr for s in samples]),
            np.concatenate([s.z_hr for s in samples]),
            np.concatenate([s.x_hr for s in samples]))


# --- HST1 tensor files ------------------------------------------------------------

def write_tensor(path, x: np.ndarray) -> None:
    """Write a rank-4 array as an HST1 file (32-byte header + float32 LE data)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"HST1 stores (n, c, h, w) tensors, got shape {x.shape}")
    header = HEADER.pack(MAGIC, VERSION, *x.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", offset=len(raw))
    magic, version, n, c, h, w = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = HEADER_SIZE + 4 * n * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(n, c, h, w)
    return data.astype(np.float32)


# --- manifests --------------------------------------------------------------------

def write_manifest(path, bucket: DatasetBucket, paths: Sequence[tuple[str, str, str]]) -> None:
    """One line per sample: ``dataset_id C c scale y_path z_path x_path`` (tab-separated)."""
    with open(path, "w") as fh:
        for y, z, x in paths:
            fields = [bucket.dataset_id, str(bucket.band_count), str(bucket.msi_bands),
                      repr(bucket.scale), y, z, x]
            fh.write("\t".join(fields) + "\n")


def read_manifest(path) -> DatasetBucket:
    """Load a bucket manifest; sample paths are relative to the manifest's directory."""
    path = Path(path)
    bucket: DatasetBucket | None = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise FormatError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(fields)}")
        ds, C, c, scale = fields[0], int(fields[1]), int(fields[2]), float(fields[3])
        y, z, x = (read_tensor(path.parent / f) for f in fields[4:])
        sample = FusionSample(y, z, x, scale, ds)
        if bucket is None:
            bucket = DatasetBucket(ds, C, c, scale, tuple(x.shape[-2:]))
        bucket.add(sample)
    if bucket is None:
        raise FormatError(f"{path}: empty manifest")
    return bucket
