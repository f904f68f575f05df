"""Band- and scale-agnostic fusion network.

``fuse`` maps an LR hyperspectral cube ``y_lr (n, C, h, w)`` and an HR
multispectral image ``z_hr (n, c, H, W)`` to an HR cube ``(n, C, H, W)``:

1. ``y_hr``  = bicubic upsampling of ``y_lr`` to ``(H, W)``
2. ``e_pe``  = spectral encoder applied to the MK embedding of ``y_lr``
3. ``e_pa``  = spatial encoder applied to the MK embedding of ``[y_hr; z_hr]``
4. for each HR pixel, four candidate features are decoded from the LR
   neighbours of its normalized coordinate and blended with softmax weights
5. the feature field is projected to ``C`` bands by the MK output layer
6. output = ``y_hr`` + projected residual
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .conv import Kernel4, conv2d_forward
from .errors import ArgumentError, BandOverflowError, ConfigurationError, ShapeError, UnsupportedScaleError
from .mk import MKInputLayer, MKOutputLayer, mk_input_forward, mk_output_forward
from .resize import bicubic_resize
from .tensor import (Tensor, as_tensor, broadcast_to, concat, linear, relu, reshape, softmax,
                     sum_, take, transpose)

__all__ = [
    "ModelConfig",
    "ResidualEncoder",
    "FusionModel",
    "QueryPoint",
    "normalize_coords",
    "nearest_lr_neighbors",
    "decode_residual",
    "decode_field",
    "fuse",
]

PARAMETER_GROUPS = ("mk_in", "enc_spe", "enc_spa", "decoder", "weight_head", "mk_out")


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 64
    c_max: int = 40
    hidden: int = 256
    hidden_layers: int = 4
    enc_spe_depth: int = 2
    enc_spa_depth: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.d_feat < 1 or self.c_max < 1 or self.hidden < 1 or self.hidden_layers < 0:
            raise ConfigurationError(f"invalid model dimensions: {self}")
        if self.enc_spe_depth < 0 or self.enc_spa_depth < 0:
            raise ConfigurationError("encoder depths must be non-negative")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel_size}")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_params(rng, d_out, d_in, k) -> Kernel4:
    fan_in = d_in * k * k
    return Kernel4(Tensor(_uniform(rng, (d_out, d_in, k, k), fan_in), requires_grad=True),
                   Tensor(_uniform(rng, (d_out,), fan_in), requires_grad=True))


class ResidualEncoder:
    """EDSR-style trunk: head conv, ``depth`` residual blocks, tail conv, global skip.

    Every conv is ``D -> D`` with ``k x k`` kernels and same padding, so the
    spatial size is preserved.
    """

    def __init__(self, depth: int, d: int, k: int = 3, rng: np.random.Generator | None = None):
        rng = np.random.default_rng() if rng is None else rng
        self.depth, self.d, self.k = depth, d, k
        self.head = _conv_params(rng, d, d, k)
        self.blocks = [(_conv_params(rng, d, d, k), _conv_params(rng, d, d, k)) for _ in range(depth)]
        self.tail = _conv_params(rng, d, d, k)

    def parameters(self) -> dict[str, Tensor]:
        params = {"head.weight": self.head.weight, "head.bias": self.head.bias}
        for i, (c1, c2) in enumerate(self.blocks):
            params[f"blocks.{i}.conv1.weight"] = c1.weight
            params[f"blocks.{i}.conv1.bias"] = c1.bias
            params[f"blocks.{i}.conv2.weight"] = c2.weight
            params[f"blocks.{i}.conv2.bias"] = c2.bias
        params["tail.weight"] = self.tail.weight
        params["tail.bias"] = self.tail.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.d:
            raise ShapeError(f"encoder expects {self.d} channels, got input {x.shape}")
        pad = (self.k - 1) // 2
        head = conv2d_forward(x, self.head, 1, pad)
        h = head
        for c1, c2 in self.blocks:
            h = h + conv2d_forward(relu(conv2d_forward(h, c1, 1, pad)), c2, 1, pad)
        return conv2d_forward(h, self.tail, 1, pad) + head


class FusionModel:
    """Complete parameter set of the fusion network.

    One MK input layer embeds both branches, so ``C + c <= c_max`` must hold
    for every sensor the model sees.
    """

    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config = ModelConfig() if config is None else config
        rng = np.random.default_rng() if rng is None else rng
        d, k = config.d_feat, config.kernel_size
        self.mk_in = MKInputLayer(d, config.c_max, k, rng=rng)
        self.enc_spe = ResidualEncoder(config.enc_spe_depth, d, k, rng)
        self.enc_spa = ResidualEncoder(config.enc_spa_depth, d, k, rng)
        widths = [2 * d + 2] + [config.hidden] * config.hidden_layers + [d]
        self.decoder = [
            (Tensor(_uniform(rng, (o, i), i), requires_grad=True),
             Tensor(_uniform(rng, (o,), i), requires_grad=True))
            for i, o in zip(widths[:-1], widths[1:])
        ]
        self.weight_head = (Tensor(_uniform(rng, (1, d), d), requires_grad=True),
                            Tensor(_uniform(rng, (1,), d), requires_grad=True))
        self.mk_out = MKOutputLayer(d, config.c_max, k, rng=rng)
        for name, t in self.parameters().items():
            t.name = name

    @property
    def d_feat(self) -> int:
        return self.config.d_feat

    @property
    def c_max(self) -> int:
        return self.config.c_max

    @property
    def decoder_in_width(self) -> int:
        return self.decoder[0][0].shape[1]

    def parameters(self) -> dict[str, Tensor]:
        """Ordered registry ``{dotted name: parameter}``."""
        params: dict[str, Tensor] = {}
        for name, t in self.mk_in.parameters().items():
            params[f"mk_in.{name}"] = t
        for prefix_, enc in (("enc_spe", self.enc_spe), ("enc_spa", self.enc_spa)):
            for name, t in enc.parameters().items():
                params[f"{prefix_}.{name}"] = t
        for i, (w, b) in enumerate(self.decoder):
            params[f"decoder.{i}.weight"] = w
            params[f"decoder.{i}.bias"] = b
        params["weight_head.weight"], params["weight_head.bias"] = self.weight_head
        for name, t in self.mk_out.parameters().items():
            params[f"mk_out.{name}"] = t
        return params

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def astype(self, dtype) -> "FusionModel":
        """Cast every parameter in place (64-bit is used by gradient oracles)."""
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
        return self

    def zero_residual_path(self) -> "FusionModel":
        """Zero the decoder output layer, ensemble head and MK output layer."""
        w, b = self.decoder[-1]
        for t in (w, b, *self.weight_head, self.mk_out.w_nested, self.mk_out.bias_nested):
            t.data[...] = 0
        return self

    def mlp(self, z: Tensor) -> Tensor:
        last = len(self.decoder) - 1
        for i, (w, b) in enumerate(self.decoder):
            z = linear(z, w, b)
            if i < last:
                z = relu(z)
        return z


# --- coordinates --------------------------------------------------------------

def normalize_coords(i: int, j: int, H: int, W: int) -> tuple[float, float]:
    """Pixel ``(i, j)`` of an ``H x W`` grid mapped into ``[-1, 1]^2``.

    A single-row or single-column axis maps to ``0.0``.
    """
    if H < 1 or W < 1 or not (0 <= i < H and 0 <= j < W):
        raise ArgumentError(f"pixel ({i}, {j}) outside a {H}x{W} grid")
    return float(_axis_coord(i, H)), float(_axis_coord(j, W))


def _axis_coord(i, n: int) -> np.ndarray:
    i = np.asarray(i, dtype=np.float64)
    if n == 1:
        return np.zeros_like(i)
    return 2.0 * i / (n - 1) - 1.0


def _lr_bracket(p: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Floor and ceil LR indices (clamped) of normalized coordinates ``p``."""
    if n == 1:
        zero = np.zeros(np.shape(p), dtype=np.intp)
        return zero, zero
    u = (np.asarray(p, dtype=np.float64) + 1.0) * 0.5 * (n - 1)
    snapped = np.round(u)
    u = np.where(np.abs(u - snapped) < 1e-9, snapped, u)
    lo = np.clip(np.floor(u), 0, n - 1).astype(np.intp)
    hi = np.clip(np.ceil(u), 0, n - 1).astype(np.intp)
    return lo, hi


@dataclass
class QueryPoint:
    """An HR query coordinate with its four LR neighbours."""

    p: tuple[float, float]
    neighbors: list[tuple[int, int]] = field(default_factory=list)
    offsets: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))


def nearest_lr_neighbors(p, lr_h: int, lr_w: int) -> QueryPoint:
    """The four LR grid cells bracketing ``p`` (floor/ceil per axis, clamped).

    Order: (lo, lo), (lo, hi), (hi, lo), (hi, hi).  Offsets are ``p - q``
    in normalized units.
    """
    py, px = float(p[0]), float(p[1])
    rlo, rhi = _lr_bracket(np.array(py), lr_h)
    clo, chi = _lr_bracket(np.array(px), lr_w)
    neighbors = [(int(r), int(c)) for r in (rlo, rhi) for c in (clo, chi)]
    offsets = np.array([[py - float(_axis_coord(r, lr_h)), px - float(_axis_coord(c, lr_w))]
                        for r, c in neighbors])
    return QueryPoint((py, px), neighbors, offsets)


@lru_cache(maxsize=64)
def neighbor_tables(H: int, W: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat LR indices ``(H*W, 4)`` and offsets ``(H*W, 4, 2)`` for every HR pixel."""
    py = _axis_coord(np.arange(H), H)
    px = _axis_coord(np.arange(W), W)
    rlo, rhi = _lr_bracket(py, h)
    clo, chi = _lr_bracket(px, w)
    idx = np.empty((H, W, 4), dtype=np.intp)
    off = np.empty((H, W, 4, 2))
    lr_y = _axis_coord(np.arange(h), h)
    lr_x = _axis_coord(np.arange(w), w)
    for k, (rows, cols) in enumerate(((rlo, clo), (rlo, chi), (rhi, clo), (rhi, chi))):
        idx[:, :, k] = rows[:, None] * w + cols[None, :]
        off[:, :, k, 0] = (py - lr_y[rows])[:, None]
        off[:, :, k, 1] = (px - lr_x[cols])[None, :]
    idx.flags.writeable = False
    off.flags.writeable = False
    return idx.reshape(H * W, 4), off.reshape(H * W, 4, 2)


# --- decoding -----------------------------------------------------------------

def _ensemble(model: FusionModel, pe4: Tensor, pa: Tensor, offsets: np.ndarray):
    """Blend candidates decoded from ``pe4 (R, 4, D)``, ``pa (R, D)``, ``offsets (R, 4, 2)``."""
    rows, _, d = pe4.shape
    pa4 = broadcast_to(reshape(pa, (rows, 1, d)), (rows, 4, d))
    off = Tensor(np.asarray(offsets, dtype=pe4.dtype))
    z = reshape(concat([pe4, pa4, off], axis=2), (rows * 4, 2 * d + 2))
    cand = model.mlp(z)
    logits = reshape(linear(cand, *model.weight_head), (rows, 4))
    weights = softmax(logits, axis=1)
    blended = sum_(reshape(cand, (rows, 4, d)) * reshape(weights, (rows, 4, 1)), axis=1)
    return blended, weights


def decode_field(model: FusionModel, e_pe: Tensor, e_pa: Tensor, return_weights: bool = False):
    """Residual feature field ``(n, D, H, W)`` from LR and HR latents."""
    n, d, h, w = e_pe.shape
    if e_pa.ndim != 4 or e_pa.shape[:2] != (n, d):
        raise ShapeError(f"latent shapes {e_pe.shape} and {e_pa.shape} are incompatible")
    if d != model.d_feat:
        raise ShapeError(f"latents have {d} channels, model expects {model.d_feat}")
    H, W = e_pa.shape[2], e_pa.shape[3]
    idx, offs = neighbor_tables(H, W, h, w)
    pe = transpose(reshape(e_pe, (n, d, h * w)), (0, 2, 1))
    pe4 = reshape(take(pe, idx, axis=1), (n * H * W, 4, d))
    pa = reshape(transpose(reshape(e_pa, (n, d, H * W)), (0, 2, 1)), (n * H * W, d))
    offsets = np.broadcast_to(offs, (n, H * W, 4, 2)).reshape(n * H * W, 4, 2)
    blended, weights = _ensemble(model, pe4, pa, offsets)
    out = reshape(transpose(reshape(blended, (n, H * W, d)), (0, 2, 1)), (n, d, H, W))
    if return_weights:
        return out, weights.data.reshape(n, H, W, 4)
    return out


def decode_residual(model: FusionModel, e_pe: Tensor, e_pa: Tensor, query: QueryPoint,
                    hr_pixel: tuple[int, int]) -> Tensor:
    """Blended residual feature (length ``D``) for a single query point."""
    if e_pe.ndim != 4 or e_pa.ndim != 4 or e_pe.shape[0] != 1 or e_pa.shape[0] != 1:
        raise ShapeError(f"expected single-sample latents, got {e_pe.shape} and {e_pa.shape}")
    d, h, w = e_pe.shape[1:]
    if e_pa.shape[1] != d or d != model.d_feat:
        raise ShapeError(f"latent shapes {e_pe.shape} and {e_pa.shape} are incompatible")
    i, j = hr_pixel
    flat = [r * w + c for r, c in query.neighbors]
    pe = transpose(reshape(e_pe, (d, h * w)), (1, 0))
    pe4 = reshape(take(pe, flat, axis=0), (1, 4, d))
    pa = reshape(take(reshape(e_pa, (d, -1)), [i * e_pa.shape[3] + j], axis=1), (1, d))
    blended, _ = _ensemble(model, pe4, pa, np.asarray(query.offsets)[None])
    return reshape(blended, (d,))


# --- full pipeline ----------------------------------------------------------------

def fuse(model: FusionModel, y_lr, z_hr, C: int | None = None, return_parts: bool = False):
    """Fused HR cube ``(n, C, H, W)``; ``(H, W)`` are taken from ``z_hr``.

    With ``return_parts`` the bicubic base and the residual image are
    returned as well: ``(output, base, residual)``.
    """
    y_lr = as_tensor(y_lr)
    z_hr = as_tensor(z_hr, like=y_lr)
    if y_lr.ndim != 4 or z_hr.ndim != 4 or y_lr.shape[0] != z_hr.shape[0]:
        raise ShapeError(f"y_lr {y_lr.shape} and z_hr {z_hr.shape} must be (n, ., ., .) with equal n")
    n, bands, h, w = y_lr.shape
    C = bands if C is None else C
    if C != bands:
        raise ShapeError(f"C={C} does not match y_lr with {bands} bands")
    c = z_hr.shape[1]
    H, W = z_hr.shape[2], z_hr.shape[3]
    if C > model.c_max or C + c > model.c_max:
        raise BandOverflowError(
            f"C={C} (+{c} MSI bands) exceeds the nested kernel capacity c_max={model.c_max}"
        )
    if H < h or W < w:
        raise UnsupportedScaleError(f"target {H}x{W} is smaller than the LR grid {h}x{w}")
    y_hr = bicubic_resize(y_lr, H, W)
    e_pe = model.enc_spe(mk_input_forward(model.mk_in, y_lr))
    e_pa = model.enc_spa(mk_input_forward(model.mk_in, concat([y_hr, z_hr], axis=1)))
    residual = mk_output_forward(model.mk_out, decode_field(model, e_pe, e_pa), C)
    out = y_hr + residual
    if return_parts:
        return out, y_hr, residual
    return out
