import numpy as np
import pytest

from mkfusion import (ArgumentError, BandOverflowError, FusionModel, ModelConfig, ShapeError, Tape,
                      Tensor, UnsupportedScaleError, bicubic_resize, decode_residual, fuse,
                      nearest_lr_neighbors, normalize_coords)
from mkfusion.model import PARAMETER_GROUPS, decode_field
from mkfusion.tensor import concat, mean

TINY = ModelConfig(d_feat=4, c_max=12, hidden=8, hidden_layers=2, enc_spe_depth=1, enc_spa_depth=1)


def tiny_model(seed=0, config=TINY):
    return FusionModel(config, rng=np.random.default_rng(seed))


def inputs(seed, C=3, c=2, h=4, w=4, H=8, W=8):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0, 1, (1, C, h, w)).astype(np.float32),
            rng.uniform(0, 1, (1, c, H, W)).astype(np.float32))


def test_normalize_coords():
    assert normalize_coords(0, 0, 5, 7) == (-1.0, -1.0)
    assert normalize_coords(4, 6, 5, 7) == (1.0, 1.0)
    assert normalize_coords(1, 1, 3, 3) == (0.0, 0.0)
    assert normalize_coords(0, 2, 1, 4)[0] == 0.0
    with pytest.raises(ArgumentError):
        normalize_coords(3, 0, 3, 3)


def test_neighbors_coincident_point():
    q = nearest_lr_neighbors(normalize_coords(2, 1, 5, 4), 5, 4)
    k = q.neighbors.index((2, 1))
    assert np.array_equal(q.offsets[k], [0.0, 0.0])


def test_neighbors_corner_clamp():
    for h, w in [(2, 2), (5, 3), (9, 9)]:
        q = nearest_lr_neighbors((-1.0, -1.0), h, w)
        assert q.neighbors == [(0, 0)] * 4
        assert not np.any(q.offsets)


def test_neighbors_midpoint():
    p = ((normalize_coords(1, 1, 4, 4)[0] + normalize_coords(2, 2, 4, 4)[0]) / 2,) * 2
    q = nearest_lr_neighbors(p, 4, 4)
    assert set(q.neighbors) == {(1, 1), (1, 2), (2, 1), (2, 2)}
    assert np.allclose(np.abs(q.offsets), 1 / 3, atol=1e-12)


def _latents(model, y, z):
    y_hr = bicubic_resize(Tensor(y), z.shape[2], z.shape[3])
    e_pe = model.enc_spe(model.mk_in(Tensor(y)))
    e_pa = model.enc_spa(model.mk_in(concat([y_hr, Tensor(z)], axis=1)))
    return e_pe, e_pa


def test_decode_residual_equal_logits_is_mean():
    model = tiny_model(1)
    model.weight_head[0].data[...] = 0
    y, z = inputs(1)
    e_pe, e_pa = _latents(model, y, z)
    q = nearest_lr_neighbors(normalize_coords(3, 5, 8, 8), 4, 4)
    got = decode_residual(model, e_pe, e_pa, q, (3, 5)).data
    cands = []
    for (r, c), off in zip(q.neighbors, q.offsets):
        zin = np.concatenate([e_pe.data[0, :, r, c], e_pa.data[0, :, 3, 5], off]).astype(np.float32)
        cands.append(model.mlp(Tensor(zin[None])).data[0])
    assert np.allclose(got, np.mean(cands, axis=0), atol=1e-6)


def test_decode_residual_zero_model():
    model = tiny_model(2).zero_residual_path()
    y, z = inputs(2)
    e_pe, e_pa = _latents(model, y, z)
    q = nearest_lr_neighbors(normalize_coords(1, 1, 8, 8), 4, 4)
    assert not decode_residual(model, e_pe, e_pa, q, (1, 1)).data.any()


def test_decode_residual_against_64bit_formula():
    cfg = ModelConfig(d_feat=2, c_max=6, hidden=3, hidden_layers=1, enc_spe_depth=1, enc_spa_depth=1)
    model = tiny_model(3, cfg).astype(np.float64)
    rng = np.random.default_rng(3)
    e_pe = Tensor(rng.standard_normal((1, 2, 2, 2)))
    e_pa = Tensor(rng.standard_normal((1, 2, 5, 5)))
    for i, j in [(0, 0), (2, 3), (4, 4), (1, 2)]:
        q = nearest_lr_neighbors(normalize_coords(i, j, 5, 5), 2, 2)
        got = decode_residual(model, e_pe, e_pa, q, (i, j)).data
        cands, logits = [], []
        for (r, c), off in zip(q.neighbors, q.offsets):
            v = np.concatenate([e_pe.data[0, :, r, c], e_pa.data[0, :, i, j], off])
            for li, (W, b) in enumerate(model.decoder):
                v = W.data @ v + b.data
                if li < len(model.decoder) - 1:
                    v = np.maximum(v, 0)
            cands.append(v)
            logits.append((model.weight_head[0].data @ v + model.weight_head[1].data).item())
        wts = np.exp(np.array(logits) - max(logits))
        wts /= wts.sum()
        assert np.allclose(got, np.einsum("k,kd->d", wts, np.array(cands)), atol=1e-12)


def test_decode_residual_matches_field():
    model = tiny_model(4)
    y, z = inputs(4, H=11, W=9)
    e_pe, e_pa = _latents(model, y, z)
    field = decode_field(model, e_pe, e_pa).data
    for i, j in [(0, 0), (5, 4), (10, 8), (3, 7)]:
        q = nearest_lr_neighbors(normalize_coords(i, j, 11, 9), 4, 4)
        assert np.allclose(decode_residual(model, e_pe, e_pa, q, (i, j)).data, field[0, :, i, j], atol=1e-6)


def test_decode_shape_errors():
    model = tiny_model(0)
    with pytest.raises(ShapeError):
        decode_field(model, Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((1, 3, 4, 4))))


def test_zero_residual_path_returns_bicubic():
    model = tiny_model(5).zero_residual_path()
    y, z = inputs(5)
    assert np.array_equal(fuse(model, y, z).data, bicubic_resize(Tensor(y), 8, 8).data)


def test_fractional_target_shape():
    model = tiny_model(6)
    y, z = inputs(6, h=8, w=8, H=26, W=26)
    out = fuse(model, y, z)
    assert out.shape == (1, 3, 26, 26) and np.all(np.isfinite(out.data))


def test_band_agnostic_single_instance():
    model = FusionModel(ModelConfig(d_feat=4, c_max=40, hidden=8, hidden_layers=1, enc_spe_depth=1,
                                    enc_spa_depth=1), rng=np.random.default_rng(7))
    for C in (3, 5, 9, 31):
        y, z = inputs(C, C=C, c=3)
        assert fuse(model, y, z, C).shape == (1, C, 8, 8)


def test_scale_agnostic():
    model = tiny_model(8)
    y, _ = inputs(8, h=5, w=6)
    for H, W in [(10, 12), (11, 13)]:
        z = np.random.default_rng(H).uniform(0, 1, (1, 2, H, W)).astype(np.float32)
        assert fuse(model, y, z).shape == (1, 3, H, W)


def test_ensemble_convexity():
    model = tiny_model(9)
    y, z = inputs(9, H=13, W=10)
    e_pe, e_pa = _latents(model, y, z)
    _, weights = decode_field(model, e_pe, e_pa, return_weights=True)
    assert weights.min() >= 0 and np.max(np.abs(weights.sum(axis=-1) - 1)) <= 1e-6


def test_native_scale_consistency():
    model = tiny_model(10)
    y, z = inputs(10, H=4, W=4)
    out, base, residual = fuse(model, y, z, return_parts=True)
    assert np.array_equal(base.data, y)
    assert np.array_equal(out.data, (base.data + residual.data))


def test_fuse_is_deterministic():
    model = tiny_model(11)
    y, z = inputs(11, H=9, W=9)
    assert fuse(model, y, z).data.tobytes() == fuse(model, y, z).data.tobytes()


def test_fuse_errors():
    model = tiny_model(12)
    y, z = inputs(12, C=11, c=2)
    with pytest.raises(BandOverflowError):
        fuse(model, y, z)
    y, z = inputs(12, H=3, W=8)
    with pytest.raises(UnsupportedScaleError):
        fuse(model, y, z)


def test_every_parameter_group_receives_gradient():
    model = tiny_model(13)
    y, z = inputs(13, H=7, W=9)
    gt = np.random.default_rng(0).uniform(0, 1, (1, 3, 7, 9))
    with Tape() as tape:
        tape.backward(mean((fuse(model, y, z) - gt) * (fuse(model, y, z) - gt)))
    params = model.parameters()
    for group in PARAMETER_GROUPS:
        grads = [t.grad for k, t in params.items() if k.startswith(group + ".")]
        assert grads and all(g is not None for g in grads)
        assert any(np.any(g) for g in grads), group


def test_decoder_input_width():
    assert tiny_model().decoder_in_width == 2 * TINY.d_feat + 2
