import math

import numpy as np
import pytest

from mkfusion import (ConfigurationError, FormatError, NumericError, OptimizerState, Tensor, TrainConfig,
                      build_bucket, cosine_lr, load_checkpoint, optimizer_step, save_checkpoint, train,
                      wald_simulate)
from mkfusion.data import DatasetBucket, synth_srf
from mkfusion.model import FusionModel, ModelConfig

SMALL = dict(d_feat=4, hidden=8, hidden_layers=1, enc_spe_depth=1, enc_spa_depth=1, c_max=16,
             batch_size=2, lr_start=1e-3, lr_min=5e-5, checkpoint_every=0, probe_every=5)


@pytest.fixture(scope="module")
def buckets():
    return [build_bucket("a", 5, 2, 2, seed=0, n_images=1, image_size=16, patch=8),
            build_bucket("b", 9, 3, 2, seed=0, n_images=1, image_size=16, patch=8)]


def test_cosine_schedule():
    assert cosine_lr(0, 100, 2e-4, 1e-5) == 2e-4
    assert cosine_lr(100, 100, 2e-4, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(50, 100, 2e-4, 1e-5) == pytest.approx((2e-4 + 1e-5) / 2, rel=1e-12)
    with pytest.raises(ConfigurationError):
        cosine_lr(101, 100, 1, 0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_start=1e-5, lr_min=1e-4)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(beta2=1.0)


def test_zero_gradient_leaves_parameter_untouched():
    p = Tensor(np.ones(3, np.float32), requires_grad=True)
    p.grad = np.zeros(3, np.float32)
    state = OptimizerState.for_params({"p": p})
    assert optimizer_step({"p": p}, state, 0.1, weight_decay=0.5) == []
    assert np.array_equal(p.data, np.ones(3))


def test_first_step_magnitude_is_lr():
    p = Tensor(np.zeros(1, np.float64), requires_grad=True)
    p.grad = np.array([0.37])
    state = OptimizerState.for_params({"p": p})
    optimizer_step({"p": p}, state, 1e-2)
    assert abs(abs(p.data[0]) - 1e-2) <= 1e-3 * 1e-2


def test_opposite_gradients_positive_second_moment():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = OptimizerState.for_params({"p": p})
    for g in (1.0, -1.0):
        p.grad = np.full(2, g)
        optimizer_step({"p": p}, state, 1e-3)
    assert np.all(state.v["p"] > 0) and state.step == 2


def test_masked_update_and_decay():
    p = Tensor(np.ones((2, 4)), requires_grad=True)
    p.grad = np.zeros((2, 4))
    p.grad[:, :2] = 0.5
    p.grad_mask = np.zeros((2, 4), bool)
    p.grad_mask[:, :2] = True
    state = OptimizerState.for_params({"p": p})
    optimizer_step({"p": p}, state, 0.1, weight_decay=0.1)
    assert np.array_equal(p.data[:, 2:], np.ones((2, 2)))
    assert np.all(p.data[:, :2] < 1)
    assert not state.m["p"][:, 2:].any() and not state.v["p"][:, 2:].any()


def test_non_finite_gradient_aborts():
    p = Tensor(np.ones(2), requires_grad=True, name="w")
    p.grad = np.array([1.0, np.nan])
    state = OptimizerState.for_params({"layer.w": p})
    with pytest.raises(NumericError, match="layer.w"):
        optimizer_step({"layer.w": p}, state, 0.1)
    assert np.array_equal(p.data, np.ones(2)) and state.step == 0


def test_overfit_constant_image_monotone():
    x = np.full((1, 5, 8, 8), 0.5, np.float32)
    sample = wald_simulate(x, 2, synth_srf(5, 2), "const")
    bucket = DatasetBucket("const", 5, 2, 2.0, (8, 8), [sample])
    cfg = TrainConfig(steps=20, **{**SMALL, "batch_size": 1, "lr_start": 1e-3, "lr_min": 1e-3})
    losses = [float(r["loss"]) for r in train(cfg, [bucket]).log_rows]
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_training_is_deterministic(buckets, tmp_path):
    cfg = TrainConfig(steps=6, seed=3, **SMALL)
    train(cfg, buckets, tmp_path / "a")
    train(cfg, buckets, tmp_path / "b")
    assert (tmp_path / "a" / "final.ssa").read_bytes() == (tmp_path / "b" / "final.ssa").read_bytes()
    assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "b" / "train_log.csv").read_text()


def test_resume_matches_unbroken_run(buckets, tmp_path):
    cfg = TrainConfig(steps=8, seed=4, **{**SMALL, "checkpoint_every": 4})
    train(cfg, buckets, tmp_path / "full")
    train(cfg, buckets, tmp_path / "split", stop_after=4)
    train(cfg, buckets, tmp_path / "split", resume=tmp_path / "split" / "ckpt_000004.ssa")
    assert (tmp_path / "full" / "final.ssa").read_bytes() == (tmp_path / "split" / "final.ssa").read_bytes()
    assert (tmp_path / "full" / "train_log.csv").read_text() == (tmp_path / "split" / "train_log.csv").read_text()


def test_gated_step_leaves_high_slabs(buckets):
    cfg = TrainConfig(steps=3, seed=5, **{**SMALL, "batch_size": 1})
    model_init = FusionModel(cfg.model_config(), rng=np.random.default_rng([5, 0]))
    result = train(cfg, buckets[:1])
    # bucket "a" has C=5, c=2: input slabs >= 7 and output slabs >= 5 never see a gradient
    assert np.array_equal(result.model.mk_in.w_nested.data[:, 7:], model_init.mk_in.w_nested.data[:, 7:])
    assert np.array_equal(result.model.mk_out.w_nested.data[5:], model_init.mk_out.w_nested.data[5:])
    assert not np.array_equal(result.model.mk_in.w_nested.data[:, :7], model_init.mk_in.w_nested.data[:, :7])


def test_bucket_capacity_checked(buckets):
    with pytest.raises(ConfigurationError):
        train(TrainConfig(steps=1, **{**SMALL, "c_max": 8}), buckets)


def test_checkpoint_round_trip_and_errors(tmp_path):
    model = FusionModel(ModelConfig(d_feat=3, c_max=6, hidden=4, hidden_layers=1), np.random.default_rng(0))
    m = {k: np.random.default_rng(1).standard_normal(t.shape).astype(np.float32)
         for k, t in model.parameters().items()}
    rng = np.random.default_rng(9)
    save_checkpoint(tmp_path / "c.ssa", model, {"m": m}, 7, 11, rng.bit_generator.state)
    ck = load_checkpoint(tmp_path / "c.ssa")
    for k, t in model.parameters().items():
        assert ck.model.parameters()[k].data.tobytes() == t.data.tobytes()
        assert ck.moments["m"][k].tobytes() == m[k].tobytes()
    assert (ck.optimizer_step, ck.train_step) == (7, 11)
    assert ck.rng_state == rng.bit_generator.state
    raw = (tmp_path / "c.ssa").read_bytes()
    (tmp_path / "t.ssa").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ssa")
    (tmp_path / "m.ssa").write_bytes(b"SSACKPT0" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "m.ssa")


def test_non_finite_loss_keeps_last_checkpoint(buckets, tmp_path):
    cfg = TrainConfig(steps=4, seed=6, **{**SMALL, "checkpoint_every": 2})
    poisoned = [build_bucket("a", 5, 2, 2, seed=0, n_images=1, image_size=16, patch=8)]

    def poison(step, row):
        if step == 2:
            for s in poisoned[0].samples:
                s.x_hr[...] = np.nan

    with pytest.raises(NumericError):
        train(cfg, poisoned, tmp_path, on_step=poison)
    ck = load_checkpoint(tmp_path / "ckpt_000002.ssa")
    assert ck.train_step == 2
    assert all(np.all(np.isfinite(t.data)) for t in ck.model.parameters().values())
