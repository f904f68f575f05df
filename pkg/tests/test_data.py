import numpy as np
import pytest

from mkfusion import (ArgumentError, ConfigurationError, FormatError, ShapeError, anti_alias_downsample,
                      build_bucket, extract_patches, read_tensor, sample_minibatch, synth_ground_truth,
                      synth_srf, wald_simulate, write_tensor)
from mkfusion.data import DatasetBucket, degrade_to, read_manifest, stack_batch, write_manifest
from oracles import blur_decimate


def test_ground_truth_determinism_and_range():
    a = synth_ground_truth(3, 7, 16, 20)
    b = synth_ground_truth(3, 7, 16, 20)
    assert a.tobytes() == b.tobytes() and a.shape == (1, 7, 16, 20)
    assert a.min() >= 0 and a.max() <= 1


def test_ground_truth_constant_limit():
    x = synth_ground_truth(1, 5, 8, 8, smoothness=np.inf)
    assert np.all(x == x[:, :, :1, :1])


def test_adjacent_band_correlation():
    corr = []
    for seed in range(100):
        x = synth_ground_truth(seed, 16, 32, 32)[0].reshape(16, -1).astype(np.float64)
        corr += [np.corrcoef(x[i], x[i + 1])[0, 1] for i in range(15)]
    assert np.mean(corr) > 0.9


def test_downsample_cases():
    const = np.full((1, 3, 8, 8), 0.4, np.float32)
    assert np.allclose(anti_alias_downsample(const, 2), 0.4, atol=1e-7, rtol=0)
    x = np.random.default_rng(0).uniform(0, 1, (1, 2, 4, 4))
    out = anti_alias_downsample(x, 2)
    assert out.shape == (1, 2, 2, 2)
    assert np.allclose(out, blur_decimate(x, 2), atol=1e-6)
    y = np.random.default_rng(1).uniform(0, 1, (1, 1, 12, 12))
    assert np.allclose(anti_alias_downsample(y, 3), blur_decimate(y, 3), atol=1e-6)
    assert anti_alias_downsample(np.zeros((1, 1, 12, 8)), 4).shape == (1, 1, 3, 2)
    with pytest.raises(ArgumentError):
        anti_alias_downsample(np.zeros((1, 1, 9, 8)), 2)


def test_fractional_degradation_agrees_with_integer():
    x = np.random.default_rng(2).uniform(0, 1, (1, 2, 16, 16))
    assert np.allclose(degrade_to(x, 8, 8), anti_alias_downsample(x, 2), atol=1e-6)
    assert degrade_to(x, 5, 5).shape == (1, 2, 5, 5)


def test_srf_cases():
    assert np.array_equal(synth_srf(4, 4), np.eye(4))
    assert np.array_equal(synth_srf(4, 2), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
    srf = synth_srf(31, 3)
    assert [int(np.count_nonzero(r)) for r in srf] == [11, 10, 10]
    assert np.allclose(srf.sum(axis=1), 1, atol=1e-12)
    assert np.all((srf > 0).sum(axis=0) == 1)
    with pytest.raises(ArgumentError):
        synth_srf(3, 4)


def test_wald_simulation():
    x = synth_ground_truth(0, 6, 16, 16)
    s = wald_simulate(x, 2, np.eye(6))
    assert np.array_equal(s.z_hr, x)
    const = np.full((1, 5, 8, 8), 0.3, np.float32)
    c = wald_simulate(const, 2, synth_srf(5, 2))
    assert np.allclose(c.y_lr, 0.3, atol=1e-7) and np.allclose(c.z_hr, 0.3, atol=1e-7)
    r = wald_simulate(synth_ground_truth(1, 9, 32, 32), 4, synth_srf(9, 3))
    assert r.y_lr.shape == (1, 9, 8, 8) and r.z_hr.shape == (1, 3, 32, 32)


def test_extract_patches():
    x = np.arange(64, dtype=np.float32).reshape(1, 1, 8, 8)
    assert len(extract_patches(x, 8, 1)) == 1 and np.array_equal(extract_patches(x, 8, 1)[0], x)
    tiles = extract_patches(x, 4, 4)
    assert len(tiles) == 4
    rebuilt = np.block([[tiles[0], tiles[1]], [tiles[2], tiles[3]]])
    assert np.array_equal(rebuilt, x)
    assert len(extract_patches(np.zeros((1, 1, 10, 10)), 4, 2)) == 16
    with pytest.raises(ArgumentError):
        extract_patches(x, 9, 1)


def test_bucket_homogeneity_and_determinism():
    a = build_bucket("b", 5, 2, 2, seed=3, n_images=1, image_size=64, patch=32)
    b = build_bucket("b", 5, 2, 2, seed=3, n_images=1, image_size=64, patch=32)
    assert len(a) == 4
    for s, t in zip(a.samples, b.samples):
        assert s.x_hr.tobytes() == t.x_hr.tobytes() and s.y_lr.tobytes() == t.y_lr.tobytes()
    other = build_bucket("c", 9, 3, 2, seed=3, n_images=1, image_size=64, patch=32)
    with pytest.raises(ShapeError):
        a.add(other.samples[0])


def test_sampler():
    a = build_bucket("a", 5, 2, 2, seed=0, n_images=1, image_size=32, patch=16)
    b = build_bucket("b", 9, 3, 2, seed=0, n_images=1, image_size=32, patch=16)
    rng = np.random.default_rng(0)
    assert all(s.dataset_id == "a" for s in sample_minibatch([a], rng, 6))
    for _ in range(50):
        batch = sample_minibatch([a, b], rng, 4)
        stack_batch(batch)
        assert len({s.dataset_id for s in batch}) == 1
    with pytest.raises(ConfigurationError):
        sample_minibatch([], rng, 2)
    with pytest.raises(ConfigurationError):
        sample_minibatch([DatasetBucket("e", 1, 1, 2.0, (4, 4))], rng, 2)


def test_tensor_io(tmp_path):
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "x.hst", x)
    assert read_tensor(tmp_path / "x.hst").tobytes() == x.tobytes()
    write_tensor(tmp_path / "s.hst", np.ones((1, 2, 2, 2)))
    assert (tmp_path / "s.hst").stat().st_size == 32 + 32
    raw = bytearray((tmp_path / "x.hst").read_bytes())
    raw[0:4] = b"XXXX"
    (tmp_path / "bad.hst").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 0"):
        read_tensor(tmp_path / "bad.hst")
    (tmp_path / "short.hst").write_bytes((tmp_path / "x.hst").read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "short.hst")


def test_manifest_round_trip(tmp_path):
    bucket = build_bucket("m", 5, 2, 2, seed=1, n_images=1, image_size=32, patch=16)
    paths = []
    for i, s in enumerate(bucket.samples):
        names = tuple(f"{i}_{t}.hst" for t in "yzx")
        for name, arr in zip(names, (s.y_lr, s.z_hr, s.x_hr)):
            write_tensor(tmp_path / name, arr)
        paths.append(names)
    write_manifest(tmp_path / "train_m.tsv", bucket, paths)
    back = read_manifest(tmp_path / "train_m.tsv")
    assert (back.dataset_id, back.band_count, back.msi_bands, back.scale) == ("m", 5, 2, 2.0)
    for s, t in zip(bucket.samples, back.samples):
        assert s.x_hr.tobytes() == t.x_hr.tobytes()
