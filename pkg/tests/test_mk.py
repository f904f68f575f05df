import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkfusion import (ArgumentError, BandOverflowError, Kernel4, MKInputLayer, MKOutputLayer, ShapeError,
                      Tape, Tensor, conv2d_forward, mk_input_forward, mk_output_forward,
                      slice_input_kernel, slice_output_kernel)
from mkfusion.mk import export_kernel_slabs, read_kernel_slabs
from mkfusion.tensor import sum_


def test_full_slice_is_the_nested_weight():
    layer = MKInputLayer(3, 4, rng=np.random.default_rng(0))
    k = slice_input_kernel(layer, 4)
    assert k.weight is layer.w_nested and k.bias is layer.bias


def test_partial_slice_entries():
    layer = MKInputLayer(3, 4, rng=np.random.default_rng(0))
    k = slice_input_kernel(layer, 2)
    assert k.weight.shape == (3, 2, 3, 3)
    assert np.array_equal(k.weight.data, layer.w_nested.data[:, :2])
    assert k.bias is layer.bias


def test_large_c_max():
    layer = MKInputLayer(2, 194, rng=np.random.default_rng(0))
    assert slice_input_kernel(layer, 194).weight.shape == (2, 194, 3, 3)


def test_slice_range_errors():
    layer = MKInputLayer(2, 4)
    with pytest.raises(ArgumentError, match="c_in=5.*c_max=4"):
        slice_input_kernel(layer, 5)
    with pytest.raises(ArgumentError):
        slice_input_kernel(layer, 0)
    with pytest.raises(ArgumentError):
        slice_output_kernel(MKOutputLayer(2, 4), 5)


def test_hand_evaluated_input_layer():
    layer = MKInputLayer(1, 3, k=1, w_nested=np.array([10, 20, 30], np.float32).reshape(1, 3, 1, 1),
                         bias=np.zeros(1, np.float32))
    out = mk_input_forward(layer, Tensor(np.ones((1, 2, 2, 2), np.float32)))
    assert np.all(out.data == 30.0)


def test_band_overflow():
    layer = MKInputLayer(2, 3)
    with pytest.raises(BandOverflowError):
        mk_input_forward(layer, Tensor(np.ones((1, 4, 3, 3))))
    with pytest.raises(ShapeError):
        mk_output_forward(MKOutputLayer(2, 3), Tensor(np.ones((1, 3, 3, 3))), 1)


def test_output_slices():
    layer = MKOutputLayer(2, 5, rng=np.random.default_rng(1))
    full = slice_output_kernel(layer, 5)
    assert full.weight is layer.w_nested and full.bias is layer.bias_nested
    one = slice_output_kernel(layer, 1)
    assert one.weight.shape == (1, 2, 3, 3) and one.bias.shape == (1,)
    three = slice_output_kernel(layer, 3)
    assert np.array_equal(three.weight.data, layer.w_nested.data[:3])
    assert np.array_equal(three.bias.data, layer.bias_nested.data[:3])


def test_output_identity_delta():
    w = np.zeros((3, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    layer = MKOutputLayer(1, 3, w_nested=w, bias_nested=np.zeros(3, np.float32))
    y = np.random.default_rng(0).standard_normal((1, 1, 4, 4)).astype(np.float32)
    assert np.array_equal(mk_output_forward(layer, Tensor(y), 1).data, y)


def test_full_width_equals_plain_convolution():
    rng = np.random.default_rng(2)
    inp = MKInputLayer(3, 4, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32))
    plain = conv2d_forward(x, Kernel4(inp.w_nested, inp.bias), 1, 1)
    assert np.array_equal(mk_input_forward(inp, x).data, plain.data)
    out = MKOutputLayer(3, 4, rng=rng)
    y = Tensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32))
    plain = conv2d_forward(y, Kernel4(out.w_nested, out.bias_nested), 1, 1)
    assert np.array_equal(mk_output_forward(out, y, 4).data, plain.data)


@settings(max_examples=60, deadline=None)
@given(c1=st.integers(1, 8), extra=st.integers(0, 4), d=st.integers(1, 4), k=st.sampled_from([1, 3]),
       seed=st.integers(0, 2 ** 16))
def test_prefix_zero_extension_and_nesting(c1, extra, d, k, seed):
    rng = np.random.default_rng(seed)
    c_max = c1 + extra + 1
    layer = MKInputLayer(d, c_max, k=k, rng=rng)
    x = rng.standard_normal((1, c1, 5, 4)).astype(np.float32)
    out = mk_input_forward(layer, Tensor(x)).data
    manual = Kernel4(Tensor(layer.w_nested.data[:, :c1].copy()), layer.bias)
    assert np.array_equal(out, conv2d_forward(Tensor(x), manual, 1, (k - 1) // 2).data)
    padded = np.concatenate([x, np.zeros((1, extra + 1, 5, 4), np.float32)], axis=1)
    assert np.array_equal(out, mk_input_forward(layer, Tensor(padded)).data)
    olayer = MKOutputLayer(d, c_max, k=k, rng=rng)
    y = Tensor(rng.standard_normal((1, d, 4, 4)).astype(np.float32))
    big = mk_output_forward(olayer, y, c1 + extra + 1).data
    assert np.array_equal(big[:, :c1], mk_output_forward(olayer, y, c1).data)


def test_gradient_confined_to_sliced_slabs():
    rng = np.random.default_rng(4)
    inp, out = MKInputLayer(2, 6, rng=rng), MKOutputLayer(2, 6, rng=rng)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
    with Tape() as tape:
        tape.backward(sum_(mk_output_forward(out, mk_input_forward(inp, x), 2)))
    assert not inp.w_nested.grad[:, 3:].any() and inp.w_nested.grad[:, :3].any()
    assert not out.w_nested.grad[2:].any() and not out.bias_nested.grad[2:].any()
    assert out.w_nested.grad[:2].any()


def test_spatial_dims_preserved():
    layer = MKInputLayer(4, 5)
    assert mk_input_forward(layer, Tensor(np.ones((2, 3, 7, 6)))).shape == (2, 4, 7, 6)


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    inp, out = MKInputLayer(3, 5, rng=rng), MKOutputLayer(3, 5, rng=rng)
    rows = export_kernel_slabs(tmp_path / "k.csv", {"in": inp, "out": out})
    assert rows == 10
    back = read_kernel_slabs(tmp_path / "k.csv")
    assert np.array_equal(back["in"], np.moveaxis(inp.w_nested.data, 1, 0).reshape(5, -1))
    assert np.array_equal(back["out"], out.w_nested.data.reshape(5, -1))


def test_fan_in_initialisation_statistics():
    layer = MKInputLayer(16, 40, rng=np.random.default_rng(6))
    bound = 1 / np.sqrt(40 * 9)
    w = layer.w_nested.data
    assert np.abs(w).max() <= bound
    # uniform(-b, b) has std b / sqrt(3)
    assert abs(w.std() - bound / np.sqrt(3)) < 0.03 * bound
