from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crophybrid import tensor
from crophybrid.tensor import AxisError, FormatError, ShapeError, SqueezeError, Tensor


def test_new_fills():
    assert tensor.new([2, 2], 0).numpy().tolist() == [[0, 0], [0, 0]]
    assert tensor.new([3], 1.5).numpy().tolist() == [1.5, 1.5, 1.5]
    assert len(tensor.new([7, 7, 9, 13], 0)) == 5733


@pytest.mark.parametrize("shape", [[0], [2, -1], [3, 0, 2]])
def test_new_rejects_bad_extents(shape):
    with pytest.raises(ShapeError):
        tensor.new(shape)


def test_c_order_offsets():
    t = Tensor(np.arange(24.0).reshape(2, 3, 4))
    assert t.strides == (12, 4, 1)
    for idx in np.ndindex(2, 3, 4):
        assert t.offset(idx) == sum(i * s for i, s in zip(idx, t.strides))
        assert t[idx] == t.data[t.offset(idx)]
    with pytest.raises(AxisError):
        t.offset((2, 0, 0))


def test_squeeze_handoff_shape():
    t = tensor.new([1, 1, 9, 64])
    s = tensor.squeeze(t, [0, 1])
    assert s.shape == (9, 64)
    assert s.data is t.data


def test_squeeze_noop_and_order():
    t = Tensor(np.arange(5.0))
    assert tensor.squeeze(t, []).shape == (5,)
    t = Tensor(np.array([[[1.0], [2.0], [3.0]]]))
    s = tensor.squeeze(t, [0, 2])
    assert s.shape == (3,)
    assert [s[i] for i in range(3)] == [t[(0, i, 0)] for i in range(3)]


def test_squeeze_errors():
    with pytest.raises(SqueezeError):
        tensor.squeeze(tensor.new([2, 1]), [0])
    with pytest.raises(AxisError):
        tensor.squeeze(tensor.new([1, 1]), [2])


@given(st.lists(st.integers(1, 3), min_size=1, max_size=4), st.data())
def test_squeeze_unsqueeze_round_trip(shape, data):
    axes = data.draw(st.lists(st.integers(0, len(shape)), unique=True, max_size=3))
    full = list(shape)
    for ax in sorted(axes):
        full.insert(ax, 1)
    unit = sorted(i for i, s in enumerate(full) if s == 1 and i in axes)
    t = Tensor(np.random.default_rng(0).standard_normal(full))
    back = tensor.unsqueeze(tensor.squeeze(t, unit), unit)
    assert back == t


def test_elementwise_and_matmul():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([3.0, 4.0]))
    assert tensor.elementwise("add", a, b).numpy().tolist() == [4, 6]
    assert (a * 2).numpy().tolist() == [2, 4]
    assert tensor.elementwise("max", a, 1.5).numpy().tolist() == [1.5, 2]
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert tensor.matmul(Tensor(np.eye(2)), m) == m
    with pytest.raises(ShapeError):
        tensor.elementwise("add", a, Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        tensor.matmul(m, Tensor(np.zeros((3, 2))))


def test_division_by_zero_propagates_infinity():
    out = tensor.elementwise("div", Tensor(np.array([1.0, -1.0, 0.0])), 0.0).numpy()
    assert out[0] == np.inf and out[1] == -np.inf and np.isnan(out[2])


def test_reduce():
    t = Tensor(np.array([1.0, 2.0, 3.0, 6.0]))
    assert tensor.reduce("mean", t, 0).data[0] == 3.0
    m = Tensor(np.arange(6.0).reshape(2, 3))
    assert tensor.reduce("sum", m, 1).numpy().tolist() == [3, 12]
    assert tensor.reduce("max", m).data[0] == 5
    with pytest.raises(AxisError):
        tensor.reduce("sum", m, 2)


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e6, 1e6)))
def test_full_sum_is_exactly_rounded(values):
    exact = float(sum(Fraction(v) for v in values.tolist()))
    assert tensor.reduce("sum", Tensor(values)).data[0] == exact


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (Tensor(rng.standard_normal((8, 8))) for _ in range(3))
        left = ((a @ b) @ c).numpy()
        right = (a @ (b @ c)).numpy()
        np.testing.assert_allclose(left, right, rtol=1e-5, atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_binary_format_round_trip(tmp_path, dtype):
    arr = np.random.default_rng(2).standard_normal((3, 1, 4)).astype(dtype)
    raw = tensor.to_bytes(arr)
    assert raw[:4] == b"CTNS"
    assert raw[4:7] == bytes([1, 0 if dtype == np.float32 else 1, 3])
    assert np.frombuffer(raw[7:19], "<u4").tolist() == [3, 1, 4]
    assert raw[19:] == arr.astype(np.dtype(dtype).newbyteorder("<")).tobytes()
    back = tensor.from_bytes(raw)
    assert back.dtype == dtype and np.array_equal(back.numpy(), arr)
    tensor.save_many(tmp_path / "m.ctns", [arr, arr[0]])
    assert [t.shape for t in tensor.load_many(tmp_path / "m.ctns")] == [(3, 1, 4), (1, 4)]


def test_binary_format_errors():
    with pytest.raises(FormatError):
        tensor.from_bytes(b"NOPE\x01\x00\x00")
    raw = tensor.to_bytes(np.zeros(4))
    with pytest.raises(FormatError):
        tensor.from_bytes(raw[:-1])
