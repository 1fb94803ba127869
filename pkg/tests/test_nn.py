import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crophybrid.nn import (
    AdamState,
    BatchNorm,
    Conv1d,
    Conv3d,
    Dense,
    LabelError,
    OptimizerError,
    ReLU,
    adam_step,
    grad_check,
    parallel,
    softmax,
    softmax_xent,
)
from crophybrid.nn.gradcheck import relative_error
from crophybrid.tensor import ShapeError
from oracles import naive_conv, random_conv_case


@pytest.mark.parametrize("nd", [1, 3])
def test_conv_matches_naive_reference_bitwise(nd):
    rng = np.random.default_rng(10 + nd)
    for _ in range(25):
        layer, x = random_conv_case(rng, nd)
        got = layer.forward(x)
        ref = naive_conv(x, layer.params["weight"], layer.params["bias"], layer.padding)
        assert got.shape == ref.shape
        assert got.tobytes() == ref.tobytes()


def test_conv_matches_naive_reference_gaussian():
    rng = np.random.default_rng(3)
    for _ in range(10):
        layer, x = random_conv_case(rng, 3)
        layer.params["weight"] = rng.standard_normal(layer.params["weight"].shape)
        x = rng.standard_normal(x.shape)
        ref = naive_conv(x, layer.params["weight"], layer.params["bias"], layer.padding)
        np.testing.assert_allclose(layer.forward(x), ref, rtol=1e-12, atol=1e-12)


def test_conv_delta_and_identity():
    x = np.zeros((1, 5, 5, 5, 1))
    x[0, 2, 2, 2, 0] = 1.0
    layer = Conv3d(1, 1, padding="valid", dtype=np.float64)
    layer.params["weight"][:] = 1.0
    assert np.array_equal(layer.forward(x), np.ones((1, 3, 3, 3, 1)))

    point = Conv3d(3, 1, kernel=(1, 1, 1), padding="same", dtype=np.float64)
    point.params["weight"][:] = 1.0
    x = np.random.default_rng(0).standard_normal((2, 3, 3, 3, 3))
    np.testing.assert_allclose(point.forward(x)[..., 0], x.sum(axis=-1), rtol=1e-14)


def test_conv_output_shapes():
    layer = Conv3d(13, 32)
    assert layer.forward(np.zeros((1, 7, 7, 9, 13), np.float32)).shape == (1, 5, 5, 9, 32)
    assert layer.output_shape((7, 7, 9, 13)) == (5, 5, 9, 32)
    assert Conv1d(64, 128).output_shape((9, 64)) == (9, 128)
    with pytest.raises(ShapeError):
        layer.output_shape((7, 7, 9, 12))
    with pytest.raises(ShapeError):
        Conv3d(2, 2, kernel=(2, 3, 3))


def test_conv_zero_grad():
    layer = Conv3d(2, 3, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((2, 5, 5, 5, 2))
    y = layer.forward(x, train=True)
    dx = layer.backward(np.zeros_like(y))
    assert not dx.any() and not layer.grads["weight"].any() and not layer.grads["bias"].any()


def test_conv3d_grad_check():
    rng = np.random.default_rng(4)
    rep = grad_check(Conv3d(2, 3, rng=rng), rng.standard_normal((2, 5, 5, 5, 2)))
    assert rep.passed, rep.lines()
    assert set(rep.errors) == {"input", "weight", "bias"}


def test_conv1d_wide_grad_check():
    rng = np.random.default_rng(5)
    rep = grad_check(Conv1d(64, 128, rng=rng), rng.standard_normal((1, 9, 64)))
    assert rep.passed, rep.lines()


def test_conv_threads_do_not_change_results():
    rng = np.random.default_rng(6)
    layer = Conv3d(4, 8, rng=rng)
    x = rng.standard_normal((40, 5, 5, 6, 4)).astype(np.float32)
    g = rng.standard_normal((40, 3, 3, 6, 8)).astype(np.float32)
    out = {}
    for n in (1, 4):
        with parallel.threads(n):
            y = layer.forward(x, train=True)
            dx = layer.backward(g)
            out[n] = (y.tobytes(), dx.tobytes(), layer.grads["weight"].tobytes(), layer.grads["bias"].tobytes())
    assert out[1] == out[4]


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(7)
    x = rng.normal(3.0, 2.0, size=(64, 5, 4))
    bn = BatchNorm(4, dtype=np.float64)
    y = bn.forward(x, train=True).reshape(-1, 4)
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-5)
    bn.params["gamma"][:] = 2.0
    bn.params["beta"][:] = 1.0
    y = bn.forward(x, train=True).reshape(-1, 4)
    np.testing.assert_allclose(y.mean(axis=0), 1, atol=1e-5)
    np.testing.assert_allclose(y.std(axis=0), 2, atol=1e-4)


def test_batchnorm_running_stats_and_constant_batch():
    bn = BatchNorm(2, dtype=np.float64)
    x = np.array([[1.0, 5.0], [3.0, 5.0]])
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], [0.2, 0.5])
    np.testing.assert_allclose(bn.buffers["running_var"], [0.9 + 0.1 * 1.0, 0.9])
    assert np.all(y[:, 1] == 0)  # zero variance channel -> 0, no division blow-up
    single = BatchNorm(3, dtype=np.float64).forward(np.ones((1, 3)), train=True)
    assert np.all(single == 0)


def test_batchnorm_infer_is_batch_independent():
    rng = np.random.default_rng(8)
    bn = BatchNorm(3, dtype=np.float64)
    for _ in range(5):
        bn.forward(rng.standard_normal((16, 3)), train=True)
    x = rng.standard_normal((10, 3))
    full = bn.forward(x)
    for i in range(10):
        assert np.array_equal(bn.forward(x[i:i + 1])[0], full[i])
    scale = bn.params["gamma"] / np.sqrt(bn.buffers["running_var"] + bn.epsilon)
    np.testing.assert_allclose(full, (x - bn.buffers["running_mean"]) * scale + bn.params["beta"], rtol=1e-12)


def test_batchnorm_grad_check():
    rng = np.random.default_rng(9)
    bn = BatchNorm(3)
    bn.params["gamma"] = rng.uniform(0.5, 2, 3).astype(np.float32)
    bn.params["beta"] = rng.standard_normal(3).astype(np.float32)
    rep = grad_check(bn, rng.standard_normal((6, 2, 3)))
    assert rep.passed, rep.lines()


def test_dense_grad_check_and_shapes():
    rng = np.random.default_rng(11)
    d = Dense(5, 3, rng=rng)
    assert d.params["weight"].shape == (3, 5)
    assert grad_check(d, rng.standard_normal((4, 5))).passed
    with pytest.raises(ShapeError):
        d.forward(np.zeros((2, 4)))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)))
def test_relu_and_softmax_properties(x):
    assert np.all(ReLU().forward(x) >= 0)
    p = softmax(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_xent_values():
    loss, _ = softmax_xent(np.zeros((3, 10)), [0, 4, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    loss, _ = softmax_xent(np.array([[100.0, 0.0, 0.0]]), [0])
    assert loss < 1e-40
    with pytest.raises(LabelError):
        softmax_xent(np.zeros((2, 3)), [0, 3])


def test_softmax_xent_gradient_fd():
    rng = np.random.default_rng(12)
    logits = rng.standard_normal((4, 10))
    labels = rng.integers(0, 10, 4)
    _, g = softmax_xent(logits, labels)
    num = np.zeros_like(logits)
    h = 1e-5
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (softmax_xent(up, labels)[0] - softmax_xent(down, labels)[0]) / (2 * h)
    assert relative_error(g, num) < 1e-4


def test_adam_zero_gradient_and_first_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.zeros(3)}, st_)
    assert p["w"].tolist() == [1.0, -2.0, 3.0] and st_.step == 1

    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = np.array([0.5, -4.0, 1e-3])
    adam_step(p, {"w": g}, AdamState(lr=0.01))
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g), rtol=0, atol=1e-7)


def test_adam_two_steps_hand_unrolled():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    g, w0 = 0.3, 2.0
    p = {"w": np.array([w0])}
    st_ = AdamState(lr=lr)
    adam_step(p, {"w": np.array([g])}, st_)
    adam_step(p, {"w": np.array([g])}, st_)
    w = w0
    m = v = 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert abs(p["w"][0] - w) < 1e-12


def test_adam_rejects_non_finite():
    p = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(OptimizerError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, AdamState())
    assert p["a"].tolist() == [1.0, 1.0]


def test_grad_check_detects_corruption():
    rng = np.random.default_rng(13)

    class Broken(Dense):
        def backward(self, grad):
            dx = super().backward(grad)
            self.grads["weight"] = self.grads["weight"] * 1.01
            return dx

    rep = grad_check(Broken(4, 3, rng=rng), rng.standard_normal((5, 4)))
    assert not rep.passed
    assert rep.errors["weight"] > 1e-4 and rep.errors["bias"] < 1e-4


def test_grad_check_all_zero_layer_is_exact():
    d = Dense(3, 2)
    d.params["weight"][:] = 0
    rep = grad_check(d, np.zeros((2, 3)))
    assert rep.errors["input"] == 0.0 and rep.max_error < 1e-9
