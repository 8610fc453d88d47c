import numpy as np
import pytest

from tinysel.layers import (
    Conv1D,
    FullyConnected,
    LayerSpec,
    MaxPool1D,
    ReLU,
    ShapeError,
    Softmax,
    concat_channels,
    softmax,
)

from oracles import fd_array_grad, naive_conv1d, naive_maxpool1d, rel_err


def test_layerspec_validation():
    with pytest.raises(ValueError):
        LayerSpec("unknown-kind")
    with pytest.raises(ValueError):
        LayerSpec("conv1d", out_channels=4)  # missing kernel_width
    with pytest.raises(ValueError):
        LayerSpec("fully-connected")
    with pytest.raises(ValueError):
        LayerSpec("maxpool1d")


def test_layerspec_json_round_trip():
    spec = LayerSpec("conv1d", out_channels=8, kernel_width=5)
    assert LayerSpec.from_json(spec.to_json()) == spec
    spec = LayerSpec("relu")
    assert LayerSpec.from_json(spec.to_json()) == spec


def test_fc_identity():
    fc = FullyConnected(4, 4)
    fc.params["w"] = np.eye(4, dtype=np.float32)
    x = np.array([[1.0, -2.0, 3.0, 0.5]], dtype=np.float32)
    y, _ = fc.forward(x)
    np.testing.assert_array_equal(y, x)


def test_hand_convolution():
    # all-ones width-3 filter over [1,2,3,4] with same padding -> [3,6,9,7]
    conv = Conv1D(1, 4, 1, 3)
    conv.params["w"] = np.ones((1, 1, 3), dtype=np.float32)
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]], dtype=np.float32)
    y, _ = conv.forward(x)
    np.testing.assert_allclose(y[0, 0], [3.0, 6.0, 9.0, 7.0])


@pytest.mark.parametrize("c,l,f,k", [(1, 8, 2, 3), (3, 16, 4, 5), (2, 7, 3, 4),
                                     (5, 12, 1, 1), (2, 9, 2, 7)])
def test_conv_forward_matches_naive(c, l, f, k):
    rng = np.random.default_rng(hash((c, l, f, k)) % 2 ** 31)
    conv = Conv1D(c, l, f, k, rng=rng, dtype=np.float64)
    x = rng.normal(size=(3, c, l))
    y, _ = conv.forward(x)
    ref = naive_conv1d(x, conv.params["w"], conv.params["b"])
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("p,l", [(2, 8), (3, 10), (2, 9), (4, 7)])
def test_maxpool_matches_naive(p, l):
    rng = np.random.default_rng(p * 100 + l)
    pool = MaxPool1D(3, l, p)
    x = rng.normal(size=(2, 3, l))
    y, _ = pool.forward(x)
    np.testing.assert_allclose(y, naive_maxpool1d(x, p))


def test_maxpool_tie_breaks_to_lowest_index():
    pool = MaxPool1D(1, 4, 2)
    x = np.array([[[5.0, 5.0, 1.0, 1.0]]], dtype=np.float32)
    y, idx = pool.forward(x)
    assert y[0, 0, 0] == 5.0
    dy = np.ones_like(y)
    dx, _ = pool.backward(dy, idx)
    # gradient must flow to the first of the tied positions only
    np.testing.assert_array_equal(dx[0, 0], [1.0, 0.0, 1.0, 0.0])


def test_maxpool_drops_trailing_remainder():
    pool = MaxPool1D(1, 5, 2)
    x = np.array([[[1.0, 2.0, 3.0, 4.0, 99.0]]], dtype=np.float32)
    y, idx = pool.forward(x)
    assert y.shape == (1, 1, 2)
    dx, _ = pool.backward(np.ones_like(y), idx)
    assert dx[0, 0, 4] == 0.0


def test_relu_and_softmax_forward():
    relu = ReLU((2, 3))
    x = np.array([[[-1.0, 0.0, 2.0], [3.0, -4.0, 5.0]]])
    y, _ = relu.forward(x)
    np.testing.assert_array_equal(y, np.maximum(x, 0))
    p = softmax(np.array([0.0, 0.0]))
    np.testing.assert_allclose(p, [0.5, 0.5])
    # max-subtraction keeps huge logits finite
    p = softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(p).all() and p[0] > 0.999


def test_shape_errors():
    conv = Conv1D(3, 8, 2, 3)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 2, 8), dtype=np.float32))
    fc = FullyConnected(10, 4)
    with pytest.raises(ShapeError):
        fc.forward(np.zeros((1, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((1, 2, 8)), np.zeros((1, 2, 7))])


def _layer_fd_check(layer, x, seed, tol):
    """Finite-difference input gradient for a single layer under a random
    linear functional of its output."""
    rng = np.random.default_rng(seed)
    y, cache = layer.forward(x)
    proj = rng.normal(size=y.shape)

    def loss():
        out, _ = layer.forward(x)
        return float((out * proj).sum())

    dx, grads = layer.backward(proj.astype(x.dtype), cache)
    fd = fd_array_grad(loss, x, eps=1e-5)
    assert rel_err(dx, fd) < tol
    return grads, loss


@pytest.mark.parametrize("seed", range(4))
def test_layer_gradients_f64(seed):
    """Every layer kind against central finite differences in float64."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8))

    conv = Conv1D(3, 8, 4, 3, rng=rng, dtype=np.float64)
    grads, loss = _layer_fd_check(conv, x.copy(), seed, 1e-6)
    for key in ("w", "b"):
        fd = fd_array_grad(loss, conv.params[key], eps=1e-5)
        assert rel_err(grads[key], fd) < 1e-6

    pool = MaxPool1D(3, 8, 2)
    _layer_fd_check(pool, x.copy() + rng.normal(size=x.shape) * 0.01, seed, 1e-6)

    relu = ReLU((3, 8))
    _layer_fd_check(relu, x.copy() + 0.001, seed, 1e-6)

    fc = FullyConnected(24, 5, rng=rng, dtype=np.float64)
    grads, loss = _layer_fd_check(fc, x.copy(), seed, 1e-6)
    for key in ("w", "b"):
        fd = fd_array_grad(loss, fc.params[key], eps=1e-5)
        assert rel_err(grads[key], fd) < 1e-6

    sm = Softmax((5,))
    z = rng.normal(size=(2, 5))
    _layer_fd_check(sm, z, seed, 1e-6)
