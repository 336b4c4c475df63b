import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pskill import nn
from pskill.errors import ShapeError

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


def conv_ref(x, w, b, stride):
    """Direct loop cross-correlation on (N, H, W, C) input, (O, C, k, k) weights."""
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    y = np.zeros((n, ho, wo, o))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]  # n, kh, kw, c
            y[:, i, j, :] = np.einsum("nhwc,ochw->no", patch, w) + b
    return y


def test_dense_identity():
    x = rng().standard_normal((3, 4)).astype(np.float32)
    layer = nn.Dense(np.eye(4, dtype=np.float32), np.zeros(4, np.float32))
    np.testing.assert_array_equal(nn.layer_forward(layer, x), x)
    up = rng(1).standard_normal((3, 4)).astype(np.float32)
    dx, _ = nn.layer_backward(layer, x, up)
    np.testing.assert_array_equal(dx, up)


def test_relu_values():
    np.testing.assert_array_equal(nn.layer_forward(nn.ReLU(), np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])


def test_conv_1x1_hand_value():
    layer = nn.Conv2D(np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
    assert nn.layer_forward(layer, np.array([[[[2.0]]]])).item() == 7.0


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loop(stride):
    r = rng(2)
    x = r.standard_normal((2, 9, 11, 3))
    w = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    np.testing.assert_allclose(nn.layer_forward(nn.Conv2D(w, b, stride), x), conv_ref(x, w, b, stride), atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError, match=r"\(2, 5\)"):
        nn.Dense(np.zeros((4, 3)), np.zeros(3)).forward(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        nn.Conv2D(np.zeros((2, 3, 3, 3)), np.zeros(2)).forward(np.zeros((1, 5, 5, 4)))
    layer = nn.Dense(np.zeros((4, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        nn.layer_backward(layer, np.zeros((2, 4)), np.zeros((2, 4)))


@pytest.mark.parametrize(
    "layer,x_shape",
    [
        (nn.Dense(np.ones((4, 3)), np.ones(3)), (2, 4)),
        (nn.Conv2D(np.ones((2, 3, 3, 3)), np.ones(2), 1), (2, 6, 6, 3)),
        (nn.ReLU(), (2, 5)),
        (nn.SpatialSoftmax(), (2, 4, 5, 3)),
    ],
)
def test_zero_upstream_gives_zero_grads(layer, x_shape):
    x = rng().standard_normal(x_shape)
    y = nn.layer_forward(layer, x)
    dx, grads = nn.layer_backward(layer, x, np.zeros_like(y))
    assert not dx.any()
    assert all(not g.any() for g in grads.values())


def _check_layer(layer, x, eps=1e-6):
    r = rng(7)
    layer_params = {k: v.astype(F64) for k, v in layer.params.items()}
    for k, v in layer_params.items():
        setattr(layer, k, v)
    y = nn.layer_forward(layer, x)
    fn = nn.layer_unit(layer, r, y.shape)
    return nn.grad_check(fn, {"input": x, **layer_params}, eps=eps, threshold=1e-3)


def test_gradcheck_dense():
    r = rng(3)
    layer = nn.Dense(r.standard_normal((5, 3)), r.standard_normal(3))
    report = _check_layer(layer, r.standard_normal((4, 5)))
    assert report.passed, str(report)


@pytest.mark.parametrize("stride", [1, 2])
def test_gradcheck_conv(stride):
    r = rng(4)
    layer = nn.Conv2D(r.standard_normal((3, 2, 3, 3)), r.standard_normal(3), stride)
    report = _check_layer(layer, r.standard_normal((2, 4 + stride, 4 + stride, 2)))
    assert report.passed, str(report)


def test_gradcheck_relu_off_kink():
    eps = 1e-3
    r = rng(5)
    x = r.uniform(2 * eps + 1e-3, 2.0, (3, 6)) * r.choice([-1, 1], (3, 6))
    report = _check_layer(nn.ReLU(), x, eps=eps)
    assert report.passed, str(report)
    assert report.skipped_kinks == 0


def test_gradcheck_relu_skips_kink_crossings():
    x = np.array([[1e-5, -0.5, 0.7]])
    report = _check_layer(nn.ReLU(), x, eps=1e-3)
    assert report.skipped_kinks == 1 and report.passed


def test_gradcheck_spatial_softmax():
    report = _check_layer(nn.SpatialSoftmax(), rng(6).standard_normal((2, 5, 6, 3)) * 2)
    assert report.passed, str(report)


def test_gradcheck_spatial_softmax_temperature():
    report = _check_layer(nn.SpatialSoftmax(0.5), rng(8).standard_normal((1, 4, 4, 2)))
    assert report.passed, str(report)


def test_gradcheck_detects_wrong_gradient():
    def fn(arrays):
        x = arrays["x"]
        return float(np.sum(x ** 3)), {"x": 2 * x ** 2}

    report = nn.grad_check(fn, {"x": np.array([1.0, 2.0])}, eps=1e-5)
    assert not report.passed
    assert report.max_rel_error["x"] == pytest.approx(1 / 3, rel=1e-3)


def test_gradcheck_subsamples_large_arrays():
    def fn(arrays):
        x = arrays["x"]
        return float(np.sum(x ** 2)), {"x": 2 * x}

    report = nn.grad_check(fn, {"x": rng().standard_normal(500)}, eps=1e-5, max_coords=50)
    assert report.probes["x"] == 50 and report.passed


def test_relative_error_formula():
    assert nn.relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert nn.relative_error(0.0, 0.0) == 0.0
    assert nn.relative_error(0.0, 1e-9) == pytest.approx(0.1)


# spatial softmax -------------------------------------------------------------


def test_spatial_softmax_uniform_map():
    out = nn.spatial_softmax(np.full((3, 8, 8), 0.7))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def _spike_reference(h, w, i, j, mag):
    """Independent: explicit softmax sum over every pixel centre."""
    z = np.zeros((h, w))
    z[i, j] = mag
    wts = np.exp(z - z.max())
    wts /= wts.sum()
    xs = np.array([-1 + 2 * c / (w - 1) for c in range(w)])
    ys = np.array([-1 + 2 * r / (h - 1) for r in range(h)])
    return (wts * xs[None, :]).sum(), (wts * ys[:, None]).sum()


def test_spatial_softmax_corner_spike():
    maps = np.zeros((1, 8, 8))
    maps[0, 0, 0] = 50.0
    out = nn.spatial_softmax(maps)
    np.testing.assert_allclose(out, [-1.0, -1.0], atol=1e-3)
    np.testing.assert_allclose(out, _spike_reference(8, 8, 0, 0, 50.0), atol=1e-12)


@pytest.mark.parametrize("i,j", [(3, 5), (7, 0), (2, 6)])
def test_spatial_softmax_spike_location(i, j):
    maps = np.zeros((2, 8, 10))
    maps[1, i, j] = 50.0
    out = nn.spatial_softmax(maps)
    np.testing.assert_allclose(out[2:], [-1 + 2 * j / 9, -1 + 2 * i / 7], atol=1e-3)
    np.testing.assert_allclose(out[:2], [0, 0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(1, 4), st.floats(0.05, 10), st.integers(0, 2**31))
def test_spatial_softmax_properties(h, w, c, temp, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w, c)) * 5
    layer = nn.SpatialSoftmax(temp)
    alpha = layer.attention(x)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
    out = nn.layer_forward(layer, x.astype(np.float32))
    assert out.shape == (2, 2 * c)
    assert np.all(np.abs(out) <= 1.0 + 1e-6)


def test_spatial_softmax_temperature_convergence():
    maps = np.zeros((1, 8, 8))
    maps[0, 5, 2] = 1.0
    maps[0, 1, 6] = 0.6
    target = np.array([-1 + 2 * 2 / 7, -1 + 2 * 5 / 7])
    dists = [np.linalg.norm(nn.spatial_softmax(maps, t) - target) for t in (2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.02)]
    assert all(b < a for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 1e-3


def test_spatial_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        nn.spatial_softmax(np.zeros((1, 2, 2)), 0.0)
    with pytest.raises(ValueError):
        nn.SpatialSoftmax(-1.0)


def test_forward_deterministic():
    r = rng(9)
    layer = nn.Conv2D(r.standard_normal((4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32), 2)
    x = r.standard_normal((5, 12, 12, 3)).astype(np.float32)
    assert nn.layer_forward(layer, x).tobytes() == nn.layer_forward(layer, x).tobytes()


def test_float32_preserved():
    r = rng(10)
    x = r.standard_normal((2, 6, 6, 4)).astype(np.float32)
    layer = nn.Conv2D(r.standard_normal((3, 4, 3, 3)).astype(np.float32), np.zeros(3, np.float32))
    y = nn.layer_forward(layer, x)
    assert y.dtype == np.float32
    assert nn.layer_forward(nn.SpatialSoftmax(), y).dtype == np.float32


def test_he_uniform_std():
    w = nn.he_uniform(rng(), (64, 400), 400)
    assert abs(w.std() / np.sqrt(2 / 400) - 1) < 0.1
