import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oslr import ops
from oslr.autodiff import Tape, Tensor, backward, sum_all
from oslr.errors import ShapeError
from oslr.gradcheck import CASES, run_case

from .oracles import conv_direct


def conv(x, w, b=None, **kw):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[3]) if b is None else b
    return ops.conv2d(Tensor(x), ops.ConvParams(Tensor(w), Tensor(b), **kw)).data


# -- conv2d ---------------------------------------------------------------


def test_conv_1x1_identity():
    x = np.random.default_rng(0).normal(size=(5, 7, 1))
    np.testing.assert_array_equal(conv(x, np.ones((1, 1, 1, 1))), x)


def test_conv_all_ones_window_counts():
    out = conv(np.ones((4, 4, 1)), np.ones((3, 3, 1, 1)))[..., 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize(
    "k,stride,padding,size",
    [(1, 1, "same", (5, 4)), (2, 1, "same", (5, 6)), (3, 1, "same", (6, 5)), (3, 1, "valid", (6, 6)), (3, 2, "same", (7, 6)), (2, 2, "valid", (6, 6))],
)
def test_conv_matches_window_loops(k, stride, padding, size):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(*size, 3))
    w = rng.normal(size=(k, k, 3, 2))
    b = rng.normal(size=2)
    np.testing.assert_allclose(conv(x, w, b, stride=stride, padding=padding), conv_direct(x, w, b, stride, padding), atol=1e-12)


def test_conv_2x2_same_pads_bottom_right():
    x = np.zeros((3, 3, 1))
    x[0, 0] = 1.0
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = 1.0  # picks the top-left tap of each window
    out = conv(x, w)[..., 0]
    assert out[0, 0] == 1.0 and out.sum() == 1.0


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    batched = conv(x, w)
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv(x[i], w), atol=1e-12)


def test_conv_first_encoder_stage_width():
    x = np.zeros((256, 256, 3), dtype=np.float32)
    w = np.zeros((3, 3, 3, 64), dtype=np.float32)
    out = ops.conv2d(Tensor(x), ops.ConvParams(Tensor(w), Tensor(np.zeros(64, np.float32))))
    assert out.shape == (256, 256, 64)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)))
    with pytest.raises(ShapeError):
        ops.ConvParams(Tensor(np.ones((5, 5, 1, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        ops.ConvParams(Tensor(np.ones((3, 3, 1, 2))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        conv(np.ones((2, 2, 1)), np.ones((3, 3, 1, 1)), padding="valid")


# -- pooling and resampling ------------------------------------------------


def test_maxpool_constant():
    out = ops.maxpool2x2(Tensor(np.full((6, 4, 2), 3.5))).data
    assert out.shape == (3, 2, 2)
    assert np.all(out == 3.5)


def test_maxpool_block():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert ops.maxpool2x2(Tensor(x)).data.item() == 4.0


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.array([[2.0, 2.0], [2.0, 1.0]])[..., None], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(ops.maxpool2x2(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad[..., 0], [[1.0, 0.0], [0.0, 0.0]])


def test_five_pools_reach_eight():
    x = Tensor(np.zeros((256, 256, 1), dtype=np.float32))
    for _ in range(5):
        x = ops.maxpool2x2(x)
    assert x.shape == (8, 8, 1)


def test_maxpool_odd_size_rejected():
    with pytest.raises(ShapeError):
        ops.maxpool2x2(Tensor(np.zeros((5, 4, 1))))


def test_upsample_single_pixel():
    out = ops.upsample_nearest2x(Tensor(np.full((1, 1, 1), 7.0))).data
    np.testing.assert_array_equal(out, np.full((2, 2, 1), 7.0))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)), elements=st.floats(-10, 10)))
@settings(max_examples=40, deadline=None)
def test_upsample_then_average_pool_is_identity(x):
    up = ops.upsample_nearest2x(Tensor(x)).data
    h, w, c = x.shape
    pooled = up.reshape(h, 2, w, 2, c).mean(axis=(1, 3))
    np.testing.assert_allclose(pooled, x, rtol=0, atol=1e-12)


def test_upconv_doubles_resolution():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 4, 8)))
    p = ops.ConvParams(Tensor(rng.normal(size=(2, 2, 8, 4))), Tensor(np.zeros(4)))
    assert ops.conv2d(ops.upsample_nearest2x(x), p).shape == (8, 8, 4)


def test_tile_identity_and_slices():
    code = np.random.default_rng(3).normal(size=(1, 1, 5))
    np.testing.assert_array_equal(ops.tile_spatial(Tensor(code), 1, 1).data, code)
    out = ops.tile_spatial(Tensor(code), 3, 4).data
    for i in range(3):
        for j in range(4):
            np.testing.assert_array_equal(out[i, j], code[0, 0])


def test_tile_full_size_code():
    out = ops.tile_spatial(Tensor(np.zeros((1, 1, 512), np.float32)), 8, 8)
    assert out.shape == (8, 8, 512)


def test_tile_rejects_non_vector():
    with pytest.raises(ShapeError):
        ops.tile_spatial(Tensor(np.zeros((2, 1, 3))), 4, 4)


def test_concat_widths_and_slices():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(8, 8, 64))
    tiled = ops.tile_spatial(Tensor(rng.normal(size=(1, 1, 512))), 8, 8)
    out = ops.concat_channels(Tensor(a), tiled)
    assert out.shape == (8, 8, 576)
    np.testing.assert_array_equal(out.data[..., :64], a)


def test_concat_empty_is_identity():
    a = np.random.default_rng(5).normal(size=(3, 3, 2))
    np.testing.assert_array_equal(ops.concat_channels(Tensor(a), Tensor(np.zeros((3, 3, 0)))).data, a)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels(Tensor(np.zeros((3, 3, 1))), Tensor(np.zeros((3, 4, 1))))


# -- activations ------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_sigmoid_at_zero():
    assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_sigmoid_extremes_finite():
    out = ops.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_sigmoid_monotone(x):
    xs = np.sort(x)
    out = ops.sigmoid(Tensor(xs)).data
    assert np.all(np.diff(out) >= 0)
    assert np.all((out >= 0) & (out <= 1))


# -- cosine ablation pieces --------------------------------------------------


def test_cosine_parallel_and_orthogonal():
    v = np.array([[[1.0, 2.0, 0.0]]])
    f = np.array([[[2.0, 4.0, 0.0], [-2.0, 1.0, 5.0]]])
    cos = ops.cosine_map(Tensor(f), Tensor(v)).data[..., 0]
    np.testing.assert_allclose(cos, [[1.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(np.tanh(cos), [[math.tanh(1.0), 0.0]])
    assert math.tanh(1.0) == pytest.approx(0.761594, abs=1e-6)


def test_cosine_zero_norm():
    cos = ops.cosine_map(Tensor(np.zeros((2, 2, 3))), Tensor(np.ones((1, 1, 3)))).data
    assert np.all(cos == 0)


# -- loss ----------------------------------------------------------------------


def test_bce_example():
    pred = Tensor(np.array([[0.9, 0.1], [0.8, 0.2]]))
    target = np.array([[1.0, 0.0], [1.0, 0.0]])
    direct = -(math.log(0.9) + math.log(0.9) + math.log(0.8) + math.log(0.8)) / 4
    assert ops.bce_loss(pred, target).item() == pytest.approx(direct, abs=1e-12)
    assert direct == pytest.approx(0.164252, abs=1e-6)


def test_bce_half_is_ln2():
    target = (np.random.default_rng(6).random((7, 5)) > 0.3).astype(float)
    assert ops.bce_loss(Tensor(np.full((7, 5), 0.5)), target).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert ops.bce_loss(Tensor(target.copy()), target).item() <= -math.log(1 - ops.BCE_EPS) + 1e-15


@given(
    arrays(np.float64, (3, 4), elements=st.floats(0.001, 0.999)),
    arrays(np.bool_, (3, 4)),
)
@settings(max_examples=40, deadline=None)
def test_bce_matches_direct_sum(pred, target):
    t = target.astype(float)
    direct = -sum(
        math.log(p) if y else math.log(1 - p) for p, y in zip(pred.ravel(), target.ravel())
    ) / pred.size
    assert ops.bce_loss(Tensor(pred), t).item() == pytest.approx(direct, rel=1e-12)


def test_bce_clamped_positions_get_no_gradient():
    pred = Tensor(np.array([0.0, 1.0, 0.3, 0.6]), requires_grad=True)
    with Tape() as tape:
        loss = ops.bce_loss(pred, np.array([1.0, 0.0, 1.0, 0.0]))
    backward(tape, loss)
    assert np.isfinite(loss.item())
    assert pred.grad[0] == 0 and pred.grad[1] == 0
    assert pred.grad[2] == pytest.approx(-1 / (0.3 * 4))


def test_bce_rejects_non_binary_target():
    with pytest.raises(ValueError):
        ops.bce_loss(Tensor(np.full(3, 0.5)), np.array([0.0, 0.5, 1.0]))


# -- gradient suite -------------------------------------------------------------


@pytest.mark.parametrize("name", [n for n in CASES if not n.startswith("end_to_end")])
def test_op_gradients(name):
    result = run_case(name, seeds=10)
    assert result.passed, f"{name}: {result.max_error:.3e}"
