"""Tests for the differentiable layers."""

import numpy as np
import pytest

from tract_stack.diffcore import (
    ConcatChannels,
    Conv2d,
    Dropout,
    Layer,
    MaxPool2,
    ReLU,
    Softmax2,
    UpConv2,
    concat_channels,
    maxpool2,
    new_generator,
    softmax2,
)
from tract_stack.errors import ConfigError, ShapeError
from tract_stack.gradcheck import grad_check

from conftest import seeded


# --- conv2d ---


def test_conv_identity_kernel_is_identity():
    x = seeded((2, 3, 5, 4))
    conv = Conv2d(3, 3)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0

    out = conv.forward(x, {"w": w, "b": np.zeros(3)})

    np.testing.assert_array_equal(out, x)


def test_conv_output_shape_and_bias():
    conv = Conv2d(2, 5)
    params = {"w": np.zeros((5, 2, 3, 3), dtype=np.float32), "b": np.arange(5, dtype=np.float32)}

    out = conv.forward(np.ones((1, 2, 6, 7), dtype=np.float32), params)

    assert out.shape == (1, 5, 6, 7)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out[0, :, 3, 3], np.arange(5))


def test_conv_matches_direct_sum():
    x = seeded((1, 2, 4, 5), 1)
    w = seeded((3, 2, 3, 3), 2)
    b = seeded((3,), 3)
    out = Conv2d(2, 3).forward(x, {"w": w, "b": b})

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros_like(out)
    for o in range(3):
        for i in range(4):
            for j in range(5):
                expected[0, o, i, j] = np.sum(padded[0, :, i : i + 3, j : j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_conv_channel_mismatch():
    conv = Conv2d(3, 2)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 2, 4, 4)), {"w": np.zeros((2, 3, 3, 3)), "b": np.zeros(2)})


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        Conv2d(1, 1, kernel=2)


def test_conv_gradient():
    conv = Conv2d(2, 3)
    params = {"w": seeded((3, 2, 3, 3), 1), "b": seeded((3,), 2)}
    assert grad_check(conv, seeded((1, 2, 3, 3), 7), params, eps=1e-3, seed=7) < 1e-3


def test_linear_1x1_conv_gradient():
    conv = Conv2d(4, 2, kernel=1)
    params = {"w": seeded((2, 4, 1, 1), 1), "b": seeded((2,), 2)}
    assert grad_check(conv, seeded((2, 4, 3, 3), 3), params) < 1e-4


# --- relu / maxpool ---


def test_relu_forward_backward():
    relu = ReLU()
    x = np.array([[[[-1.0, 2.0], [0.0, 3.0]]]])
    out = relu.forward(x)
    dx, grads = relu.backward(np.ones_like(x))

    np.testing.assert_array_equal(out, [[[[0.0, 2.0], [0.0, 3.0]]]])
    np.testing.assert_array_equal(dx, [[[[0.0, 1.0], [0.0, 1.0]]]])
    assert grads == {}


def test_maxpool_values_and_indices():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out, idx = maxpool2(x)

    np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])
    assert np.all(idx == 3)


def test_maxpool_ties_pick_lowest_index():
    out, idx = maxpool2(np.ones((1, 2, 2, 2)))
    np.testing.assert_array_equal(out, np.ones((1, 2, 1, 1)))
    assert np.all(idx == 0)


def test_maxpool_backward_routes_to_argmax():
    pool = MaxPool2()
    x = np.array([[[[1.0, 4.0], [3.0, 2.0]]]])
    pool.forward(x)
    dx, _ = pool.backward(np.array([[[[5.0]]]]))
    np.testing.assert_array_equal(dx, [[[[0.0, 5.0], [0.0, 0.0]]]])


def test_maxpool_odd_size_rejected():
    with pytest.raises(ShapeError):
        maxpool2(np.zeros((1, 1, 3, 4)))


# --- upconv ---


def test_upconv_broadcast_case():
    up = UpConv2(1, 1)
    out = up.forward(np.full((1, 1, 1, 1), 2.5), {"w": np.ones((1, 1, 2, 2))})
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))


def test_upconv_output_shape():
    up = UpConv2(4, 3)
    out = up.forward(np.zeros((2, 4, 5, 7)), {"w": np.zeros((4, 3, 2, 2))})
    assert out.shape == (2, 3, 10, 14)


def test_upconv_gradient():
    up = UpConv2(2, 3)
    assert grad_check(up, seeded((1, 2, 3, 3), 4), {"w": seeded((2, 3, 2, 2), 5)}) < 1e-3


# --- concat ---


def test_concat_shapes_and_order():
    a, b = np.zeros((1, 2, 2, 2)), np.ones((1, 3, 2, 2))
    out = concat_channels(a, b)
    assert out.shape == (1, 5, 2, 2)
    assert out[:, :2].sum() == 0 and np.all(out[:, 2:] == 1)


def test_concat_with_empty_is_identity():
    x = seeded((1, 3, 2, 2))
    np.testing.assert_array_equal(concat_channels(x, np.zeros((1, 0, 2, 2))), x)


def test_concat_backward_splits():
    layer = ConcatChannels()
    layer.forward((np.zeros((1, 2, 3, 3)), np.zeros((1, 1, 3, 3))))
    (da, db), _ = layer.backward(np.ones((1, 3, 3, 3)))
    assert da.shape == (1, 2, 3, 3) and db.shape == (1, 1, 3, 3)
    assert np.all(da == 1) and np.all(db == 1)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# --- dropout ---


def test_dropout_identity_cases():
    x = seeded((2, 3, 4, 4))
    eval_mode = Dropout(0.4)
    np.testing.assert_array_equal(eval_mode.forward(x), x)

    no_drop = Dropout(0.0)
    no_drop.training = True
    np.testing.assert_array_equal(no_drop.forward(x), x)


def test_dropout_statistics():
    layer = Dropout(0.4, rng=new_generator(11))
    layer.training = True
    x = np.ones((1, 1, 1000, 1000))

    out = layer.forward(x)

    assert abs(np.mean(out == 0) - 0.4) < 0.003
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_reuses_mask_in_backward():
    layer = Dropout(0.5, rng=new_generator(1))
    layer.training = True
    out = layer.forward(np.ones((1, 2, 4, 4)))
    dx, _ = layer.backward(np.ones((1, 2, 4, 4)))
    np.testing.assert_array_equal(dx, out)


def test_dropout_reseed_is_deterministic():
    layer = Dropout(0.3)
    layer.training = True
    x = seeded((1, 2, 8, 8))
    layer.reseed(5)
    first = layer.forward(x)
    layer.reseed(5)
    assert first.tobytes() == layer.forward(x).tobytes()


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_invalid_probability(p):
    with pytest.raises(ConfigError):
        Dropout(p)


# --- softmax ---


def test_softmax_symmetric_and_stable():
    np.testing.assert_allclose(softmax2(np.zeros((1, 2, 1, 1)))[0, :, 0, 0], [0.5, 0.5])
    big = softmax2(np.array([[[[1000.0]], [[0.0]]]]))
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big[0, :, 0, 0], [1.0, 0.0])


def test_softmax_sums_to_one():
    s = softmax2(seeded((3, 2, 5, 5), 9, np.float32) * 5)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((s > 0) & (s < 1))


def test_softmax_needs_two_channels():
    with pytest.raises(ShapeError):
        softmax2(np.zeros((1, 3, 2, 2)))


def test_layers_satisfy_protocol():
    for layer in (Conv2d(1, 1), ReLU(), MaxPool2(), UpConv2(1, 1), ConcatChannels(), Dropout(0.1), Softmax2()):
        assert isinstance(layer, Layer)


def test_ops_are_deterministic():
    conv = Conv2d(2, 2)
    params = {"w": seeded((2, 2, 3, 3), 1, np.float32), "b": np.zeros(2, np.float32)}
    x = seeded((2, 2, 6, 6), 2, np.float32)
    assert conv.forward(x, params).tobytes() == conv.forward(x, params).tobytes()
