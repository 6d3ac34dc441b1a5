import numpy as np
import pytest

from conftest import gradcheck
from spikemlp.layers import BatchNorm, Conv2d, Linear, Projection, conv2d, fold_bn
from spikemlp.tensor import ShapeError, Tensor

rng = np.random.default_rng(11)


def _bn(n, axis=1, gamma=1.0, beta=0.0, mean=0.0, var=1.0):
    bn = BatchNorm(n, axis=axis)
    bn.gamma.data[:] = gamma
    bn.beta.data[:] = beta
    bn.running_mean[:] = mean
    bn.running_var[:] = var
    return bn


def test_bn_two_point_normalization():
    bn = _bn(1)
    x = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
    out = bn(Tensor(x)).data.reshape(-1)
    assert np.allclose(out, [0.99999, -0.99999], atol=1e-5)
    assert abs(out[0]) < 1.0


def test_bn_eval_identity():
    bn = _bn(3, var=1.0 - 1e-5)
    bn.training = False
    x = rng.standard_normal((4, 3, 2, 2))
    assert np.allclose(bn(Tensor(x)).data, x, rtol=0, atol=1e-12)


def test_bn_train_moments():
    gamma, beta = np.array([0.5, 2.0, 1.5]), np.array([-1.0, 0.3, 2.0])
    bn = BatchNorm(3)
    bn.gamma.data[:] = gamma
    bn.beta.data[:] = beta
    out = bn(Tensor(rng.standard_normal((16, 3, 5, 5)) * 3 + 1)).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-6)
    assert np.allclose(out.var(axis=(0, 2, 3)), gamma ** 2, atol=1e-4 * gamma.max() ** 2)


def test_bn_axial_feature_axis():
    bn = BatchNorm(5, axis=2)
    out = bn(Tensor(rng.standard_normal((4, 3, 5, 6)) + 2)).data
    assert np.allclose(out.mean(axis=(0, 1, 3)), 0.0, atol=1e-9)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_bn_gradient(mode):
    bn = _bn(3, gamma=1.3, beta=0.2, mean=0.1, var=2.0)
    bn.training = mode == "train"
    x = Tensor(rng.standard_normal((4, 3, 2, 2)))
    assert gradcheck(lambda: bn(x), [x, bn.gamma, bn.beta]) < 1e-6


def test_fold_identity():
    lin = Linear(3, 4, rng=rng)
    folded = fold_bn(lin, _bn(4, var=1.0 - 1e-5), dtype=np.float64)
    assert np.allclose(folded.weight.data, lin.weight.data, rtol=1e-12)
    assert np.allclose(folded.bias.data, 0.0)


def test_fold_hand_example():
    lin = Linear(3, 4, rng=rng)
    bn = _bn(4, gamma=2.0, beta=1.0, mean=0.5, var=4.0 - 1e-5)
    bn.training = False
    folded = fold_bn(lin, bn, dtype=np.float64)
    assert np.allclose(folded.weight.data, lin.weight.data, rtol=1e-12)
    assert np.allclose(folded.bias.data, 0.5, rtol=1e-12)
    x = Tensor(rng.standard_normal((6, 3)))
    assert np.max(np.abs(folded(x).data - bn(lin(x)).data)) < 1e-5


@pytest.mark.parametrize("kind", ["channel", "height", "conv"])
def test_fold_equivalence_random(kind):
    if kind == "channel":
        layer, bn, x = Linear(5, 6, axis=1, rng=rng), BatchNorm(6, axis=1), rng.standard_normal((4, 5, 3, 3))
    elif kind == "height":
        layer, bn, x = Linear(4, 4, axis=2, rng=rng), BatchNorm(4, axis=2), rng.standard_normal((4, 2, 4, 3))
    else:
        layer, bn, x = (Conv2d(3, 6, 3, stride=2, padding=1, rng=rng), BatchNorm(6),
                        rng.standard_normal((2, 3, 8, 8)))
    bn.gamma.data[:] = rng.uniform(0.5, 2, bn.num_features)
    bn.beta.data[:] = rng.standard_normal(bn.num_features)
    bn.running_mean[:] = rng.standard_normal(bn.num_features)
    bn.running_var[:] = rng.uniform(0.5, 3, bn.num_features)
    bn.training = False
    proj = Projection(layer, bn)
    ref = proj(Tensor(x)).data
    got = proj.fold(np.float32)(Tensor(x.astype(np.float32))).data
    assert got.dtype == np.float32
    assert np.max(np.abs(got - ref)) < 1e-5


def test_fold_rejects_mismatched_axis():
    with pytest.raises(ShapeError):
        fold_bn(Linear(4, 4, axis=2), BatchNorm(4, axis=3))


def test_conv_shapes():
    conv = Conv2d(3, 6, 4, stride=4, rng=rng)
    assert conv(Tensor(np.zeros((1, 3, 8, 8)))).shape == (1, 6, 2, 2)
    assert conv.output_size(8, 8) == (2, 2)


def test_conv_one_hot_gives_translated_kernel():
    k = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out = conv2d(Tensor(x), Tensor(k), padding=1).data[0, 0]
    # cross-correlation: the impulse response is the kernel flipped in both axes
    assert np.array_equal(out[1:4, 1:4], k[0, 0, ::-1, ::-1])
    ones = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    expect = np.zeros((5, 5))
    expect[1:4, 1:4] = 1.0
    assert np.array_equal(ones, expect)


def _naive_conv(x, w, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    out[b, o, i, j] = np.sum(x[b, :, i * stride:i * stride + k, j * stride:j * stride + k] * w[o])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (4, 0)])
def test_conv_matches_naive_loop(stride, pad):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3 if stride != 4 else 4, 3 if stride != 4 else 4))
    assert np.allclose(conv2d(Tensor(x), Tensor(w), stride, pad).data, _naive_conv(x, w, stride, pad),
                       rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv_gradient(stride, pad):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    assert gradcheck(lambda: conv2d(x, w, stride, pad), [x, w]) < 1e-4


def test_linear_bias_gradient():
    lin = Linear(3, 2, axis=1, weight=rng.standard_normal((2, 3)), bias=rng.standard_normal(2))
    x = Tensor(rng.standard_normal((4, 3, 2)))
    assert gradcheck(lambda: lin(x), [x, lin.weight, lin.bias]) < 1e-6


def test_layer_shape_errors():
    with pytest.raises(ShapeError):
        Linear(3, 2)(Tensor(np.zeros((1, 4))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
