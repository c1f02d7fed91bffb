import numpy as np
import pytest

from dil.layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    batchnorm2d,
    conv2d,
    linear,
    maxpool2,
    softmax,
    upsample2,
)
from dil.tensor import Tensor, backward, clear_tape, tsum, mul
from gradcheck import check_gradients
from oracles import conv2d_loops, maxpool2_loops


@pytest.fixture(autouse=True)
def fresh_tape():
    clear_tape()
    yield
    clear_tape()


def conv_with(weight, bias, ksize=3):
    layer = Conv2d(weight.shape[1], weight.shape[0], ksize=ksize, dtype=weight.dtype)
    layer.weight = Tensor(weight, requires_grad=True)
    layer.bias = Tensor(bias, requires_grad=True)
    return layer


def test_conv2d_identity_kernel():
    w = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    layer = conv_with(w, np.zeros(2, dtype=np.float32))
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 6, 6)).astype(np.float32))
    out = conv2d(x, layer)
    assert np.allclose(out.data, x.data, atol=1e-6)


def test_conv2d_all_ones_kernel_border_effect():
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    layer = conv_with(w, np.zeros(1, dtype=np.float32))
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = conv2d(x, layer).data[0, 0]
    assert out[1, 1] == 9.0
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out[i, j] == 4.0
    # full grid against the loop oracle
    ref = conv2d_loops(x.data, w, np.zeros(1), pad=1)
    assert np.allclose(out, ref[0, 0])


def test_conv2d_matches_loop_oracle_random():
    rng = np.random.default_rng(42)
    x = rng.uniform(-2, 2, (1, 2, 6, 6)).astype(np.float32)
    w = rng.uniform(-1, 1, (3, 2, 3, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, 3).astype(np.float32)
    layer = conv_with(w, b)
    out = conv2d(Tensor(x), layer)
    ref = conv2d_loops(x, w, b, pad=1)
    assert np.max(np.abs(out.data - ref)) <= 1e-5


def test_conv2d_channel_mismatch():
    layer = Conv2d(3, 4)
    with pytest.raises(ValueError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32)), layer)


def test_conv2d_gradcheck():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-2, 2, (1, 2, 5, 5)), requires_grad=True, dtype=np.float64)
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    layer = conv_with(w, b)
    coeff = Tensor(rng.normal(size=(1, 3, 5, 5)), dtype=np.float64)

    def loss():
        return tsum(mul(conv2d(x, layer), coeff))

    check_gradients(loss, [x, layer.weight, layer.bias], rtol=1e-4)


def test_conv2d_1x1_gradcheck():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(-2, 2, (2, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    layer = conv_with(rng.uniform(-1, 1, (2, 3, 1, 1)), rng.uniform(-1, 1, 2), ksize=1)
    coeff = Tensor(rng.normal(size=(2, 2, 4, 4)), dtype=np.float64)
    check_gradients(lambda: tsum(mul(conv2d(x, layer), coeff)),
                    [x, layer.weight, layer.bias])


def test_maxpool2_basic():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    assert maxpool2(x).data[0, 0, 0, 0] == 4.0


def test_maxpool2_odd_dims_rejected():
    with pytest.raises(ValueError, match="even"):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4), dtype=np.float32)))


def test_maxpool2_tie_routes_to_first_window_element():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
    backward(tsum(maxpool2(x)))
    assert np.array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool2_matches_bruteforce():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
    out = maxpool2(Tensor(x))
    assert np.array_equal(out.data, maxpool2_loops(x))


def test_maxpool2_gradcheck():
    rng = np.random.default_rng(4)
    # distinct values so the argmax is stable under the fd perturbation
    vals = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    x = Tensor(vals, requires_grad=True)
    coeff = Tensor(rng.normal(size=(1, 1, 4, 4)), dtype=np.float64)
    check_gradients(lambda: tsum(mul(maxpool2(x), coeff)), [x])


def test_upsample2_replicates():
    x = Tensor(np.array([[[[5.0]]]], dtype=np.float32))
    assert np.array_equal(upsample2(x).data, np.full((1, 1, 2, 2), 5.0))


def test_upsample2_inverts_pool_shape():
    x = Tensor(np.zeros((2, 3, 6, 8), dtype=np.float32))
    assert upsample2(maxpool2(x)).data.shape == x.data.shape


def test_upsample2_backward_sums_blocks():
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
    backward(tsum(upsample2(x)))
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_maxpool_upsample_never_exceeds_block_max():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    up = upsample2(maxpool2(Tensor(x))).data
    block_max = x.reshape(2, 3, 4, 2, 4, 2).max(axis=(3, 5))
    assert np.all(up <= np.repeat(np.repeat(block_max, 2, 2), 2, 3) + 1e-7)


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(6)
    bn = BatchNorm2d(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)).astype(np.float32))
    out = batchnorm2d(x, bn).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-6)


def test_batchnorm_affine():
    rng = np.random.default_rng(7)
    bn = BatchNorm2d(2)
    bn.gamma = Tensor(np.full(2, 2.0, dtype=np.float32), requires_grad=True)
    bn.beta = Tensor(np.full(2, 3.0, dtype=np.float32), requires_grad=True)
    x = Tensor(rng.normal(size=(8, 2, 6, 6)).astype(np.float32))
    out = batchnorm2d(x, bn).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-5)
    assert np.allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-4)


def test_batchnorm_eval_before_training_uses_identity_stats():
    bn = BatchNorm2d(2)
    bn.training = False
    x = Tensor(np.array([[[[1.0]], [[2.0]]]], dtype=np.float32))
    out = batchnorm2d(x, bn).data
    assert np.allclose(out, x.data, atol=1e-4)


def test_batchnorm_running_stats_update():
    bn = BatchNorm2d(1)
    x = Tensor(np.full((2, 1, 2, 2), 10.0, dtype=np.float32))
    batchnorm2d(x, bn)
    assert bn.running_mean[0] == pytest.approx(1.0)  # 0.9*0 + 0.1*10
    assert bn.running_var[0] == pytest.approx(0.9)   # 0.9*1 + 0.1*0


def test_batchnorm_gradcheck_train_mode():
    rng = np.random.default_rng(8)
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=np.float64)
    bn.beta = Tensor(rng.uniform(-0.5, 0.5, 3), requires_grad=True, dtype=np.float64)
    x = Tensor(rng.uniform(-2, 2, (2, 3, 4, 4)), requires_grad=True, dtype=np.float64)
    coeff = Tensor(rng.normal(size=(2, 3, 4, 4)), dtype=np.float64)

    def loss():
        return tsum(mul(batchnorm2d(x, bn), coeff))

    check_gradients(loss, [x, bn.gamma, bn.beta], rtol=1e-3)


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5])


def test_softmax_large_logits_stable():
    out = softmax(Tensor([1000.0, 0.0]), axis=0).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)
    assert out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 5)).astype(np.float32)
    a = softmax(Tensor(x), axis=1).data
    b = softmax(Tensor(x + 7.5), axis=1).data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_softmax_sums_to_one_up_to_1e4():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1e4, 1e4, size=(20, 13)).astype(np.float32)
    s = softmax(Tensor(x), axis=1).data.astype(np.float64)
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) <= 1e-6
    assert np.all(s >= 0.0) and np.all(s <= 1.0)


def test_softmax_gradcheck():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-2, 2, (2, 4)), requires_grad=True, dtype=np.float64)
    coeff = Tensor(rng.normal(size=(2, 4)), dtype=np.float64)
    check_gradients(lambda: tsum(mul(softmax(x, axis=1), coeff)), [x])


def test_linear_identity():
    x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    w = Tensor(np.eye(2, dtype=np.float32))
    assert np.allclose(linear(x, w).data, x.data)


def test_linear_arithmetic():
    x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    w = Tensor(np.array([[1.0], [1.0]], dtype=np.float32))
    b = Tensor(np.array([0.5], dtype=np.float32))
    assert linear(x, w, b).data[0, 0] == pytest.approx(3.5)


def test_linear_dim_mismatch():
    with pytest.raises(ValueError, match="dim"):
        linear(Tensor(np.zeros((2, 3), dtype=np.float32)),
               Tensor(np.zeros((4, 5), dtype=np.float32)))


def test_linear_gradcheck_batched():
    rng = np.random.default_rng(12)
    x = Tensor(rng.uniform(-2, 2, (2, 3, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.uniform(-1, 1, 5), requires_grad=True, dtype=np.float64)
    coeff = Tensor(rng.normal(size=(2, 3, 5)), dtype=np.float64)
    check_gradients(lambda: tsum(mul(linear(x, w, b), coeff)), [x, w, b])


def test_linear_layer_class():
    lin = Linear(4, 2, rng=np.random.default_rng(0))
    out = lin(Tensor(np.zeros((3, 4), dtype=np.float32)))
    assert out.data.shape == (3, 2)
    names = [n for n, _ in lin.named_parameters()]
    assert names == ["weight", "bias"]
