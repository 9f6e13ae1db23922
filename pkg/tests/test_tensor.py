import io
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kmfusion import tensor as T
from kmfusion.tensor import ContractError, DimensionError, NumericDomainError, Tensor

mpmath.mp.dps = 40


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- elementwise -----------------------------------------------------------

def test_add_values():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_ones_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal((x * T.ones_like(x)).data, x.data)


@pytest.mark.parametrize(
    "op, ref",
    [
        (T.exp, mpmath.exp),
        (T.tanh, mpmath.tanh),
        (T.sigmoid, lambda v: 1 / (1 + mpmath.exp(-v))),
        (T.softplus, lambda v: mpmath.log(1 + mpmath.exp(v))),
        (T.silu, lambda v: v / (1 + mpmath.exp(-v))),
        (T.relu, lambda v: max(v, 0)),
    ],
)
def test_scalar_functions_match_high_precision(op, ref):
    xs = np.array([0.5, -1.2, 3.7, -7.25, 1e-3])
    got = op(Tensor(xs)).data
    want = np.array([float(ref(mpmath.mpf(float(v)))) for v in xs])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_gelu_tanh_approximation():
    xs = np.array([-2.0, -0.3, 0.0, 0.7, 2.5])
    c = mpmath.sqrt(2 / mpmath.pi)
    want = [float(0.5 * v * (1 + mpmath.tanh(c * (v + mpmath.mpf("0.044715") * v ** 3)))) for v in map(mpmath.mpf, xs)]
    np.testing.assert_allclose(T.gelu(Tensor(xs)).data, want, rtol=1e-12, atol=1e-15)


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(NumericDomainError):
        T.log(Tensor([1.0, 0.0]))


def test_division_by_zero_is_domain_error():
    with pytest.raises(NumericDomainError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_broadcast_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_broadcast_gradients_are_summed(f64):
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones(3))
    T.sum_(a * b).backward()
    assert np.array_equal(b.grad, [2.0, 2.0, 2.0])
    assert a.grad.shape == (2, 3)


# -- backward contract -----------------------------------------------------

def test_sum_gradient_is_ones(rng):
    x = leaf(rng.standard_normal((2, 3)))
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient(rng):
    x = leaf(rng.standard_normal(5))
    T.sum_(x * x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)


def test_backward_twice_doubles_grads(rng):
    x = leaf(rng.standard_normal(4))
    loss = T.sum_(x * x)
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_non_scalar_backward_rejected():
    with pytest.raises(ContractError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_deep_chain_backward_does_not_recurse():
    x = leaf([0.5])
    y = x
    for _ in range(5000):
        y = y * 1.0
    T.sum_(y).backward()
    assert x.grad[0] == 1.0


# -- matmul ----------------------------------------------------------------

def test_matmul_identity_and_zero(rng):
    b = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), b).data, b.data)
    assert np.array_equal(T.matmul(Tensor(np.zeros((2, 3))), b).data, np.zeros((2, 4)))


def test_matmul_triple_loop_oracle(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, want, rtol=0, atol=1e-12)


def test_matmul_gradients(rng):
    a, b = leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal((5, 3)))
    g = rng.standard_normal((4, 3))
    T.sum_(T.matmul(a, b) * Tensor(g)).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# -- convolution -----------------------------------------------------------

def conv_oracle(x, w, stride, pad):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        for a in range(kh):
                            for b in range(kw):
                                out[n, o, i, j] += xp[n, c, i * stride + a, j * stride + b] * w[o, c, a, b]
    return out


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_nested_loop_oracle(rng, stride, pad):
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    np.testing.assert_allclose(got, conv_oracle(x, w, stride, pad), rtol=0, atol=1e-10)


def test_conv2d_identity_and_zero_kernels(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(T.conv2d(x, Tensor(eye)).data, x.data)
    assert not T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), padding=1).data.any()


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_depthwise_matches_per_channel_oracle(rng):
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((3, 1, 3, 3))
    got = T.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data
    for c in range(3):
        want = conv_oracle(x[:, c:c + 1], w[c:c + 1], 1, 1)
        np.testing.assert_allclose(got[:, c:c + 1], want, atol=1e-10)


def test_depthwise_single_channel_is_conv(rng):
    x, w = Tensor(rng.standard_normal((1, 1, 6, 6))), Tensor(rng.standard_normal((1, 1, 3, 3)))
    np.testing.assert_allclose(T.depthwise_conv2d(x, w, padding=1).data, T.conv2d(x, w, padding=1).data, atol=1e-12)


def test_depthwise_identity_kernels(rng):
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    assert np.array_equal(T.depthwise_conv2d(x, Tensor(w), padding=1).data, x.data)


def test_conv_gradients(rng, f64):
    x, w, b = leaf(T.kink_free(rng, (2, 2, 5, 5))), leaf(rng.standard_normal((3, 2, 3, 3))), leaf(rng.standard_normal(3))
    wt = Tensor(rng.standard_normal((2, 3, 3, 3)))
    assert T.grad_check(lambda *a: T.sum_(T.conv2d(a[0], a[1], a[2], 2, 1) * wt), [x, w, b]) < 1e-8
    dw = leaf(rng.standard_normal((2, 1, 3, 3)))
    wt2 = Tensor(rng.standard_normal((2, 2, 5, 5)))
    assert T.grad_check(lambda a, k: T.sum_(T.depthwise_conv2d(a, k, padding=1) * wt2), [x, dw]) < 1e-8


# -- pooling and resizing --------------------------------------------------

def test_maxpool_basic():
    assert T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0
    assert np.all(T.maxpool2d(Tensor(np.full((1, 2, 4, 4), 7.0))).data == 7.0)


def test_maxpool_window_oracle(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    want = np.array([[x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(3)] for i in range(3)])
    assert np.array_equal(T.maxpool2d(Tensor(x)).data[0, 0], want)


def test_maxpool_ties_route_to_first():
    x = leaf(np.ones((1, 1, 2, 2)))
    T.sum_(T.maxpool2d(x)).backward()
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def bilinear_oracle(img):
    H, W = img.shape
    out = np.zeros((2 * H, 2 * W))

    def src(o, n):
        s = max((o + 0.5) / 2 - 0.5, 0.0)
        i0 = min(int(math.floor(s)), n - 1)
        return i0, min(i0 + 1, n - 1), s - i0

    for i in range(2 * H):
        y0, y1, fy = src(i, H)
        for j in range(2 * W):
            x0, x1, fx = src(j, W)
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def test_upsample_closed_form(rng):
    x = rng.standard_normal((1, 1, 2, 2))
    np.testing.assert_allclose(T.bilinear_upsample2x(Tensor(x)).data[0, 0], bilinear_oracle(x[0, 0]), atol=1e-12)
    y = rng.standard_normal((1, 1, 3, 5))
    np.testing.assert_allclose(T.bilinear_upsample2x(Tensor(y)).data[0, 0], bilinear_oracle(y[0, 0]), atol=1e-12)


def test_upsample_constants():
    assert np.allclose(T.bilinear_upsample2x(Tensor(np.full((1, 2, 3, 3), 2.5))).data, 2.5)
    assert np.array_equal(T.bilinear_upsample2x(Tensor(np.full((1, 1, 1, 1), 3.0))).data, np.full((1, 1, 2, 2), 3.0))


def test_avgpool_and_upsample_gradients(rng, f64):
    x = leaf(rng.standard_normal((2, 2, 5, 4)))
    w1 = Tensor(rng.standard_normal((2, 2, 3, 2)))
    w2 = Tensor(rng.standard_normal((2, 2, 10, 8)))
    assert T.grad_check(lambda a: T.sum_(T.avgpool2x(a) * w1), x) < 1e-8
    assert T.grad_check(lambda a: T.sum_(T.bilinear_upsample2x(a) * w2), x) < 1e-8


# -- normalization ---------------------------------------------------------

def test_batch_norm_train_statistics(rng, f64):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)
    # two-pass oracle for the running statistics
    n = 4 * 25
    mu = np.array([sum(x.data[:, c].ravel()) / n for c in range(3)])
    var = np.array([sum((v - mu[c]) ** 2 for v in x.data[:, c].ravel()) / (n - 1) for c in range(3)])
    np.testing.assert_allclose(rm, 0.1 * mu, atol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var, atol=1e-12)


def test_batch_norm_eval_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    out = T.batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), False, eps=0.0)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_batch_norm_zero_variance_channel():
    x = Tensor(np.full((2, 1, 3, 3), 5.0))
    out = T.batch_norm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), True)
    assert np.all(np.isfinite(out.data)) and np.allclose(out.data, 0)


def test_layer_norm_cases(rng, f64):
    g, b = Tensor(np.ones(4)), Tensor(np.full(4, 0.3))
    assert np.allclose(T.layer_norm(Tensor(np.full((2, 4), 7.0)), g, b).data, 0.3)
    z = rng.standard_normal((3, 4))
    z = (z - z.mean(-1, keepdims=True)) / z.std(-1, keepdims=True)
    np.testing.assert_allclose(T.layer_norm(Tensor(z), Tensor(np.ones(4)), Tensor(np.zeros(4))).data, z, atol=1e-5)
    x = rng.standard_normal((3, 4))
    gam, bet = rng.standard_normal(4), rng.standard_normal(4)
    want = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * gam + bet
    np.testing.assert_allclose(T.layer_norm(Tensor(x), Tensor(gam), Tensor(bet)).data, want, atol=1e-12)


def test_composite_net_gradients(rng, f64):
    x = leaf(T.kink_free(rng, (2, 2, 6, 6)))
    w = leaf(rng.standard_normal((3, 2, 3, 3)))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.standard_normal(3))
    wt = Tensor(rng.standard_normal((2, 3, 6, 6)))

    def f(x, w, gamma, beta):
        h = T.batch_norm2d(T.conv2d(x, w, padding=1), gamma, beta, np.zeros(3), np.ones(3), True)
        return T.sum_(T.tanh(h) * wt)

    assert T.grad_check(f, [x, w, gamma, beta]) < 1e-4


# -- grad_check itself -----------------------------------------------------

def test_grad_check_trivial_functions(rng, f64):
    x = leaf(rng.standard_normal(6))
    assert T.grad_check(T.sum_, x) < 1e-10
    assert T.grad_check(lambda a: T.sum_(a * a), x) < 1e-8


def test_grad_check_detects_wrong_gradient(f64):
    x = leaf([0.3, 0.4])

    def broken(a):
        out = T.sum_(a * a)
        real = out._backward
        out._backward = lambda g: tuple(2 * r for r in real(g))
        return out

    assert T.grad_check(broken, x) > 0.1


def test_kink_free_margin(rng):
    a = T.kink_free(rng, (1000,), margin=1e-3)
    assert np.abs(a).min() >= 1e-3


# -- properties --------------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3)))
def test_reshape_round_trip(a):
    x = Tensor(a)
    back = T.reshape(T.reshape(x, (-1,)), a.shape)
    assert np.array_equal(back.data, a)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_activations_finite(a):
    for fn in (T.exp, T.sigmoid, T.tanh, T.softplus, T.gelu, T.silu, T.relu):
        assert np.all(np.isfinite(fn(Tensor(a)).data))


def test_forward_is_deterministic(rng):
    x, w = Tensor(rng.standard_normal((2, 3, 8, 8))), Tensor(rng.standard_normal((4, 3, 3, 3)))
    assert np.array_equal(T.conv2d(x, w, padding=1).data, T.conv2d(x, w, padding=1).data)


# -- MACs and serialization --------------------------------------------------

def test_mac_counting(rng):
    with T.count_macs() as c:
        T.conv2d(Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), padding=1)
        T.matmul(Tensor(np.zeros((5, 6))), Tensor(np.zeros((6, 7))))
    assert c.total == 2 * 4 * 3 * 9 * 64 + 5 * 6 * 7


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_container_round_trip(rng, dtype):
    a = rng.standard_normal((3, 4, 2)).astype(dtype)
    buf = io.BytesIO()
    T.write_array(buf, a)
    raw = buf.getvalue()
    hlen = int.from_bytes(raw[:4], "little")
    assert b'"byte_order":"little"' in raw[4:4 + hlen]
    buf.seek(0)
    b = T.read_array(buf)
    assert b.dtype == a.dtype and np.array_equal(a, b)


def test_truncated_container():
    buf = io.BytesIO()
    T.write_array(buf, np.arange(10.0))
    with pytest.raises(ValueError):
        T.read_array(io.BytesIO(buf.getvalue()[:-3]))
