import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vesselforge import kernels
from vesselforge import tensor as T
from vesselforge.oracles import (
    bilinear_sample,
    finite_difference,
    naive_conv2d,
    naive_pool,
    relative_error,
    zero_inflate,
)


def test_atrous_row_example():
    x = np.array([1, 2, 3, 4, 5], dtype=np.float64).reshape(1, 1, 1, 5)
    w = np.ones((1, 1, 1, 2))
    y = T.conv2d(x, w, spec=T.ConvSpec(kernel=(1, 2), rate=2))
    np.testing.assert_array_equal(y.data.ravel(), [4, 6, 8])


def test_rate_one_matches_loop_bit_exact_float64():
    # integer-valued operands make every summation order exact
    rng = np.random.default_rng(0)
    x = rng.integers(-8, 9, size=(2, 3, 8, 8)).astype(np.float64)
    w = rng.integers(-4, 5, size=(4, 3, 3, 3)).astype(np.float64)
    b = rng.integers(-4, 5, size=4).astype(np.float64)
    for stride, pad in [(1, (0, 0, 0, 0)), (1, (1, 1, 1, 1)), (2, (1, 0, 1, 0))]:
        spec = T.ConvSpec(kernel=(3, 3), stride=stride, padding=pad)
        got = T.conv2d(x, w, b, spec).data
        want = naive_conv2d(x, w, b, stride=stride, padding=pad)
        assert got.tobytes() == want.tobytes()


def test_rate_one_float32_close_to_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    got = T.conv2d(x, w, spec=T.ConvSpec(padding=(1, 1, 1, 1))).data
    want = naive_conv2d(x.astype(np.float64), w.astype(np.float64), padding=(1, 1, 1, 1))
    assert relative_error(got, want) < 1e-5


def test_identity_kernel():
    x = np.random.default_rng(2).standard_normal((1, 1, 6, 7)).astype(np.float32)
    y = T.conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32), T.ConvSpec(kernel=(1, 1)))
    np.testing.assert_array_equal(y.data, x)


@settings(max_examples=30, deadline=None)
@given(
    rate=st.sampled_from([1, 2, 3, 4]),
    k=st.sampled_from([1, 2, 3]),
    h=st.integers(9, 14),
    w=st.integers(9, 14),
    seed=st.integers(0, 2**16),
)
def test_atrous_equals_zero_inflated_kernel(rate, k, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, h, w))
    wt = rng.standard_normal((3, 2, k, k))
    pad = T.same_padding((k, k), rate)
    a = T.conv2d(x, wt, spec=T.ConvSpec(kernel=(k, k), rate=rate, padding=pad)).data
    big = zero_inflate(wt, rate)
    b = T.conv2d(x, big, spec=T.ConvSpec(kernel=big.shape[2:], rate=1, padding=pad)).data
    assert relative_error(a, b) < 1e-12


def test_conv_errors():
    x = np.zeros((1, 3, 5, 5))
    with pytest.raises(T.ShapeError, match="axis 1"):
        T.conv2d(x, np.zeros((2, 4, 3, 3)))
    with pytest.raises(T.DegenerateShapeError):
        T.conv2d(x, np.zeros((2, 3, 3, 3)), spec=T.ConvSpec(rate=3))
    with pytest.raises(ValueError):
        T.ConvSpec(rate=0)


def test_pool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert T.pool2d(x, "max", (2, 2), 1).data.item() == 4.0
    assert T.pool2d(x, "avg", (2, 2), 1).data.item() == 2.5
    const = np.full((1, 2, 7, 7), 3.25)
    for kind in ("max", "avg"):
        y = T.pool2d(const, kind, (3, 3), 1, (1, 1, 1, 1))
        np.testing.assert_array_equal(y.data, 3.25)


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("stride,pad", [(1, (1, 1, 1, 1)), (2, (0, 1, 0, 1)), (1, (0, 0, 0, 0))])
def test_pool_matches_loop(kind, stride, pad):
    x = np.random.default_rng(3).standard_normal((2, 2, 7, 6))
    got = T.pool2d(x, kind, (3, 3), stride, pad).data
    want = naive_pool(x, kind, (3, 3), stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_upsample_examples():
    const = np.full((1, 1, 3, 4), 0.7)
    np.testing.assert_allclose(T.upsample_bilinear(const, 2).data, 0.7, rtol=1e-15)
    x = np.random.default_rng(4).standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(T.upsample_bilinear(x, 1).data, x)
    row = np.array([1.0, 3.0])
    up = T.upsample_bilinear(row.reshape(1, 1, 1, 2), 2).data
    assert up.shape == (1, 1, 2, 4)
    np.testing.assert_array_equal(up[0, 0, 0], up[0, 0, 1])
    got = up[0, 0, 0]
    want = [bilinear_sample(row, 2, k) for k in range(4)]
    np.testing.assert_allclose(got, want)
    np.testing.assert_allclose(got, [1.0, 1.5, 2.5, 3.0])


def test_concat_examples():
    a = np.arange(4.0).reshape(1, 1, 2, 2)
    b = -np.arange(4.0).reshape(1, 1, 2, 2)
    y = T.concat([a, b]).data
    assert y.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(y[0, 0], a[0, 0])
    np.testing.assert_array_equal(y[0, 1], b[0, 0])
    np.testing.assert_array_equal(T.concat([a]).data, a)
    with pytest.raises(T.ShapeError):
        T.concat([a, np.zeros((1, 1, 3, 2))])


def test_activation_examples():
    np.testing.assert_array_equal(T.relu(np.array([-2.0, 3.0])).data, [0.0, 3.0])
    np.testing.assert_allclose(T.softmax_channel(np.zeros((1, 2, 1, 1))).data.ravel(), [0.5, 0.5])
    x = T.Tensor(np.zeros(1), requires_grad=True)
    T.backward(T.sum(T.sigmoid(x)))
    fd = finite_difference(lambda: T.sigmoid(x.data).data.sum(), x.data)
    assert abs(x.grad[0] - 0.25) < 1e-12
    assert abs(fd[0] - 0.25) < 1e-4


def test_softmax_sums_to_one():
    x = np.random.default_rng(5).standard_normal((3, 4, 5, 5)) * 20
    y = T.softmax_channel(x).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert y.min() >= 0 and y.max() <= 1


def test_backward_basics():
    x = T.Tensor(np.random.default_rng(6).standard_normal((2, 3)), requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    T.backward(T.sum(T.add(T.mul(x, 2.0), T.mul(x, 3.0))))
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 5.0))


def test_backward_errors():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.relu(x))
    with pytest.raises(T.GraphError):
        T.backward(T.sum(np.ones(3)))
    y = T.sum(x)
    y.parents = (y,)
    with pytest.raises(T.GraphError, match="cycle"):
        T.backward(y)


def _gradcheck(build, leaves, seed=0, eps=1e-3):
    """Analytic vs central-difference gradients of sum(build() * R) in float64."""
    out = build()
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(T.sum(T.mul(out, proj)))
    errs = []
    for leaf in leaves:
        num = finite_difference(lambda: (build().data * proj).sum(), leaf.data, eps)
        errs.append(relative_error(leaf.grad, num))
    return max(errs)


def _leaf(shape, seed, margin=0.0):
    x = np.random.default_rng(seed).standard_normal(shape)
    if margin:
        x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return T.Tensor(x, requires_grad=True, dtype=np.float64)


def test_gradcheck_conv2d_through_loss():
    x = _leaf((1, 1, 5, 5), 0)
    w = _leaf((2, 1, 3, 3), 1)
    b = _leaf((2,), 2)
    spec = T.ConvSpec(padding=(1, 1, 1, 1))
    err = _gradcheck(lambda: T.conv2d(x, w, b, spec), [x, w, b])
    assert err < 1e-4


@pytest.mark.parametrize("stride,rate", [(2, 1), (1, 2), (2, 3)])
def test_gradcheck_conv2d_variants(stride, rate):
    x = _leaf((2, 2, 9, 8), 3)
    w = _leaf((3, 2, 3, 3), 4)
    spec = T.ConvSpec(stride=stride, rate=rate, padding=T.same_padding((3, 3), rate))
    assert _gradcheck(lambda: T.conv2d(x, w, None, spec), [x, w]) < 1e-4


@pytest.mark.parametrize("kind", ["max", "avg"])
def test_gradcheck_pool(kind):
    x = _leaf((1, 2, 6, 6), 5)
    assert _gradcheck(lambda: T.pool2d(x, kind, (3, 3), 1, (1, 1, 1, 1)), [x]) < 1e-4


def test_gradcheck_misc_ops():
    x = _leaf((1, 2, 3, 4), 6, margin=0.01)
    y = _leaf((1, 3, 3, 4), 7)
    assert _gradcheck(lambda: T.upsample_bilinear(x, 2), [x]) < 1e-4
    assert _gradcheck(lambda: T.concat([x, y, x]), [x, y]) < 1e-4
    assert _gradcheck(lambda: T.relu(x), [x]) < 1e-4
    assert _gradcheck(lambda: T.sigmoid(x), [x]) < 1e-4
    assert _gradcheck(lambda: T.softmax_channel(y), [y]) < 1e-4
    assert _gradcheck(lambda: T.take(y, 1), [y]) < 1e-4
    pos = T.Tensor(np.random.default_rng(8).uniform(0.2, 0.8, (2, 3)), requires_grad=True)
    assert _gradcheck(lambda: T.log(T.clip(pos, 0.1, 0.9)), [pos]) < 1e-4
    assert _gradcheck(lambda: T.mean(pos), [pos]) < 1e-4


def test_backward_deterministic():
    def run():
        x = T.Tensor(np.random.default_rng(9).standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = T.Tensor(np.random.default_rng(10).standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        h = T.relu(T.conv2d(x, w, spec=T.ConvSpec(padding=(1, 1, 1, 1))))
        T.backward(T.sum(T.mul(T.concat([h, h]), 0.5)))
        return x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_backends_agree_on_conv(backend, monkeypatch):
    impl = kernels.get_backend(backend)
    monkeypatch.setattr(kernels, "im2col", impl.im2col)
    monkeypatch.setattr(kernels, "col2im", impl.col2im)
    x = _leaf((2, 3, 10, 10), 11)
    w = _leaf((2, 3, 3, 3), 12)
    spec = T.ConvSpec(stride=2, rate=1, padding=(1, 1, 1, 1))
    y = T.conv2d(x, w, spec=spec)
    want = naive_conv2d(x.data, w.data, stride=2, padding=(1, 1, 1, 1))
    assert relative_error(y.data, want) < 1e-12


def test_backward_flushes_float32_subnormals():
    x = T.Tensor(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    scale = np.array([[[[1e-39, 1e-30], [2e-40, -1e-39]]]], dtype=np.float32)
    T.backward(T.sum(T.mul(x, scale)))
    np.testing.assert_array_equal(x.grad, np.array([[[[0.0, 1e-30], [0.0, 0.0]]]], dtype=np.float32))


def test_backward_keeps_float64_subnormals():
    x = T.Tensor(np.ones(2), requires_grad=True)
    T.backward(T.sum(T.mul(x, np.array([1e-310, 1.0]))))
    np.testing.assert_array_equal(x.grad, [1e-310, 1.0])
