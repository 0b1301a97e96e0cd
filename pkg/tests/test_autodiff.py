import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsup import autodiff as ad
from mixsup.gradcheck import numeric_grad, relative_error


def check_op(build, *arrays, tol=1e-6):
    """Backprop through ``sum(build(*tensors) * w)`` against central differences."""
    rng = np.random.default_rng(0)
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = rng.normal(size=out.shape)
    ad.backward(ad.sum_(ad.mul(out, w)))
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [ad.Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
            return float((build(*args).data * w).sum())
        assert relative_error(tensors[i].grad, numeric_grad(f, a)) < tol


def conv_reference(x, w, b):
    """Direct nested-loop convolution with zero padding."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    out[n, o, i, j] = (xp[n, :, i:i + k, j:j + k] * w[o]).sum() + b[o]
    return out


rng = np.random.default_rng(1)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loops(k):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ad.conv2d(x, w, b).data, conv_reference(x, w, b), atol=1e-12)


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_gradients(k):
    check_op(ad.conv2d, rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3))


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_pool_upsample_relu_gradients():
    x = rng.normal(size=(2, 2, 4, 6))
    check_op(ad.maxpool2x, x)
    check_op(ad.nearest_upsample2x, x)
    check_op(ad.relu, x + 0.05 * np.sign(x))


def test_maxpool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ad.maxpool2x(x).data[0, 0], [[5, 7], [13, 15]])


def test_maxpool_tie_goes_to_first():
    x = ad.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.backward(ad.sum_(ad.maxpool2x(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_elementwise_gradients():
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4))
    check_op(ad.add, a, b)
    check_op(ad.mul, a, b)
    check_op(ad.log, a)
    check_op(ad.exp, a)
    check_op(lambda t: ad.pow(t, 0.5), a)
    check_op(lambda t: ad.pow(t, -1.5), a)
    check_op(lambda t: ad.pow(t, 3.0), a - 1.0)
    check_op(ad.matmul, a, b.T)


def test_reductions_and_structure_gradients():
    a = rng.normal(size=(2, 3, 4))
    check_op(lambda t: ad.sum_(t, axis=1), a)
    check_op(lambda t: ad.mean(t, axis=(0, 2)), a)
    check_op(lambda t: ad.softmax_channel(t, axis=1), a)
    check_op(lambda t: t[:, 1:], a)
    check_op(lambda t: t[[0, 0, 1]], a)
    check_op(lambda s, t: ad.concat([s, t], axis=1), a, rng.normal(size=(2, 2, 4)))
    check_op(lambda s, t: ad.stack([s, t], axis=0), a, rng.normal(size=a.shape))


def test_scalar_broadcast_gradient():
    check_op(lambda t, s: ad.mul(t, s), rng.normal(size=(3, 3)), np.array(1.7))


def test_log_clamps_below_eps():
    x = ad.Tensor([0.0, 1e-15, 0.5], requires_grad=True)
    y = ad.log(x)
    assert np.allclose(y.data[:2], np.log(ad.EPS))
    ad.backward(ad.sum_(y))
    np.testing.assert_array_equal(x.grad[:2], 0.0)
    assert x.grad[2] == pytest.approx(2.0)


def test_log_without_clamp_raises():
    with pytest.raises(ad.DomainError):
        ad.log(ad.Tensor([0.0]), eps=None)
    with pytest.raises(ad.DomainError):
        ad.pow(ad.Tensor([-1.0]), 0.5, eps=None)


def test_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.add(np.zeros(3), np.zeros(4))


def test_backward_twice_is_stale():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ad.StaleGraphError):
        ad.backward(loss)


def test_gradients_accumulate_over_shared_inputs():
    x = ad.Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum_(x * x + x * 2.0))
    assert x.grad[0] == pytest.approx(8.0)


def test_detach_blocks_gradient():
    x = ad.Tensor([2.0], requires_grad=True)
    ad.backward(ad.sum_(ad.detach(x) * x))
    assert x.grad[0] == pytest.approx(2.0)


def test_forward_op_dispatch():
    assert ad.forward_op("relu", ad.Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    with pytest.raises(ad.AutodiffError):
        ad.forward_op("nope", 1.0)


def test_adam_matches_closed_form():
    # one step of Adam moves every coordinate by lr * sign(g) (bias correction cancels the moments)
    p = ad.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    ad.Adam([p], lr=0.1, eps=0.0).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9])


def test_adam_second_step_by_hand():
    b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
    g1, g2 = 0.3, -0.2
    opt = ad.Adam([ad.Tensor([0.0], requires_grad=True)], lr=lr, betas=(b1, b2), eps=eps)
    p = opt.params[0]
    for g in (g1, g2):
        p.grad = np.array([g])
        opt.step()
    m = (1 - b1) * (b1 * g1 + g2)
    v = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2)
    first = -lr * g1 / (abs(g1) + eps)
    expected = first - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)


def test_sgd_momentum_by_hand():
    p = ad.Tensor([1.0], requires_grad=True)
    opt = ad.SGD([p], lr=0.1, momentum=0.5)
    for g in (1.0, 1.0):
        p.grad = np.array([g])
        opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 1.0 - 0.1 * 1.5)


def test_optimizer_needs_gradients():
    with pytest.raises(ad.AutodiffError):
        ad.SGD([ad.Tensor([1.0], requires_grad=True)]).step()


def test_adam_minimises_quadratic():
    x = ad.Tensor([5.0, -3.0], requires_grad=True)
    opt = ad.Adam([x], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ad.backward(ad.sum_(ad.mul(x - 1.0, x - 1.0)))
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 4]), st.sampled_from([2, 4]),
       st.integers(0, 2 ** 31 - 1))
def test_softmax_is_a_distribution(b, c, h, w, seed):
    z = np.random.default_rng(seed).normal(size=(b, c, h, w)) * 30
    p = ad.softmax_channel(z).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_conv_is_linear_in_input(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 1, 2, 4, 4))
    w = r.normal(size=(2, 2, 3, 3))
    a, b = r.normal(size=2)
    lhs = ad.conv2d(a * x + b * y, w).data
    rhs = a * ad.conv2d(x, w).data + b * ad.conv2d(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
