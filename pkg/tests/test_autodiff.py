"""Gradient and semantics checks for the autodiff engine.

Every differentiable primitive is compared against central finite differences
on random inputs; convolutions additionally against naive loop oracles.
"""

import numpy as np
import pytest

import microtwin.autodiff as ad
from microtwin.autodiff import Tensor

from _factories import central_difference, relative_error


def grad_of(make_loss, tensor):
    tensor.grad = None
    loss = make_loss()
    ad.backward(loss)
    return tensor.grad


def fd_fraction_ok(make_loss, tensors, step=1e-4, rel_tol=1e-4, floor=1e-7):
    """Fraction of coordinates whose AD gradient matches central differences."""
    grads = {}
    for t in tensors:
        t.grad = None
    loss = make_loss()
    ad.backward(loss, leaves=tensors)
    for t in tensors:
        grads[id(t)] = t.grad.copy()
    ok = 0
    total = 0
    for t in tensors:
        for idx in np.ndindex(t.data.shape if t.data.shape else (1,)):
            key = idx if t.data.shape else ()
            fd = central_difference(lambda: make_loss().item(), t.data, key, step)
            g = grads[id(t)][key]
            total += 1
            if relative_error(g, fd, floor) <= rel_tol:
                ok += 1
    return ok / total


def test_square_hand_derivative():
    x = Tensor(3.0, requires_grad=True)
    loss = ad.square(x)
    ad.backward(loss)
    assert float(x.grad) == pytest.approx(6.0, abs=1e-12)


def test_sigmoid_sum_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    loss = ad.sum_all(ad.sigmoid(x))
    ad.backward(loss)
    assert np.allclose(x.grad, 0.25, atol=1e-15)


def test_square_then_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    assert ad.sum_all(ad.square(x)).item() == pytest.approx(14.0)


def test_leaky_relu_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    out = ad.leaky_relu(x, 0.2)
    assert np.allclose(out.data, [-0.2, 0.0, 2.0])


def test_sigmoid_value():
    assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)


def test_composite_graph_matches_finite_differences():
    # conv -> sigmoid -> sum on an 8x8 input, both arguments checked
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-2, 2, (8, 8)), requires_grad=True)
    k = Tensor(rng.uniform(-2, 2, (3, 3)), requires_grad=True)

    def loss():
        return ad.sum_all(ad.sigmoid(ad.conv_circular(x, k)))

    assert fd_fraction_ok(loss, [x, k]) >= 0.99


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "exp", "log", "sin",
    "sinc", "sigmoid", "softplus", "leaky_relu", "clamp_min", "pow_const",
    "mean", "reshape", "crop", "pad", "take", "stack", "linear_map",
    "dft", "idft", "crosscorr", "conv2d",
])
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    a = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
    pos = Tensor(rng.uniform(0.3, 2, (4, 5)), requires_grad=True)
    scalar = Tensor(rng.uniform(0.5, 1.5), requires_grad=True)

    if name == "add":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.add(a, b))), [a, b]
    elif name == "sub":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.sub(a, b))), [a, b]
    elif name == "mul":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.mul(a, b))), [a, b]
    elif name == "div":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.div(a, pos))), [a, pos]
    elif name == "neg":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.neg(a))), [a]
    elif name == "square":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.square(a))), [a]
    elif name == "sqrt":
        fn, tensors = lambda: ad.sum_all(ad.sqrt_nonneg(pos)), [pos]
    elif name == "exp":
        fn, tensors = lambda: ad.sum_all(ad.exp(a)), [a]
    elif name == "log":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.log(pos))), [pos]
    elif name == "sin":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.sin(a))), [a]
    elif name == "sinc":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.sinc(a))), [a]
    elif name == "sigmoid":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.sigmoid(a))), [a]
    elif name == "softplus":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.softplus(a))), [a]
    elif name == "leaky_relu":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.leaky_relu(a, 0.2))), [a]
    elif name == "clamp_min":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.clamp_min(a, 0.0))), [a]
    elif name == "pow_const":
        h = np.abs(rng.uniform(0.1, 3, (4, 5)))
        fn, tensors = lambda: ad.sum_all(ad.pow_const_base(h, scalar)), [scalar]
    elif name == "mean":
        fn, tensors = lambda: ad.mean_all(ad.square(a)), [a]
    elif name == "reshape":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.reshape(a, (20,)))), [a]
    elif name == "crop":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.crop(a, (1, 2), (2, 3)))), [a]
    elif name == "pad":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.pad_to(a, (6, 7)))), [a]
    elif name == "take":
        idx = rng.integers(0, 20, size=9)
        fn, tensors = lambda: ad.sum_all(ad.square(ad.take(a, idx))), [a]
    elif name == "stack":
        fn, tensors = (lambda: ad.sum_all(ad.square(ad.stack_last((a, b)))), [a, b])
    elif name == "linear_map":
        m = rng.uniform(-1, 1, (3, 20))
        av = Tensor(rng.uniform(-2, 2, 20), requires_grad=True)
        fn, tensors = (lambda: ad.sum_all(ad.square(ad.linear_map(m, av))), [av])
    elif name == "dft":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.dft_sym(a))), [a]
    elif name == "idft":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.idft_sym(a))), [a]
    elif name == "crosscorr":
        fn, tensors = lambda: ad.sum_all(ad.square(ad.cross_correlate(a, b))), [a, b]
    elif name == "conv2d":
        x = Tensor(rng.uniform(-2, 2, (6, 6, 2)), requires_grad=True)
        w = Tensor(rng.uniform(-2, 2, (3, 3, 2, 2)), requires_grad=True)
        fn, tensors = (lambda: ad.sum_all(ad.square(ad.conv2d_strided(x, w, 2))),
                       [x, w])
    assert fd_fraction_ok(fn, tensors) >= 0.99


def test_scalar_broadcast_reuse_gradient():
    # a scalar feeding several consumers accumulates all contributions
    s = Tensor(0.3, requires_grad=True)
    c1 = ad.constant(np.arange(4.0))
    c2 = ad.constant(np.full(4, 2.0))

    def loss():
        u = ad.sigmoid(s)
        return ad.add(ad.sum_all(ad.square(ad.mul(u, c1))),
                      ad.sum_all(ad.square(ad.mul(u, c2))))

    g = float(grad_of(loss, s))
    fd = central_difference(lambda: loss().item(), s.data, (), 1e-6)
    assert relative_error(g, fd) < 1e-7


def naive_circular_conv(field, kernel):
    n = field.shape
    w = tuple((k - 1) // 2 for k in kernel.shape)
    out = np.zeros_like(field)
    for t in np.ndindex(n):
        acc = 0.0
        for s in np.ndindex(kernel.shape):
            offset = tuple(si - wi for si, wi in zip(s, w))
            src = tuple((ti - oi) % ni for ti, oi, ni in zip(t, offset, n))
            acc += kernel[s] * field[src]
        out[t] = acc
    return out


def test_conv_circular_identity():
    rng = np.random.default_rng(1)
    field = Tensor(rng.standard_normal((5, 6)))
    impulse = np.zeros((3, 3))
    impulse[1, 1] = 1.0
    out = ad.conv_circular(field, Tensor(impulse))
    assert np.allclose(out.data, field.data, atol=1e-14)


def test_conv_circular_constant_field():
    kernel = np.random.default_rng(2).standard_normal((3, 3))
    field = Tensor(np.full((6, 6), 1.7))
    out = ad.conv_circular(field, Tensor(kernel))
    assert np.allclose(out.data, 1.7 * kernel.sum(), atol=1e-12)


def test_conv_circular_matches_naive():
    rng = np.random.default_rng(3)
    field = rng.standard_normal((4, 4))
    kernel = rng.standard_normal((3, 3))
    out = ad.conv_circular(Tensor(field), Tensor(kernel))
    assert np.abs(out.data - naive_circular_conv(field, kernel)).max() <= 1e-12


def test_conv_circular_linearity():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((6, 6))
    g = rng.standard_normal((6, 6))
    k = Tensor(rng.standard_normal((3, 3)))
    a = 1.37
    lhs = ad.conv_circular(Tensor(a * f + g), k).data
    rhs = a * ad.conv_circular(Tensor(f), k).data + ad.conv_circular(Tensor(g), k).data
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_conv_circular_errors():
    with pytest.raises(ad.AutodiffError):
        ad.conv_circular(Tensor(np.zeros((4, 4))), Tensor(np.zeros(3)))
    with pytest.raises(ad.AutodiffError):
        ad.conv_circular(Tensor(np.zeros((2, 2))), Tensor(np.zeros((5, 5))))


def test_conv2d_sum_pooling():
    x = Tensor(np.ones((4, 4, 1)))
    w = Tensor(np.ones((2, 2, 1, 1)))
    out = ad.conv2d_strided(x, w, 2)
    assert out.shape == (2, 2, 1)
    assert np.allclose(out.data, 4.0)


def test_conv2d_identity():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((5, 5, 1)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = ad.conv2d_strided(x, w, 1)
    assert np.allclose(out.data, x.data)


def test_conv2d_matches_loop():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 8, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    stride = 2
    out = ad.conv2d_strided(Tensor(x), Tensor(w), stride).data
    ho = (8 - 3) // stride + 1
    ref = np.zeros((ho, ho, 2))
    for i in range(ho):
        for j in range(ho):
            for n in range(2):
                ref[i, j, n] = np.sum(
                    x[i * stride:i * stride + 3, j * stride:j * stride + 3, :]
                    * w[:, :, :, n])
    assert np.abs(out - ref).max() <= 1e-12


def test_conv2d_errors():
    x = Tensor(np.zeros((4, 4, 1)))
    with pytest.raises(ad.AutodiffError):
        ad.conv2d_strided(x, Tensor(np.zeros((2, 2, 1, 1))), 0)
    with pytest.raises(ad.AutodiffError):
        ad.conv2d_strided(x, Tensor(np.zeros((5, 5, 1, 1))), 1)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.backward(ad.square(x))


def test_gradient_additivity_over_subgraphs():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal(6), requires_grad=True)
    y = Tensor(rng.standard_normal(6), requires_grad=True)

    ad.backward(ad.add(ad.sum_all(ad.square(x)), ad.sum_all(ad.sigmoid(y))))
    joint_x, joint_y = x.grad.copy(), y.grad.copy()

    x.grad = y.grad = None
    ad.backward(ad.sum_all(ad.square(x)))
    ad.backward(ad.sum_all(ad.sigmoid(y)))
    assert np.array_equal(joint_x, x.grad)
    assert np.array_equal(joint_y, y.grad)


def test_nonparticipating_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    ad.backward(ad.sum_all(ad.square(x)), leaves=[x, unused])
    assert np.array_equal(unused.grad, np.zeros(2))


def test_binary_op_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
