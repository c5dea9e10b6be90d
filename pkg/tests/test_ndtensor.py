import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdsupcon import ndtensor as nd
from mdsupcon.errors import DegenerateInputError, NumericalError, ShapeError, ValidationError

GRAD_TOL = 1e-5
PROPS = settings(max_examples=100, deadline=None)


def naive_conv(x, k, stride):
    """Zero-padded 3x3 cross-correlation, one output at a time."""
    b, c, h, w = x.shape
    f = k.shape[0]
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    out = np.zeros((b, f, ho, wo))
    for n in range(b):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = np.sum(xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3] * k[o])
    return out


def seeds():
    return st.integers(0, 2**32 - 1)


# -- examples ------------------------------------------------------------------

def test_matmul_identity():
    out = nd.matmul(nd.Tensor([[1.0, 0], [0, 1]]), nd.Tensor([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_product():
    assert nd.matmul(nd.Tensor([[1.0, 2]]), nd.Tensor([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nd.matmul(nd.Tensor(np.ones((2, 3))), nd.Tensor(np.ones((2, 3))))


def test_matmul_gradient_4x3_3x2():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((3, 2))
    a = rng.standard_normal((4, 3))
    assert nd.grad_check(lambda t: nd.sum_all(nd.matmul(t, nd.Tensor(b))), nd.Tensor(a)) <= GRAD_TOL
    assert nd.grad_check(lambda t: nd.sum_all(nd.matmul(nd.Tensor(a), t)), nd.Tensor(b)) <= GRAD_TOL


def test_conv_counting_overlap():
    out = nd.conv2d(nd.Tensor(np.ones((1, 1, 3, 3))), nd.Tensor(np.ones((1, 1, 3, 3))), stride=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_conv_zero_kernel():
    x = nd.Tensor(np.random.default_rng(1).standard_normal((2, 3, 5, 5)))
    assert not np.any(nd.conv2d(x, nd.Tensor(np.zeros((4, 3, 3, 3)))).data)


def test_conv_zero_upstream_gives_zero_kernel_grad():
    x = nd.Tensor(np.random.default_rng(1).standard_normal((2, 3, 5, 5)))
    k = nd.Tensor(np.zeros((4, 3, 3, 3)), requires_grad=True)
    with nd.GradTape() as tape:
        out = nd.conv2d(x, k)
    tape.backward(out, np.zeros(out.shape))
    assert not np.any(k.grad)


def test_conv_gradient_2x3x8x8():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    w = rng.standard_normal((2, 4, 8, 8))
    assert nd.grad_check(lambda t: nd.sum_all(nd.mul(nd.conv2d(t, nd.Tensor(k)), nd.Tensor(w))), nd.Tensor(x)) <= GRAD_TOL
    assert nd.grad_check(lambda t: nd.sum_all(nd.mul(nd.conv2d(nd.Tensor(x), t), nd.Tensor(w))), nd.Tensor(k)) <= GRAD_TOL


@pytest.mark.parametrize("shape, kshape", [((1, 2, 4, 4), (1, 3, 3, 3)), ((1, 1, 2, 5), (1, 1, 3, 3))])
def test_conv_rejects_bad_input(shape, kshape):
    with pytest.raises(ValidationError):
        nd.conv2d(nd.Tensor(np.ones(shape)), nd.Tensor(np.ones(kshape)))


def test_conv_rejects_stride_3():
    with pytest.raises(ValidationError):
        nd.conv2d(nd.Tensor(np.ones((1, 1, 4, 4))), nd.Tensor(np.ones((1, 1, 3, 3))), stride=3)


def test_relu_and_subgradient():
    x = nd.Tensor([1.0, -2.0], requires_grad=True)
    with nd.GradTape() as tape:
        y = nd.relu(x)
        s = nd.sum_all(y)
    tape.backward(s)
    assert y.data.tolist() == [1.0, 0.0]
    assert x.grad.tolist() == [1.0, 0.0]
    z = nd.Tensor([0.0], requires_grad=True)
    with nd.GradTape() as tape:
        s = nd.sum_all(nd.relu(z))
    tape.backward(s)
    assert z.grad.tolist() == [0.0]


def test_global_avg_pool():
    assert nd.global_avg_pool(nd.Tensor([[[[1.0, 2], [3, 4]]]])).data.tolist() == [[2.5]]


def test_dense_example():
    out = nd.dense(nd.Tensor([[1.0, 1]]), nd.Tensor([[2.0, 0], [0, 3]]), nd.Tensor([1.0, 1]))
    assert out.data.tolist() == [[3.0, 4.0]]


def test_l2_normalize_examples():
    np.testing.assert_allclose(nd.l2_normalize(nd.Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(nd.l2_normalize(nd.Tensor(u)).data, u)
    v = np.random.default_rng(3).standard_normal(6)
    np.testing.assert_allclose(nd.l2_normalize(nd.Tensor(7 * v)).data, nd.l2_normalize(nd.Tensor(v)).data, atol=1e-12)


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        nd.l2_normalize(nd.Tensor([1e-13, 0.0]))


def test_log_sum_exp_examples():
    assert abs(nd.log_sum_exp(nd.Tensor([0.0, 0, 0])).item() - math.log(3)) < 1e-15
    assert nd.log_sum_exp(nd.Tensor([1000.0, 0])).item() == 1000.0
    assert abs(nd.log_sum_exp(nd.Tensor([700.0, 700.0])).item() - (700 + math.log(2))) < 1e-12


def test_grad_check_quadratic():
    assert nd.grad_check(lambda t: nd.sum_all(nd.mul(t, t)), nd.Tensor([1.0, 2.0, 3.0])) <= 1e-8


def test_non_finite_output_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        nd.scale(nd.Tensor([1e308]), 10.0)


def test_backward_visits_each_node_once():
    calls = []
    x = nd.Tensor([1.0, 2.0], requires_grad=True)
    with nd.GradTape() as tape:
        y = nd.scale(x, 2.0)
        z = nd.add(y, y)
        s = nd.sum_all(z)
    for node in tape.nodes:
        original = node.backward

        def wrapped(g, _orig=original, _op=node.op):
            calls.append(_op)
            return _orig(g)

        node.backward = wrapped
    tape.backward(s)
    assert sorted(calls) == sorted(n.op for n in tape.nodes)
    assert x.grad.tolist() == [4.0, 4.0]


def test_tape_topological_order():
    x = nd.Tensor(np.ones((2, 2)), requires_grad=True)
    with nd.GradTape() as tape:
        a = nd.relu(x)
        b = nd.matmul(a, a)
        c = nd.sum_all(b)
    ids = [a.tape_id, b.tape_id, c.tape_id]
    assert ids == sorted(ids)
    for node_id, node in enumerate(tape.nodes):
        for t in node.inputs:
            assert t.tape_id is None or t.tape_id < node_id


def test_no_tape_records_nothing():
    x = nd.Tensor([1.0], requires_grad=True)
    y = nd.scale(x, 2.0)
    assert y.tape_id is None


# -- properties ----------------------------------------------------------------

@PROPS
@given(seeds(), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_matmul_gradient_random(seed, m, k, n):
    rng = np.random.default_rng(seed)
    a, b, w = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((m, n))
    f = lambda t: nd.sum_all(nd.mul(nd.matmul(t, nd.Tensor(b)), nd.Tensor(w)))
    g = lambda t: nd.sum_all(nd.mul(nd.matmul(nd.Tensor(a), t), nd.Tensor(w)))
    assert nd.grad_check(f, nd.Tensor(a)) <= GRAD_TOL
    assert nd.grad_check(g, nd.Tensor(b)) <= GRAD_TOL


@PROPS
@given(seeds(), st.integers(1, 2), st.integers(1, 3), st.integers(3, 6), st.integers(3, 6),
       st.integers(1, 3), st.sampled_from([1, 2]))
def test_conv2d_forward_and_gradient_random(seed, b, c, h, w, f, stride):
    rng = np.random.default_rng(seed)
    x, k, bias = rng.standard_normal((b, c, h, w)), rng.standard_normal((f, c, 3, 3)), rng.standard_normal(f)
    out = nd.conv2d(nd.Tensor(x), nd.Tensor(k), stride=stride).data
    np.testing.assert_allclose(out, naive_conv(x, k, stride), atol=1e-12)
    up = rng.standard_normal(out.shape)
    loss = lambda xx, kk, bb: nd.sum_all(nd.mul(nd.conv2d(xx, kk, bb, stride=stride), nd.Tensor(up)))
    assert nd.grad_check(lambda t: loss(t, nd.Tensor(k), nd.Tensor(bias)), nd.Tensor(x)) <= GRAD_TOL
    assert nd.grad_check(lambda t: loss(nd.Tensor(x), t, nd.Tensor(bias)), nd.Tensor(k)) <= GRAD_TOL
    assert nd.grad_check(lambda t: loss(nd.Tensor(x), nd.Tensor(k), t), nd.Tensor(bias)) <= GRAD_TOL


@PROPS
@given(seeds(), st.integers(1, 6), st.integers(1, 6))
def test_elementwise_and_dense_gradients_random(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    w, b, o = rng.standard_normal((d, 3)), rng.standard_normal(3), rng.standard_normal((n, d))
    wt = nd.Tensor(rng.standard_normal((n, d)))
    checks = [
        lambda t: nd.sum_all(nd.mul(nd.relu(t), wt)),
        lambda t: nd.sum_all(nd.mul(nd.add(t, nd.Tensor(o)), t)),
        lambda t: nd.sum_all(nd.mul(nd.scale(t, -1.7), wt)),
        lambda t: nd.sum_all(nd.mul(nd.dense(t, nd.Tensor(w), nd.Tensor(b)), nd.dense(t, nd.Tensor(w)))),
        lambda t: nd.sum_all(nd.mul(nd.l2_normalize(t), wt)),
        lambda t: nd.sum_all(nd.log_sum_exp(nd.scale(t, 3.0))),
    ]
    for f in checks:
        assert nd.grad_check(f, nd.Tensor(x)) <= GRAD_TOL
    assert nd.grad_check(lambda t: nd.sum_all(nd.dense(nd.Tensor(x), t, nd.Tensor(b))), nd.Tensor(w)) <= GRAD_TOL


@PROPS
@given(seeds(), st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
def test_global_avg_pool_gradient_random(seed, b, c, h, w):
    rng = np.random.default_rng(seed)
    x, up = rng.standard_normal((b, c, h, w)), rng.standard_normal((b, c))
    np.testing.assert_allclose(nd.global_avg_pool(nd.Tensor(x)).data, x.mean(axis=(2, 3)), atol=1e-14)
    assert nd.grad_check(lambda t: nd.sum_all(nd.mul(nd.global_avg_pool(t), nd.Tensor(up))), nd.Tensor(x)) <= GRAD_TOL


@PROPS
@given(seeds(), st.integers(1, 12), st.floats(-500, 500))
def test_log_sum_exp_shift_and_naive(seed, d, c):
    v = np.random.default_rng(seed).standard_normal(d) * 3
    lse = nd.log_sum_exp(nd.Tensor(v)).item()
    assert abs(lse - math.log(sum(math.exp(x) for x in v))) <= 1e-12
    assert abs(nd.log_sum_exp(nd.Tensor(v + c)).item() - (lse + c)) <= 1e-12 * max(1.0, abs(c))


@PROPS
@given(seeds(), st.integers(1, 6))
def test_matmul_identity_associativity(seed, n):
    a = np.random.default_rng(seed).standard_normal((n, n))
    eye = nd.Tensor(np.eye(n))
    left = nd.matmul(nd.matmul(nd.Tensor(a), eye), eye).data
    right = nd.matmul(nd.Tensor(a), nd.matmul(eye, eye)).data
    np.testing.assert_array_equal(left, a)
    np.testing.assert_array_equal(right, a)


@settings(max_examples=30, deadline=None)
@given(seeds())
def test_forward_is_bit_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, k = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = nd.conv2d(nd.Tensor(x), nd.Tensor(k), stride=2).data
    b = nd.conv2d(nd.Tensor(x.copy()), nd.Tensor(k.copy()), stride=2).data
    assert a.tobytes() == b.tobytes()


def test_scalar_backward_requires_seed_for_nonscalar():
    x = nd.Tensor(np.ones(3), requires_grad=True)
    with nd.GradTape() as tape:
        y = nd.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)
