import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnf import autodiff as ad
from mnf.errors import ContractError, NumericFault

from oracles import central_diff_grad, conv2d_loops


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.max(np.abs(a - b) / denom)


# --------------------------------------------------------------- primitives

def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    assert np.array_equal(out.data, a)


def test_pointwise_trivia():
    assert ad.tanh(ad.constant(0.0)).item() == 0.0
    assert ad.sigmoid(ad.constant(0.0)).item() == 0.5


def test_log_softmax_symmetry():
    out = ad.log_softmax(ad.constant([1.0, 1.0, 1.0]))
    assert np.allclose(out.data, -np.log(3.0))


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ContractError) as err:
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_nonfinite_raises_numeric_fault_with_op():
    with pytest.raises(NumericFault) as err:
        ad.log(ad.constant([-1.0]))
    assert err.value.where == "log"


def test_div_by_zero_is_numeric_fault():
    with pytest.raises(NumericFault):
        ad.div(ad.constant(1.0), ad.constant(0.0))


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("add", ad.constant(1.0), ad.constant(2.0))
    assert out.item() == 3.0
    with pytest.raises(ContractError):
        ad.apply_primitive("no-such-op", ad.constant(1.0))


# ----------------------------------------------------------------- backward

def test_backward_sum_of_squares():
    x = ad.parameter([1.0, 2.0, 3.0])
    grads = ad.backward(ad.sum_(ad.square(x)))
    assert np.allclose(grads[x], [2.0, 4.0, 6.0])


def test_backward_tanh_at_zero():
    x = ad.parameter(np.zeros(4))
    grads = ad.backward(ad.sum_(ad.tanh(x)))
    assert np.allclose(grads[x], np.ones(4))


def test_backward_rejects_nonscalar():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        ad.backward(ad.square(x))


def test_backward_fanout_accumulates():
    x = ad.parameter(2.0)
    y = ad.add(ad.square(x), ad.mul(x, 3.0))  # x^2 + 3x -> 2x + 3 = 7
    assert ad.backward(y)[x] == pytest.approx(7.0)


def test_detached_tensor_gets_no_gradient():
    x = ad.parameter([1.0, 2.0])
    c = ad.constant([3.0, 4.0])
    grads = ad.backward(ad.sum_(ad.mul(x, c)))
    assert c not in grads and x in grads


def test_backward_twice_identical():
    x = ad.parameter([0.3, -0.2])
    loss = ad.sum_(ad.exp(ad.tanh(x)))
    g1 = ad.backward(loss)[x]
    g2 = ad.backward(loss)[x]
    assert np.array_equal(g1, g2)


def test_backward_random_graph_matches_central_differences():
    rng = ad.Rng(7)
    w1 = ad.parameter(rng.normal((4, 5)), name="w1")
    w2 = ad.parameter(rng.normal((5, 3)), name="w2")
    b = ad.parameter(rng.normal((3,)), name="b")
    x = ad.constant(rng.normal((2, 4)))

    def loss():
        h = ad.tanh(ad.matmul(x, w1))
        out = ad.add(ad.matmul(h, w2), b)
        return ad.sum_(ad.square(ad.sigmoid(out)))

    table = ad.backward(loss())
    for p in (w1, w2, b):
        numeric = central_diff_grad(lambda: loss().item(), p.data)
        assert rel_err(table[p], numeric) < 1e-4


def test_backward_linearity():
    rng = ad.Rng(11)
    x = ad.parameter(rng.normal((3, 3)))

    def l1():
        return ad.sum_(ad.square(x))

    def l2():
        return ad.sum_(ad.tanh(x))

    a_, b_ = 0.7, -1.3
    combined = ad.backward(ad.add(ad.mul(l1(), a_), ad.mul(l2(), b_)))[x]
    separate = a_ * ad.backward(l1())[x] + b_ * ad.backward(l2())[x]
    assert np.allclose(combined, separate, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["tanh", "sigmoid", "exp", "square", "log", "sqrt",
                        "relu", "log_softmax", "mean", "sum", "neg"]),
       st.integers(1, 16), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_primitive_gradients_match_finite_differences(op, n, m, seed):
    rng = ad.Rng(seed)
    data = rng.normal((m, n)) * 0.8
    if op in ("log", "sqrt"):
        data = np.abs(data) + 0.5
    if op == "relu":
        data = data + 0.05 * np.sign(data)  # keep away from the kink
    p = ad.parameter(data)
    fn = ad.PRIMITIVES[op]

    def loss():
        out = fn(p)
        return out if out.shape == () else ad.sum_(ad.mul(out, out))

    analytic = ad.backward(loss())[p]
    numeric = central_diff_grad(lambda: loss().item(), p.data)
    assert rel_err(analytic, numeric) < 1e-4


def test_binary_and_shape_primitive_gradients():
    rng = ad.Rng(3)
    a = ad.parameter(rng.normal((3, 4)) + 2.5, name="a")
    b = ad.parameter(rng.normal((4,)) + 2.5, name="b")  # broadcast on purpose

    for op in ("add", "sub", "mul", "div", "minimum", "maximum"):
        fn = ad.PRIMITIVES[op]

        def loss():
            return ad.sum_(ad.square(fn(a, b)))

        table = ad.backward(loss())
        for p in (a, b):
            numeric = central_diff_grad(lambda: loss().item(), p.data)
            assert rel_err(table[p], numeric) < 1e-4, op


def test_gather_reshape_transpose_broadcast_gradients():
    rng = ad.Rng(5)
    p = ad.parameter(rng.normal((2, 6)))
    idx = np.array([0, 5, 5, 3])

    def loss():
        g = ad.gather(p, idx)
        r = ad.reshape(ad.transpose(p), (12,))
        wide = ad.broadcast_to(ad.reshape(g, (4, 1)), (4, 3))
        return ad.add(ad.sum_(ad.square(wide)), ad.sum_(ad.square(r)))

    analytic = ad.backward(loss())[p]
    numeric = central_diff_grad(lambda: loss().item(), p.data)
    assert rel_err(analytic, numeric) < 1e-4


def test_conv_matches_quadruple_loop_exactly():
    rng = ad.Rng(9)
    for padding in ("valid", "same"):
        for shape, kshape in [((2, 8, 8, 3), (3, 3, 3, 2)),
                              ((1, 5, 7, 1), (3, 3, 1, 4)),
                              ((1, 4, 4, 2), (1, 1, 2, 2))]:
            x = rng.normal(shape)
            k = rng.normal(kshape)
            out = ad.conv2d(ad.constant(x), ad.constant(k), padding)
            assert np.array_equal(out.data, conv2d_loops(x, k, padding)), (padding, shape)


def test_conv_gradient_matches_finite_differences():
    rng = ad.Rng(13)
    x = ad.parameter(rng.normal((1, 6, 6, 2)), name="x")
    k = ad.parameter(rng.normal((3, 3, 2, 2)), name="k")

    def loss():
        return ad.sum_(ad.square(ad.conv2d(x, k, "same")))

    table = ad.backward(loss())
    for p in (x, k):
        numeric = central_diff_grad(lambda: loss().item(), p.data)
        assert rel_err(table[p], numeric) < 1e-4


def test_maxpool_gradient_and_values():
    rng = ad.Rng(17)
    x = ad.parameter(rng.normal((2, 4, 6, 3)))

    def loss():
        return ad.sum_(ad.square(ad.maxpool2x2(x)))

    out = ad.maxpool2x2(x)
    ref = x.data.reshape(2, 2, 2, 3, 2, 3).max(axis=(2, 4))
    assert np.array_equal(out.data, ref)
    numeric = central_diff_grad(lambda: loss().item(), x.data)
    assert rel_err(ad.backward(loss())[x], numeric) < 1e-4


def test_log_softmax_gradient():
    rng = ad.Rng(19)
    x = ad.parameter(rng.normal((3, 5)))
    w = ad.constant(rng.normal((3, 5)))

    def loss():
        return ad.sum_(ad.mul(ad.log_softmax(x), w))

    numeric = central_diff_grad(lambda: loss().item(), x.data)
    assert rel_err(ad.backward(loss())[x], numeric) < 1e-4


# ------------------------------------------------------------- finite_diff_check

def test_finite_diff_check_linear_layer():
    rng = ad.Rng(23)
    w = ad.parameter(rng.normal((4, 2)), name="w")
    b = ad.parameter(rng.normal((2,)), name="b")
    x = ad.constant(rng.normal((3, 4)))
    y = ad.constant(rng.normal((3, 2)))

    def loss():
        pred = ad.add(ad.matmul(x, w), b)
        return ad.mean(ad.square(ad.sub(pred, y)))

    report = ad.finite_diff_check(loss, [w, b], rel_tol=1e-4)
    assert report.ok, repr(report)


def test_finite_diff_check_conv():
    rng = ad.Rng(29)
    k = ad.parameter(rng.normal((3, 3, 1, 2)), name="k")
    x = ad.constant(rng.normal((1, 8, 8, 1)))

    def loss():
        return ad.sum_(ad.conv2d(x, k, "valid"))

    report = ad.finite_diff_check(loss, [k], rel_tol=1e-4)
    assert report.ok, repr(report)


def test_finite_diff_check_surfaces_numeric_fault():
    p = ad.parameter(np.array(1e-9), name="p")

    def loss():
        return ad.log(p)

    with pytest.raises(NumericFault):
        ad.finite_diff_check(loss, [p], step=1e-5)


# ------------------------------------------------------------------ sampling

def test_bernoulli_edge_cases():
    rng = ad.Rng(1)
    assert np.array_equal(ad.sample(rng, ("bernoulli", 0.0), (100,)).data, np.zeros(100))
    assert np.array_equal(ad.sample(rng, ("bernoulli", 1.0), (100,)).data, np.ones(100))
    with pytest.raises(ContractError):
        rng.bernoulli(1.5, (2,))


def test_standard_normal_moments():
    n = 10 ** 6
    draws = ad.sample(ad.Rng(42), "standard-normal", (n,)).data
    assert abs(draws.mean()) < 4 / np.sqrt(n)
    assert abs(draws.var() - 1.0) < 0.01


def test_same_seed_same_stream():
    a = ad.Rng(123).normal((50,))
    b = ad.Rng(123).normal((50,))
    assert np.array_equal(a, b)
    c = ad.Rng(123).child(4).normal((50,))
    d = ad.Rng(123).child(4).normal((50,))
    assert np.array_equal(c, d)
    assert not np.array_equal(a, c)


def test_sample_is_detached():
    s = ad.sample(ad.Rng(0), "standard-normal", (3,))
    assert not s.requires_grad


def test_forward_backward_bit_determinism():
    def run():
        rng = ad.Rng(77)
        w = ad.parameter(rng.normal((6, 4)))
        x = ad.constant(rng.normal((5, 6)))
        noise = ad.sample(rng, "standard-normal", (5, 4))
        loss = ad.sum_(ad.square(ad.add(ad.matmul(x, w), noise)))
        return ad.backward(loss)[w].copy()

    assert np.array_equal(run(), run())


def test_no_grad_blocks_recording():
    x = ad.parameter([1.0, 2.0])
    with ad.no_grad():
        out = ad.sum_(ad.square(x))
    assert not out.requires_grad
