import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from imgsteer.tensor import (
    Graph,
    ShapeError,
    Tensor,
    add,
    apply_primitive,
    backward,
    broadcast_to,
    concat,
    embed,
    gelu,
    grad_check,
    grad_of,
    l2_norm,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    separable,
    slice_,
    softmax,
    sub,
    sum_,
    transpose,
)

RNG = np.random.default_rng(1234)


def _sq(t):
    return sum_(mul(t, t))


# ---------------------------------------------------------------------------
# worked examples


def test_matmul_identity():
    out = matmul(np.eye(2), np.array([[2.0, 3.0], [4.0, 5.0]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(4)).data, [0.25] * 4, atol=0)


def test_layer_norm_of_constant_is_zero():
    np.testing.assert_array_equal(layer_norm(np.full(5, 3.7)).data, np.zeros(5))


def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(_sq(x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_matmul_gradient_vs_fd():
    w = RNG.standard_normal((4, 4))
    err = grad_check(lambda t: _sq(matmul(t, w)), RNG.standard_normal((4, 4)))
    assert err < 1e-6


def test_softmax_chain_vs_fd():
    err = grad_check(lambda t: _sq(softmax(t)), RNG.standard_normal((3, 5)))
    assert err < 1e-6


def test_quadratic_form_grad_check():
    a = RNG.standard_normal((6, 6))
    q = a @ a.T
    err = grad_check(lambda t: sum_(mul(reshape(matmul(reshape(t, (1, 6)), q), (6,)), t)),
                     RNG.standard_normal(6))
    assert err < 1e-8


# ---------------------------------------------------------------------------
# every primitive against central differences

CASES = {
    "add": (lambda t: _sq(add(t, np.arange(5.0))), (3, 5)),
    "add_broadcast": (lambda t: _sq(add(np.ones((2, 3, 5)), t)), (3, 5)),
    "sub": (lambda t: _sq(sub(np.arange(5.0), t)), (3, 5)),
    "mul": (lambda t: _sq(mul(t, np.linspace(-1, 2, 5))), (3, 5)),
    "scale": (lambda t: _sq(scale(t, -2.5)), (4,)),
    "matmul_batched": (lambda t: _sq(matmul(t, np.ones((2, 5, 3)) * 0.3)), (2, 4, 5)),
    "gelu": (lambda t: _sq(gelu(t)), (3, 4)),
    "softmax_masked": (lambda t: _sq(softmax(t, mask=np.triu(np.full((4, 4), -np.inf), 1))), (4, 4)),
    "layer_norm": (lambda t: _sq(mul(layer_norm(t), np.arange(1.0, 7.0))), (2, 6)),
    "sum_axis": (lambda t: _sq(sum_(t, axis=1)), (3, 4)),
    "mean": (lambda t: _sq(mean(t, axis=0, keepdims=True)), (3, 4)),
    "l2_norm": (lambda t: l2_norm(t), (7,)),
    "concat": (lambda t: _sq(concat([t, scale(t, 2.0)], axis=1)), (2, 3)),
    "slice": (lambda t: _sq(slice_(t, (slice(1, None), 0))), (3, 4)),
    "slice_repeat": (lambda t: _sq(slice_(t, np.array([0, 0, 2]))), (3, 2)),
    "reshape": (lambda t: _sq(mul(reshape(t, (6, 2)), np.arange(12.0).reshape(6, 2))), (3, 4)),
    "transpose": (lambda t: _sq(mul(transpose(t, (1, 0, 2)), np.arange(24.0).reshape(3, 2, 4))), (2, 3, 4)),
    "broadcast_to": (lambda t: _sq(mul(broadcast_to(t, (3, 4)), np.arange(12.0).reshape(3, 4))), (1, 4)),
    "separable": (lambda t: _sq(separable(t, np.arange(12.0).reshape(4, 3) / 7, np.ones((2, 5)))), (3, 5, 3)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    fn, shape = CASES[name]
    point = np.random.default_rng(zlib.crc32(name.encode())).standard_normal(shape)
    assert grad_check(fn, point) < 1e-6


def test_embed_gradient_accumulates_repeats():
    table = Tensor(RNG.standard_normal((5, 3)), requires_grad=True)
    backward(sum_(embed(table, np.array([[1, 1, 4]]))))
    expected = np.zeros((5, 3))
    expected[1] = 2.0
    expected[4] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


# ---------------------------------------------------------------------------
# graph contract


def test_unused_leaf_gets_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = sum_(add(a, scale(b, 0.0)))
    backward(loss)
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


def test_graph_is_topological():
    a = Tensor(np.ones(2), requires_grad=True)
    b = mul(a, a)
    c = add(b, a)
    nodes = Graph.trace(sum_(c)).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_forward_replay_is_bitwise():
    x = RNG.standard_normal((3, 6))
    f = lambda t: layer_norm(gelu(matmul(t, np.ones((6, 6)) * 0.1)))
    assert np.array_equal(f(Tensor(x)).data, f(Tensor(x)).data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y._parents == ()


@pytest.mark.parametrize(
    "call, msg",
    [
        (lambda: matmul(np.ones((2, 3)), np.ones((4, 2))), "inner dimensions differ"),
        (lambda: matmul(np.ones(3), np.ones((3, 2))), "at least 2-D"),
        (lambda: add(np.ones((2, 3)), np.ones((4, 3))), "cannot broadcast"),
        (lambda: concat([np.ones((2, 3)), np.ones((3, 3))], axis=1), "concat"),
        (lambda: reshape(np.ones(6), (4, 2)), "reshape"),
    ],
)
def test_shape_errors_name_the_op(call, msg):
    with pytest.raises(ShapeError, match=msg):
        call()


def test_apply_primitive_dispatch_and_unknown():
    out = apply_primitive("matmul", np.eye(2), np.ones((2, 2)))
    np.testing.assert_array_equal(out.data, np.ones((2, 2)))
    with pytest.raises(ValueError, match="unknown primitive"):
        apply_primitive("conv", np.ones(2))


def test_grad_of_returns_value_and_gradient():
    val, g = grad_of(lambda t: _sq(t), np.array([3.0, -1.0]))
    assert val == 10.0
    np.testing.assert_array_equal(g, [6.0, -2.0])


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(_sq, np.ones(2), step=0.0)


# ---------------------------------------------------------------------------
# properties

finite = st.floats(-5, 5, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(softmax(x).data.sum(axis=-1), 1.0, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(-10, 10), st.floats(0.5, 10))
def test_layer_norm_affine_identity(x, shift, mult):
    # LN(m x + s) = (x - mean) / sqrt(var + eps / m^2): shift drops out, eps rescales
    got = layer_norm(x * mult + shift).data
    want = (x - x.mean()) / np.sqrt(x.var() + 1e-5 / mult**2)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_linear_ops_have_exact_adjoint(x):
    # <A x, y> == <x, A^T y> for the reshape/transpose/broadcast chain
    t = Tensor(x, requires_grad=True)
    y = np.random.default_rng(0).standard_normal((2,) + x.shape[::-1])
    out = broadcast_to(transpose(t, (1, 0)), (2,) + x.shape[::-1])
    backward(sum_(mul(out, y)))
    np.testing.assert_allclose((out.data * y).sum(), (x * t.grad).sum(), rtol=1e-10, atol=1e-12)
