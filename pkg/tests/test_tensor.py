import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fmgan import losses as L
from fmgan import tensor as T
from fmgan.tensor import GraphError, GraphTape, ShapeError, Tensor

import gradcases


def test_matmul_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_add_zeros_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(T.add(x, T.zeros_like(x)).data, x.data)


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-7)


def test_forward_op_dispatch_matches_direct(rng):
    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((3, 2)))
    np.testing.assert_array_equal(T.forward_op("matmul", [a, b]).data, T.matmul(a, b).data)
    np.testing.assert_array_equal(T.forward_op("tanh", [a]).data, np.tanh(a.data))
    np.testing.assert_array_equal(T.forward_op("reduce-sum", [a], axis=0).data, a.data.sum(0))
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("fft", [a])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_trailing_broadcast_allowed_leading_not():
    T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    T.add(Tensor(np.zeros((2, 3))), 1.0)
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_records_only_when_needed():
    a = Tensor([1.0, 2.0])
    assert T.exp(a).node is None
    b = Tensor([1.0, 2.0], requires_grad=True)
    assert T.exp(b).node is not None
    with T.no_grad():
        assert T.exp(b).node is None


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.reduce_sum(T.square(x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_not_on_tape():
    with pytest.raises(GraphError, match="not on tape"):
        T.backward(Tensor(3.0))


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.square(x))


def test_mean_matching_identical_batches_gives_zero_gradient(rng):
    f = rng.standard_normal((8, 5))
    fake = Tensor(f.copy(), requires_grad=True)
    loss = L.loss_GD_mean_match(Tensor(f).mean(axis=0), T.reduce_mean(fake, axis=0))
    (g,) = T.grad(loss, [fake])
    assert np.all(g == 0)


def test_unreachable_leaf_gets_zero():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    gx, gy = T.grad(T.reduce_sum(T.square(x)), [x, y])
    assert gy.shape == (1,) and gy[0] == 0


def test_accumulation_is_additive():
    x = Tensor([1.5, -2.0], requires_grad=True)
    # x used on two paths: sum(x*x) + sum(3x)
    loss = T.add(T.reduce_sum(T.mul(x, x)), T.reduce_sum(T.mul(x, 3.0)))
    (g,) = T.grad(loss, [x])
    np.testing.assert_allclose(g, 2 * x.data + 3)
    T.backward(loss)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * (2 * x.data + 3))


def test_no_grad_leaf_never_accumulates():
    w = Tensor([1.0, 2.0])
    x = Tensor([3.0, 4.0], requires_grad=True)
    T.backward(T.reduce_sum(T.mul(w, x)))
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, w.data)


def test_tape_is_topological(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    a = T.tanh(x)
    b = T.mul(a, a)
    loss = T.reduce_sum(T.add(b, a))
    tape = GraphTape.from_root(loss)
    pos = {id(t): i for i, t in enumerate(tape.tensors)}
    for t in tape.tensors:
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(t)]
    assert len(pos) == len(tape.tensors)  # each visited once


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)))
    assert t.size == 6 and t.data.size == int(np.prod(t.shape))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 6, 6, 3)))
        w = Tensor(rng.standard_normal((3, 3, 3, 4)))
        return T.conv2d(x, w, 2).data.tobytes()
    assert run() == run()


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_transpose_is_adjoint(rng, stride):
    # <conv(x, w), u> == <x, conv_transpose(u, w)> with the same kernel array
    x = rng.standard_normal((2, 6, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    with T.default_dtype(np.float64):
        y = T.conv2d(Tensor(x), Tensor(w), stride).data
        u = rng.standard_normal(y.shape)
        xt = T.conv2d_transpose(Tensor(u), Tensor(w), stride).data
    assert xt.shape == x.shape
    assert np.isclose((y * u).sum(), (x * xt).sum(), rtol=1e-10)


def test_deconv_doubles_side(rng):
    x = Tensor(rng.standard_normal((1, 4, 4, 2)))
    w = Tensor(rng.standard_normal((4, 4, 3, 2)))
    assert T.conv2d_transpose(x, w, 2).shape == (1, 8, 8, 3)


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_sum_of_squares_seed0():
    x = np.random.default_rng(0).standard_normal(5)
    assert T.finite_diff_check(lambda t: T.reduce_sum(T.square(t)), x, h=1e-4) < 1e-5


def test_finite_diff_constant_is_zero():
    assert T.finite_diff_check(lambda t: Tensor(2.0), np.ones(3)) == 0.0


def test_finite_diff_softmax_ce_uniform_logits():
    x = np.zeros((3, 4))
    assert T.finite_diff_check(lambda t: L.loss_C(t, [0, 1, 3]), x) < 1e-4


def test_finite_diff_reports_coordinate():
    x = np.array([1.0, 0.0, 2.0])
    # the probe steps below zero at coordinate 1, so log warns before the check raises
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match=r"\(1,\)"):
        T.finite_diff_check(lambda t: T.reduce_sum(T.log(t)), x + np.array([0, 1e-6, 0]), h=1e-5)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda t: T.reduce_sum(t), np.ones(2), h=0)


@pytest.mark.parametrize("name", sorted(gradcases.OP_CASES))
def test_op_gradients_small_seed_sweep(name):
    assert gradcases.max_error(name, seeds=range(10)) < 1e-4


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6),
                  elements=st.floats(-3, 3)))
def test_tanh_sigmoid_chain_gradient_property(x):
    f = lambda t: T.reduce_sum(T.mul(T.tanh(t), T.sigmoid(t)))
    assert T.finite_diff_check(f, x) < 1e-4


@given(st.integers(1, 6), st.integers(1, 6))
def test_reduce_mean_gradient_is_uniform(m, n):
    x = Tensor(np.ones((m, n)), requires_grad=True)
    (g,) = T.grad(T.reduce_mean(x), [x])
    np.testing.assert_allclose(g, np.full((m, n), 1 / (m * n)), rtol=1e-6)
