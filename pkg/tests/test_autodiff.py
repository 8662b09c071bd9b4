import gc
import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bpolab import _gradcases
from bpolab.autodiff import OP_KINDS, Parameter, ShapeError, Tape, Value, backward, constant, grad_check


def test_every_op_kind_has_a_gradient_case():
    covered = {name.split("_")[0] if name.split("_")[0] in OP_KINDS else name for name in _gradcases.OP_CASES}
    assert set(OP_KINDS) - {"stop_gradient"} <= covered


@pytest.mark.parametrize("name", sorted(_gradcases.OP_CASES))
def test_op_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    assert max(_gradcases.run_case(name, rng) for _ in range(5)) <= 1e-5


def test_matmul_gradient_by_hand():
    tape = Tape()
    A = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    x = tape.leaf(np.array([[1.0], [-1.0]]))
    g = backward(tape, (A @ x).sum())
    np.testing.assert_array_equal(g.wrt(A), [[1.0, -1.0], [1.0, -1.0]])
    np.testing.assert_array_equal(g.wrt(x), [[4.0], [6.0]])


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = x * x + x
    assert backward(tape, y.sum()).wrt(x)[0] == 7.0


def test_stop_gradient_blocks_exactly():
    tape = Tape()
    x = tape.leaf(np.array([1.5, -2.0]))
    y = (tape.stop_gradient(x) * x).sum()
    # only the direct factor contributes: d/dx (c * x) = c
    np.testing.assert_array_equal(backward(tape, y).wrt(x), [1.5, -2.0])
    z = tape.stop_gradient(x).tanh().sum()
    np.testing.assert_array_equal(backward(tape, z).wrt(x), [0.0, 0.0])


def test_constants_are_not_differentiated():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    c = constant(np.array([2.0, 3.0]))
    g = backward(tape, (x * c).sum())
    np.testing.assert_array_equal(g.wrt(x), [2.0, 3.0])
    assert g.wrt(c).tolist() == [0.0, 0.0]


def test_bias_row_broadcast_only():
    tape = Tape()
    x = tape.leaf(np.ones((3, 4)))
    b = tape.leaf(np.arange(4.0))
    g = backward(tape, (x + b).sum())
    np.testing.assert_array_equal(g.wrt(b), [3.0] * 4)
    with pytest.raises(ShapeError):
        x + tape.leaf(np.ones((3, 1)))
    with pytest.raises(ShapeError):
        x * tape.leaf(np.ones(4))


def test_matmul_shape_mismatch():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.leaf(np.ones((2, 3))) @ tape.leaf(np.ones((2, 3)))


def test_backward_needs_scalar():
    tape = Tape()
    with pytest.raises(ShapeError):
        backward(tape, tape.leaf(np.ones(3)))


def test_unknown_op_and_foreign_tape():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ValueError, match="unknown op"):
        t1.apply("nope", t1.leaf(np.ones(1)))
    with pytest.raises(ValueError, match="different tape"):
        t2.apply("tanh", t1.leaf(np.ones(1)))


def test_param_binding_is_shared_and_shape_checked():
    p = Parameter(np.ones((2, 2)), "W")
    tape = Tape()
    assert tape.param(p).node == tape.param(p).node == 0 and len(tape) == 1
    # gradients from two reads of the same parameter accumulate on one leaf
    g2 = tape.param_grads(backward(tape, (tape.param(p) + tape.param(p)).sum()), [p])[0]
    np.testing.assert_array_equal(g2, np.full((2, 2), 2.0))
    with pytest.raises(ShapeError):
        tape.bind(p, tape.leaf(np.ones(3)))
    grads = tape.param_grads(backward(tape, tape.param(p).sum()), [p, Parameter(np.ones(3))])
    np.testing.assert_array_equal(grads[0], np.ones((2, 2)))
    np.testing.assert_array_equal(grads[1], np.zeros(3))


def test_grad_check_detects_a_wrong_gradient():
    def f(tape, x):
        # value of x^2 but with the gradient blocked on one factor
        return (tape.stop_gradient(x) * x).sum()

    assert grad_check(f, np.array([1.0, 2.0])) > 0.4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 2), elements=st.floats(-5, 5)))
def test_gradient_is_linear_in_the_output(a, b):
    tape = Tape()
    x = tape.leaf(a)
    out = (x.tanh() * Value(b)).sum()
    g1 = backward(tape, out).wrt(x)
    g3 = backward(tape, out * 3.0).wrt(x)
    np.testing.assert_allclose(g3, 3 * g1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g1, b * (1 - np.tanh(a) ** 2), rtol=1e-12, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(a):
    tape = Tape()
    x = tape.leaf(a)
    y = tape.apply("softmax", x)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=1e-12)
    # the row sums are constant, so their gradient vanishes
    np.testing.assert_allclose(backward(tape, y.sum()).wrt(x), 0.0, atol=1e-12)


def test_tape_is_freed_by_reference_counting():
    # a tape must not sit in a reference cycle: its saved activations would outlive the step
    p = Parameter(np.ones((3, 3)))
    gc.disable()
    try:
        tape = Tape()
        x = tape.param(p)
        tape.param_grads(backward(tape, (x @ tape.param(p)).sum()), [p])
        ref = weakref.ref(tape)
        del tape, x
        assert ref() is None
    finally:
        gc.enable()
