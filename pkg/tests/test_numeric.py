import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wsod.numeric import (DiffOp, NondifferentiablePoint, axis_softmax, axis_softmax_backward, grad_check,
                          linear, linear_backward, multilabel_bce, multilabel_bce_backward, relative_error,
                          relu, relu_backward, sigmoid, smooth_l1, smooth_l1_backward, swish_gate,
                          swish_gate_backward, weighted_ce, weighted_ce_backward)

finite = st.floats(-30, 30, allow_nan=False)


def test_softmax_examples():
    assert np.allclose(axis_softmax(np.zeros((2, 3)), "rows"), 1 / 3)
    col = axis_softmax(np.array([[1.0], [1.0]]), "columns")
    assert np.allclose(col, 0.5)
    big = axis_softmax(np.array([[1000.0, 0.0]]), 1)
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0)


def test_softmax_degenerate_axis():
    with pytest.raises(ValueError, match="degenerate softmax axis"):
        axis_softmax(np.zeros((3, 0)), 1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), st.sampled_from([0, 1, "rows", "columns"]))
def test_softmax_sums_to_one(m, axis):
    out = axis_softmax(m, axis)
    ax = {"rows": 1, "columns": 0}.get(axis, axis)
    assert np.allclose(out.sum(axis=ax), 1.0, atol=1e-9)
    assert np.all(out >= 0)


def test_softmax_shift_invariant(rng):
    m = rng.standard_normal((3, 4))
    assert np.allclose(axis_softmax(m, 1), axis_softmax(m + 7.5, 1))


def test_sigmoid_extremes():
    s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_swish_values():
    assert swish_gate(np.array([0.0]))[0] == 0.0
    assert swish_gate(np.array([2.0]))[0] == pytest.approx(2 / (1 + math.exp(-2)))


def test_smooth_l1_pieces():
    assert smooth_l1(0.5) == pytest.approx(0.125)
    assert smooth_l1(-2.0) == pytest.approx(1.5)
    assert smooth_l1(1.0) == pytest.approx(0.5)
    assert smooth_l1_backward(1.0, np.array([0.5, 3.0, -3.0])).tolist() == [0.5, 1.0, -1.0]


def test_bce_examples():
    assert multilabel_bce(np.array([0.5]), np.array([1.0])) == pytest.approx(math.log(2))
    # clamped: no infinities at the edges
    assert np.isfinite(multilabel_bce(np.array([0.0, 1.0]), np.array([1.0, 0.0])))
    with pytest.raises(ValueError, match="length mismatch"):
        multilabel_bce(np.ones(2) * 0.5, np.ones(3))


def test_weighted_ce_examples():
    probs = np.array([[0.5, 0.5]])
    assert weighted_ce(probs, np.array([0]), np.array([0.7])) == pytest.approx(0.7 * math.log(2))
    assert weighted_ce(probs, np.array([0]), np.array([0.0])) == 0.0


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.zeros(2), np.array([1e-11, 0.0])) < 1e-4
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)


# --------------------------------------------------------------------------
# finite-difference checks, at least 10 random instances per op

def _ops(rng):
    w = rng.standard_normal((4, 3))
    return {
        "softmax_rows": (DiffOp("softmax_rows", lambda m: axis_softmax(m, 1),
                                lambda g, m: [axis_softmax_backward(g, axis_softmax(m, 1), 1)]),
                         lambda r: [r.standard_normal((3, 4))]),
        "softmax_cols": (DiffOp("softmax_cols", lambda m: axis_softmax(m, 0),
                                lambda g, m: [axis_softmax_backward(g, axis_softmax(m, 0), 0)]),
                         lambda r: [r.standard_normal((3, 4))]),
        "swish": (DiffOp("swish", swish_gate, lambda g, z: [swish_gate_backward(g, z)]),
                  lambda r: [r.standard_normal((5,)) * 3]),
        "sigmoid": (DiffOp("sigmoid", sigmoid, lambda g, x: [g * sigmoid(x) * (1 - sigmoid(x))]),
                    lambda r: [r.standard_normal((5,)) * 3]),
        "relu": (DiffOp("relu", relu, lambda g, x: [relu_backward(g, x)], lambda x: (x > 0).tobytes()),
                 lambda r: [r.standard_normal((6,))]),
        "smooth_l1": (DiffOp("smooth_l1", smooth_l1, lambda g, x: [smooth_l1_backward(g, x)],
                             lambda x: (np.abs(x) < 1).tobytes()),
                      lambda r: [r.standard_normal((6,)) * 2]),
        "linear": (DiffOp("linear", linear, lambda g, x, w, b: list(linear_backward(g, x, w))),
                   lambda r: [r.standard_normal((2, 4)), r.standard_normal((4, 3)), r.standard_normal(3)]),
        "bce": (DiffOp("bce", lambda p: np.array(multilabel_bce(p, np.array([1.0, 0.0, 1.0]))),
                       lambda g, p: [multilabel_bce_backward(p, np.array([1.0, 0.0, 1.0]), g)]),
                lambda r: [r.uniform(0.05, 0.95, 3)]),
        "weighted_ce": (DiffOp("weighted_ce",
                               lambda p: np.array(weighted_ce(p, np.array([0, 2]), np.array([0.3, 0.9]))),
                               lambda g, p: [weighted_ce_backward(p, np.array([0, 2]), np.array([0.3, 0.9]), g)]),
                        lambda r: [r.uniform(0.05, 1.0, (2, 3))]),
    }


@pytest.mark.parametrize("name", ["softmax_rows", "softmax_cols", "swish", "sigmoid", "relu", "smooth_l1",
                                  "linear", "bce", "weighted_ce"])
def test_grad_check_ops(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    op, draw = _ops(rng)[name]
    for _ in range(10):
        rep = grad_check(op, draw(rng), tolerance=1e-4, redraw=draw, rng=rng)
        assert rep.passed, (name, rep.max_rel_error)


def test_grad_check_detects_wrong_backward(rng):
    bad = DiffOp("bad", lambda x: x ** 2, lambda g, x: [g * x])  # missing factor 2
    rep = grad_check(bad, [rng.standard_normal(4)])
    assert not rep.passed and rep.failures == [0]


def test_grad_check_kink_without_redraw_raises():
    op = DiffOp("relu", relu, lambda g, x: [relu_backward(g, x)], lambda x: (x > 0).tobytes())
    with pytest.raises(NondifferentiablePoint):
        grad_check(op, [np.array([1e-7, 1.0])])


def test_grad_check_redraws_at_kink(rng):
    op = DiffOp("relu", relu, lambda g, x: [relu_backward(g, x)], lambda x: (x > 0).tobytes())
    rep = grad_check(op, [np.array([1e-7, 1.0])], redraw=lambda r: [r.standard_normal(2) + 3.0], rng=rng)
    assert rep.passed and rep.redraws == 1


def test_grad_check_rejects_nonfinite_input():
    op = DiffOp("id", lambda x: x, lambda g, x: [g])
    with pytest.raises(FloatingPointError):
        grad_check(op, [np.array([np.nan])])
