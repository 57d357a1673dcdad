import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hyperlearn import diffcore as dc
from hyperlearn.diffcore import ParameterStore, ShapeError, Tape
from hyperlearn.gradcheck import check_function, op_cases


def test_affine_identity():
    x = np.array([0.3, -1.2, 2.0])
    out = dc.affine(np.eye(3), x, np.zeros(3))
    np.testing.assert_array_equal(out.value, x)


def test_softmax_singleton():
    np.testing.assert_array_equal(dc.softmax(np.array([4.2])).value, [1.0])


def test_cross_entropy_uniform_logits():
    ce = dc.cross_entropy(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert float(ce.value) == pytest.approx(math.log(2), abs=1e-12)
    assert float(ce.value) == pytest.approx(0.6931, abs=1e-4)


def test_linear_gradient():
    x = dc.parameter(np.array([1.0, -2.0]))
    dc.backward(dc.sum(dc.scale(3.0, x)))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_squared_error_minimum_has_zero_gradient():
    a = dc.parameter(np.array([0.5, 1.5]))
    b = dc.parameter(np.array([0.5, 1.5]))
    dc.backward(dc.squared_error(a, b))
    np.testing.assert_array_equal(a.grad, 0.0)
    np.testing.assert_array_equal(b.grad, 0.0)


def test_backward_needs_scalar_root():
    x = dc.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        dc.backward(dc.tanh(x))


def test_shape_errors():
    with pytest.raises(ShapeError):
        dc.affine(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ShapeError):
        dc.squared_error(np.ones(2), np.ones(3))
    with pytest.raises(ShapeError):
        dc.add(np.ones(2), np.ones(3))


@pytest.mark.parametrize("name, build, inputs", op_cases(np.random.default_rng(0)),
                         ids=[c[0] for c in op_cases(np.random.default_rng(0))])
def test_op_matches_finite_differences(name, build, inputs):
    report = check_function(name, build, inputs, np.random.default_rng(1))
    assert report["pass"], report


def test_composite_expression_at_standard_step(rng):
    # the documented step h = 1e-4 and rtol = 1e-4
    W = dc.parameter(rng.normal(size=(3, 4)))
    x = dc.parameter(rng.normal(size=(2, 4)))

    def f():
        h = dc.tanh(dc.affine(W, x))
        return dc.cross_entropy(np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]), dc.hadamard(h, dc.sigmoid(h)))

    dc.backward(f())
    for node in (W, x):
        num = dc.numeric_grad(lambda: float(f().value), node.value, h=1e-4)
        np.testing.assert_allclose(node.grad, num, rtol=1e-4, atol=1e-6)


def test_tape_determinism(rng):
    W0, x0 = rng.normal(size=(3, 3)), rng.normal(size=3)

    def run():
        W, x = dc.parameter(W0.copy()), dc.parameter(x0.copy())
        out = dc.sum(dc.softmax(dc.tanh(dc.affine(W, x))))
        dc.backward(out)
        return out.value, W.grad.copy(), x.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_tape_freeze_cuts_gradient():
    x = dc.parameter(np.array([1.0, 2.0]))
    with Tape() as tape:
        h = dc.tanh(x)
    assert len(tape) == 1
    tape.freeze()
    y = dc.sum(dc.hadamard(h, x))
    dc.backward(y)
    # only the direct path through x survives; h is now a constant
    np.testing.assert_allclose(x.grad, np.tanh([1.0, 2.0]))


def test_no_grad_builds_constants():
    x = dc.parameter(np.ones(2))
    with dc.no_grad():
        y = dc.tanh(x)
    assert not y.requires_grad and y.is_leaf


def test_repeated_backward_does_not_double_count():
    x = dc.parameter(np.array([0.7]))
    h = dc.tanh(x)
    dc.backward(dc.sum(h))
    first = x.grad.copy()
    x.zero_grad()
    dc.backward(dc.sum(h))
    np.testing.assert_array_equal(x.grad, first)


def _store():
    s = ParameterStore(seed=3)
    s.add("readout", ("human",), "W", (2, 4), fan_in=4)
    s.add("space", ("visit",), "b", (3,), init=0.0)
    return s


def test_initialisation_bounds():
    W = _store().get("readout", ("human",), "W").value
    assert np.all(np.abs(W) <= 0.5)
    assert np.array_equal(W, _store().get("readout", ("human",), "W").value)


def test_parameter_objects_are_shared():
    s = _store()
    assert s.get("space", ("visit",), "b") is s.group("space", ("visit",))["b"]
    s.get("space", ("visit",), "b").value[0] = 5.0
    assert s.group("space", ("visit",))["b"].value[0] == 5.0


def test_state_dict_round_trip():
    s, t = _store(), ParameterStore(seed=99)
    t.add("readout", ("human",), "W", (2, 4), fan_in=4)
    t.add("space", ("visit",), "b", (3,), init=1.0)
    t.load_dict(s.to_dict())
    for (_, _, a), (_, _, b) in zip(s.items(), t.items()):
        assert np.array_equal(a.value, b.value)


def test_sgd_step():
    s = _store()
    W = s.get("readout", ("human",), "W")
    before = W.value.copy()
    g = np.arange(8.0).reshape(2, 4)
    W.grad = g
    dc.SGD(s, lr=0.1).step()
    np.testing.assert_allclose(W.value, before - 0.1 * g)
    assert W._grad is None


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_parameters(kind):
    s = _store()
    before = [n.value.copy() for n in s.nodes()]
    for n in s.nodes():
        n.grad = np.zeros_like(n.value)
    dc.make_optimizer(kind, s, 0.01).step()
    for b, n in zip(before, s.nodes()):
        np.testing.assert_array_equal(n.value, b)


def test_adam_first_step_magnitude():
    s = ParameterStore()
    p = s.add("readout", ("x",), "p", (1,), init=2.0)
    p.grad = np.array([0.37])
    dc.Adam(s, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8).step()
    assert 2.0 - p.value[0] == pytest.approx(0.001, rel=1e-4)


def test_adam_state_round_trip():
    s = _store()
    opt = dc.Adam(s, lr=0.01)
    for n in s.nodes():
        n.grad = np.ones_like(n.value)
    opt.step()
    other = dc.Adam(_store(), lr=0.01)
    other.load_state_dict(opt.state_dict())
    assert other.t == 1
    for k in opt.m:
        np.testing.assert_array_equal(other.m[k], opt.m[k])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
def test_softmax_on_simplex(v):
    p = dc.softmax(v).value
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)))
def test_sigmoid_tanh_bounded(v):
    assert np.all((dc.sigmoid(v).value >= 0) & (dc.sigmoid(v).value <= 1))
    assert np.all(np.abs(dc.tanh(v).value) <= 1)
