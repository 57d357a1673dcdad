import numpy as np
import pytest

from hyperlearn import diffcore as dc
from hyperlearn import gradcheck


def _wrong_double(x):
    x = dc.as_node(x)
    # forward says 2x, backward claims 3
    return dc._make(2.0 * x.value, "wrong", (x,), lambda g: x._accumulate(3.0 * g))


def test_detects_wrong_backward():
    r = gradcheck.check_function("wrong", _wrong_double, [np.ones(3)], np.random.default_rng(0))
    assert not r["pass"] and r["max_abs_err"] > 0.5


def test_covers_every_op():
    names = {name for name, _, _ in gradcheck.op_cases(np.random.default_rng(0))}
    for op in ("add", "sub", "hadamard", "scale", "affine_vector", "matmul_vector", "concat", "take_rows",
               "tanh", "sigmoid", "softplus", "softmax", "sum", "squared_error", "cross_entropy"):
        assert any(n.startswith(op) for n in names), op


@pytest.mark.parametrize("mode", ["markovian", "full_history"])
def test_end_to_end_reaches_every_family(mode):
    r = gradcheck.check_end_to_end(mode, seed=3)
    assert r["pass"], r
    assert set(r["family_grad_max"]) == {"readout", "intrinsic", "extrinsic", "space"}


def test_report_shape():
    rep = gradcheck.run(seed=1)
    assert rep["pass"] and rep["dtype"] == "float64"
    assert rep["rtol"] == 1e-4 and rep["atol"] == 1e-6
    assert sum(c["name"].startswith("end_to_end") for c in rep["checks"]) == 2
