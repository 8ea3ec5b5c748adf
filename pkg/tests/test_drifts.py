import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallnoise.drifts import (
    CATALOG,
    Cubic1D,
    DoubleWell1D,
    Linear,
    Lorenz63,
    check_jacobian,
    eval_drift,
    eval_jacobian,
    fd_jacobian,
    make_drift,
)
from smallnoise.errors import NumericalError, UsageError

from conftest import all_catalog

finite = st.floats(-3.0, 3.0, allow_nan=False)


def test_double_well_values():
    m = DoubleWell1D()
    assert eval_drift(m, [0.5])[0] == 0.375
    assert eval_drift(m, [1.0])[0] == 0.0
    assert eval_jacobian(m, [1.0])[0, 0] == -2.0


def test_cubic_values():
    m = Cubic1D()
    assert eval_drift(m, [2.0])[0] == -8.0
    assert eval_jacobian(m, [2.0])[0, 0] == -12.0


def test_linear_jacobian_is_constant():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    m = Linear(A, [1.0, -1.0])
    np.testing.assert_array_equal(eval_drift(m, [1.0, 1.0]), [4.0, 6.0])
    for u in ([0.0, 0.0], [5.0, -7.0]):
        np.testing.assert_array_equal(eval_jacobian(m, u), A)


def test_lorenz_fixed_point():
    m = Lorenz63()
    c = np.sqrt(m.beta * (m.rho - 1.0))
    np.testing.assert_allclose(eval_drift(m, [c, c, m.rho - 1.0]), 0.0, atol=1e-12)
    np.testing.assert_array_equal(eval_drift(m, [0.0, 0.0, 0.0]), 0.0)


def test_batched_shapes():
    for m in all_catalog():
        u = np.random.default_rng(0).normal(size=(4, 3, m.dim))
        assert m.f(u).shape == (4, 3, m.dim)
        assert m.jac(u).shape == (4, 3, m.dim, m.dim)
        np.testing.assert_array_equal(m.jac(u)[1, 2], m.jac(u[1, 2]))


@pytest.mark.parametrize("model", all_catalog(), ids=lambda m: m.name)
def test_jacobian_matches_finite_differences(model):
    pts = np.random.default_rng(1).uniform(-2, 2, size=(20, model.dim))
    report = check_jacobian(model, pts)
    assert report.passed, report.worst


@given(finite)
@settings(max_examples=50, deadline=None)
def test_double_well_fd_property(x):
    m = DoubleWell1D()
    J, Jfd = eval_jacobian(m, [x]), fd_jacobian(m, [x])
    assert abs(J - Jfd).max() <= 1e-5 * (1 + abs(J).max())


def test_broken_jacobian_is_flagged():
    class Wrong(DoubleWell1D):
        def jac(self, u):
            return 2.0 * super().jac(u)

    assert not check_jacobian(Wrong(), [[0.3]]).passed


def test_bad_inputs():
    m = DoubleWell1D()
    with pytest.raises(UsageError):
        eval_drift(m, [1.0, 2.0])
    with pytest.raises(UsageError):
        eval_drift(m, [np.nan])
    with pytest.raises(UsageError):
        Linear([[1.0, 2.0]])
    with pytest.raises(UsageError):
        make_drift("nope")
    with pytest.raises(UsageError):
        make_drift("cubic", a=1)


def test_overflow_is_numerical_error():
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError):
            eval_drift(Cubic1D(), [1e200])


def test_catalog_names():
    assert set(CATALOG) == {"linear", "double-well", "cubic", "lorenz63"}
    assert make_drift("lorenz63", rho=10.0).rho == 10.0
