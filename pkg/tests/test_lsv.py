import numpy as np
import pytest
from hypothesis import given, strategies as st

from quenched_lsv import lsv

gammas = st.floats(0.01, 0.95)
units = st.floats(0.0, 1.0)


def test_map_examples():
    assert lsv.map_apply(0.7, 0.0) == 0.0
    assert lsv.map_apply(0.5, 0.25) == pytest.approx(0.4267766953, abs=1e-10)
    assert lsv.left_branch_limit(0.37) == pytest.approx(1.0, abs=1e-15)
    assert lsv.map_apply(0.3, 0.75) == 0.5


def test_derivative_examples():
    assert lsv.map_derivative(0.3, 1e-300) == pytest.approx(1.0)
    assert lsv.map_derivative(0.1, 0.8) == 2.0
    assert lsv.map_derivative(0.5, 0.25) == pytest.approx(2.0606601718, abs=1e-10)
    with pytest.raises(lsv.SingularityError):
        lsv.map_derivative(0.5, 0.0, order=2)


def test_inverse_examples():
    assert lsv.left_inverse(0.4, 0.0) == 0.0
    assert lsv.left_inverse(0.4, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert lsv.left_inverse(0.5, 0.4267766953) == pytest.approx(0.25, abs=1e-10)
    gp, _ = lsv.inverse_branch_derivatives(0.5, 0.4267766953)
    assert gp == pytest.approx(0.4852813742, abs=1e-9)
    gp, _ = lsv.inverse_branch_derivatives(0.0, 0.3, order=1)
    assert gp == 0.5
    gp, _ = lsv.inverse_branch_derivatives(0.6, 1.0)
    assert gp == pytest.approx(1.0 / lsv.map_derivative(0.6, 0.5 - 1e-15), rel=1e-9)
    with pytest.raises(lsv.SingularityError):
        lsv.inverse_branch_derivatives(0.4, 0.0, order=2)


def test_velocity_examples():
    assert lsv.parameter_velocity(0.6, 0.5) == 0.0
    assert abs(lsv.parameter_velocity(0.6, 1e-12)) < 1e-15
    # sqrt(2) * 0.25^1.5 * log(0.5)
    assert lsv.parameter_velocity(0.5, 0.25) == pytest.approx(np.sqrt(2) * 0.125 * np.log(0.5), abs=1e-12)
    assert lsv.conjugated_velocity(0.3, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert lsv.conjugated_velocity(0.3, 0.0) == 0.0


def test_strict_parameter_rejects_boundary():
    with pytest.raises(ValueError):
        lsv.MapParameter(0.0)
    assert float(lsv.MapParameter(0.0, boundary=True)) == 0.0
    with pytest.raises(ValueError):
        lsv.map_apply(1.0, 0.2)
    with pytest.raises(ValueError):
        lsv.map_apply(0.3, 1.2)


@given(gammas, units)
def test_inverse_round_trip(g, y):
    x = lsv.left_inverse(g, y)
    assert 0.0 <= x <= 0.5
    # left-branch formula: x = 1/2 belongs to the right branch of map_apply
    assert abs(x + 2.0 ** g * x ** (1.0 + g) - y) <= 2e-14


@given(gammas, st.floats(1e-6, 0.4999))
def test_left_branch_expands(g, x):
    assert lsv.map_derivative(g, x) >= 1.0
    assert lsv.map_apply(g, x) >= x


@given(gammas, st.floats(1e-4, 0.49))
def test_velocity_matches_gamma_difference(g, x):
    h = 1e-6
    if g + h >= 1:
        return
    fd = (lsv.map_apply(g + h, x) - lsv.map_apply(g - h, x)) / (2 * h)
    assert lsv.parameter_velocity(g, x) == pytest.approx(fd, rel=1e-5, abs=1e-10)
    assert lsv.parameter_velocity(g, x) <= 0.0


@given(gammas, st.floats(1e-3, 0.999))
def test_conjugated_velocity_derivative(g, y):
    h = 1e-6 * min(y, 1 - y)
    fd = (lsv.conjugated_velocity(g, y + h) - lsv.conjugated_velocity(g, y - h)) / (2 * h)
    assert lsv.conjugated_velocity_derivative(g, y) == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_vectorised_matches_scalar():
    ys = np.linspace(0, 1, 33)
    v = lsv.left_inverse(0.35, ys)
    assert np.allclose(v, [lsv.left_inverse(0.35, y) for y in ys], atol=0, rtol=0)
