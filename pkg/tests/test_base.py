import numpy as np
import pytest
from hypothesis import given, strategies as st

from quenched_lsv.base import (GOLDEN, BasePoint, ConfigError, Expr, ParameterProcess, advance, make_base,
                               parameter_at, sample_omegas)


def test_rotation_advance():
    rot = make_base("rotation")
    om = BasePoint(0.1)
    assert advance(rot, om, 0) == om
    assert advance(rot, advance(rot, om, 7), -7) == om
    assert rot.state(advance(rot, om, 3)) == pytest.approx((0.1 + 3 * GOLDEN) % 1.0, abs=1e-15)


def test_rational_angle_rejected():
    with pytest.raises(ConfigError):
        make_base("rotation", angle=0.25)


def test_parameter_examples():
    rot = make_base("rotation")
    pp = ParameterProcess("0.15+0.05*sin(2*pi*w)", "1", 0.05, 0.25, 0.05)
    pp.validate(rot)
    assert parameter_at(pp, rot, BasePoint(0.25), 0.01) == pytest.approx(0.21, abs=1e-14)
    assert parameter_at(pp, rot, BasePoint(0.3), 0.0) == pytest.approx(0.15 + 0.05 * np.sin(0.6 * np.pi))
    flat = ParameterProcess("0.15+0.05*sin(2*pi*w)", "0", 0.05, 0.25, 0.05)
    assert flat.unperturbed
    assert parameter_at(flat, rot, BasePoint(0.3), 0.04) == parameter_at(flat, rot, BasePoint(0.3), 0.0)


def test_range_violations_fail_fast():
    rot = make_base("rotation")
    with pytest.raises(ConfigError):
        ParameterProcess("0.3+0.1*sin(2*pi*w)", "1", 0.1, 0.35, 0.0).validate(rot)
    with pytest.raises(ConfigError):
        ParameterProcess("0.2", "2", 0.1, 0.35, 0.01).validate(rot)
    with pytest.raises(ConfigError):
        ParameterProcess("0.2", "1", 0.0, 0.3)
    with pytest.raises(ConfigError):
        ParameterProcess("0.2", "1", 0.1, 0.3, 0.01).value(0.5, 0.02)


def test_expression_sandbox():
    with pytest.raises(ConfigError):
        Expr("__import__('os')")
    assert Expr("cos(pi*w)")(0.0) == 1.0


def test_rotation_sampling_uniform():
    rot = make_base("rotation")
    K = 4000
    w = np.array([o.origin for o in sample_omegas(rot, K, 3)])
    assert abs(w.mean() - 0.5) < 3 / np.sqrt(K)
    assert sample_omegas(rot, 1, 9) == sample_omegas(rot, 1, 9)


def test_markov_stationary_frequencies():
    P = [[0.5, 0.5, 0.0], [0.25, 0.5, 0.25], [0.0, 0.5, 0.5]]
    mk = make_base("markov", kernel=P, seed=1)
    om = mk.sample_omegas(1, 0)[0]
    s = mk.states(om, np.arange(-20000, 20000))
    freq = np.bincount(s, minlength=3) / len(s)
    pi = np.array([0.25, 0.5, 0.25])
    assert np.all(np.abs(freq - pi) < 0.03)


def test_iid_window_extends():
    iid = make_base("iid", law=[0.3, 0.7], seed=4)
    om = iid.sample_omegas(1, 0)[0]
    far = iid.states(om, [10 ** 7, -10 ** 7])
    assert set(far.tolist()) <= {0, 1}
    assert np.array_equal(iid.states(om, np.arange(-5, 5)), iid.states(om, np.arange(-5, 5)))


@given(st.integers(-10 ** 6, 10 ** 6), st.integers(-10 ** 6, 10 ** 6))
def test_advance_is_a_group_action(a, b):
    rot = make_base("rotation")
    om = BasePoint(0.37)
    assert rot.state(advance(rot, advance(rot, om, a), b)) == pytest.approx(rot.state(advance(rot, om, a + b)),
                                                                            abs=1e-9)


@given(st.floats(-0.05, 0.05), st.floats(0.0, 1.0))
def test_parameter_in_range(eps, w):
    pp = ParameterProcess("0.2+0.05*sin(2*pi*w)", "1", 0.1, 0.3, 0.05)
    g = pp.value(w, eps)
    assert 0.1 <= g <= 0.3
