import numpy as np
import pytest
from hypothesis import given, strategies as st

from quenched_lsv.base import BasePoint, ParameterProcess
from quenched_lsv.grid import (C2Function, GridFunction, Tag, const_function, constant, cosine, integrate,
                               l1_norm, make_grid, sample)
from quenched_lsv.response import (DerivativeCache, RegimeError, check_diff_regime, cone_decompose,
                                   fast_decay_check, operator_parameter_derivative,
                                   operator_parameter_second_derivative, response_density, response_validate,
                                   singular_test_function, variance_derivative)
from quenched_lsv.stats import ObservableProcess
from quenched_lsv.transfer import ConeParams, build_operator, fixed_density


def test_derivative_integrates_to_zero(grid1024):
    f = fixed_density(0.3, grid1024)
    for method in ("smooth", "ulam"):
        d = operator_parameter_derivative(0.3, f, method=method)
        assert abs(integrate(d)) < 1e-12
    # the pointwise cross-check does not telescope; only approximately massless
    assert abs(integrate(operator_parameter_derivative(0.3, f, method="chain"))) < 1e-4
    assert l1_norm(operator_parameter_derivative(0.3, constant(grid1024, 0.0))) == 0


def test_ulam_derivative_matches_operator_difference():
    g = make_grid(4096, 3)
    f = fixed_density(0.25, g)
    r = 1e-5
    fd = (build_operator(0.25 + r, g).apply_values(f.values) - build_operator(0.25, g).apply_values(f.values)) / r
    d = operator_parameter_derivative(0.25, f, method="ulam")
    assert np.abs(fd - d.values) @ g.widths < 1e-3


def test_smooth_and_chain_derivatives_agree():
    g = make_grid(4096, 3)
    f = fixed_density(0.25, g)
    a = operator_parameter_derivative(0.25, f, method="smooth")
    b = operator_parameter_derivative(0.25, f, method="chain")
    assert l1_norm(a - b) < 0.05 * l1_norm(b)


def test_derivative_bound_uniform_over_gamma(grid1024):
    ratios = []
    for gam in np.linspace(0.1, 0.4, 7):
        f = fixed_density(gam, grid1024)
        ratios.append(l1_norm(operator_parameter_derivative(gam, f)) / l1_norm(f))
    assert max(ratios) < 3 * min(ratios)


def test_second_derivative_richardson(grid1024):
    f = fixed_density(0.3, grid1024)
    a = l1_norm(operator_parameter_second_derivative(0.3, f, step=2e-3))
    b = l1_norm(operator_parameter_second_derivative(0.3, f, step=1e-3))
    assert np.isfinite(a) and abs(a - b) <= 0.1 * b
    assert l1_norm(operator_parameter_second_derivative(0.3, constant(grid1024, 0.0))) == 0


def test_decomposition_examples():
    g = make_grid(4096, 3)
    h = fixed_density(0.25, g)
    dec = cone_decompose(const_function(0.0), h, alpha=0.3)
    assert dec.lam == 0 and dec.A == 0 and np.allclose(dec.psi1.values, dec.psi2.values)
    x = C2Function(lambda t: np.asarray(t, dtype=float), lambda t: np.ones_like(t), lambda t: np.zeros_like(t))
    one = constant(g).as_density()
    dec = cone_decompose(x, one, alpha=0.3)
    assert np.allclose((dec.psi1 - dec.psi2).values, g.centers, atol=1e-12)
    dec = cone_decompose(cosine(), h, ConeParams(), alpha=0.3)
    assert dec.ok, [r.violations for r in dec.reports]


def test_hhat_vanishes_for_zero_delta(grid512, rotation, op_cache):
    pp = ParameterProcess("0.2+0.05*sin(2*pi*w)", "0", 0.1, 0.3, 0.05)
    s = response_density(rotation, pp, BasePoint(0.3), 32, grid512, op_cache, depth=200)
    assert np.all(s.hhat.values == 0)
    v = response_validate(rotation, pp, BasePoint(0.3), [1e-3, 3e-3, 1e-2, 3e-2], 16, grid512,
                          op_cache, depth=200)
    assert np.all(v.residuals == 0) and v.verdict == "pass"


def test_hhat_is_linear_in_delta_and_massless(grid512, rotation, op_cache):
    p1 = ParameterProcess("0.2+0.05*sin(2*pi*w)", "0.4", 0.1, 0.3, 0.05)
    p2 = ParameterProcess("0.2+0.05*sin(2*pi*w)", "0.8", 0.1, 0.3, 0.05)
    a = response_density(rotation, p1, BasePoint(0.3), 64, grid512, op_cache, depth=300)
    b = response_density(rotation, p2, BasePoint(0.3), 64, grid512, op_cache, depth=300)
    assert np.allclose(b.hhat.values, 2 * a.hhat.values, rtol=1e-12, atol=1e-14)
    assert abs(integrate(a.hhat)) < 1e-8


def test_truncation_consistency(grid512, rotation, op_cache):
    pp = ParameterProcess("0.15+0.03*sin(2*pi*w)", "1", 0.05, 0.25, 0.05)
    a = response_density(rotation, pp, BasePoint(0.7), 64, grid512, op_cache, depth=400)
    b = response_density(rotation, pp, BasePoint(0.7), 128, grid512, op_cache, depth=336)
    # both end at the same pullback depth, so they differ only by the extra summands
    assert l1_norm(a.hhat - b.hhat) <= a.tail_estimate + 1e-12


def test_regime_gate(mild_params):
    obs = ObservableProcess.constant(cosine())
    with pytest.raises(RegimeError):
        check_diff_regime(mild_params, obs)
    lo = ParameterProcess("0.12", "1", 0.1, 0.19, 0.02)
    check_diff_regime(lo, obs)
    u = C2Function(lambda x: np.power(x, 0.2), None, None)
    sp = ParameterProcess("0.18", "1", 0.1, 0.23, 0.02)
    check_diff_regime(sp, ObservableProcess.special(u, cosine(), 0.2))
    with pytest.raises(RegimeError):
        check_diff_regime(sp, obs)


def test_variance_derivative_trivial_cases(grid512, rotation, op_cache):
    flat = ParameterProcess("0.12+0.02*sin(2*pi*w)", "0", 0.08, 0.18, 0.02)
    r = variance_derivative(rotation, flat, ObservableProcess.constant(cosine()), 64, 64, None, 8, 0, grid512,
                            op_cache, 300)
    assert r.formula_value == 0 and r.fd_value == 0
    pp = ParameterProcess("0.12+0.02*sin(2*pi*w)", "1", 0.08, 0.18, 0.02)
    r = variance_derivative(rotation, pp, ObservableProcess.constant(const_function(2.0)), 64, 64, None, 8, 0,
                            grid512, op_cache, 300)
    assert abs(r.formula_value) < 1e-12


def test_derivative_terms_ignore_constant_shift(grid512, rotation, op_cache):
    pp = ParameterProcess("0.12+0.02*sin(2*pi*w)", "1", 0.08, 0.18, 0.02)
    a = variance_derivative(rotation, pp, ObservableProcess.constant(cosine()), 64, 64, None, 8, 0, grid512,
                            op_cache, 300, eps_fd=0.01)
    b = variance_derivative(rotation, pp, ObservableProcess.constant(cosine().shifted(5.0)), 64, 64, None, 8, 0,
                            grid512, op_cache, 300, eps_fd=0.01)
    assert np.allclose(a.term_values, b.term_values, rtol=1e-8, atol=1e-10)


def test_fast_decay_examples(grid1024, rotation, op_cache):
    pp = ParameterProcess("0.4", "0", 0.4, 0.4)
    zero = fast_decay_check(rotation, pp, constant(grid1024, 0.0), BasePoint(0.0), 64, 0.2, cache=op_cache)
    assert np.all(zero.norms == 0)
    psi = singular_test_function(grid1024, 0.4)
    assert abs(integrate(psi)) < 1e-10
    r = fast_decay_check(rotation, pp, psi, BasePoint(0.0), 64, 0.4, cache=op_cache)
    assert r.bound == pytest.approx(-1 / 0.4 + 1 + 0.2)


def test_fast_decay_against_dense_powers(rotation):
    g = make_grid(256, 3)
    pp = ParameterProcess("0.4", "0", 0.4, 0.4)
    psi = singular_test_function(g, 0.2)
    r = fast_decay_check(rotation, pp, psi, BasePoint(0.0), 200, 0.2, grid=g)
    P = build_operator(0.4, g).matrix().toarray()
    v = psi.values.copy()
    norms = []
    for _ in range(200):
        v = P @ v
        norms.append(np.abs(v) @ g.widths)
    assert np.allclose(r.norms, norms, rtol=1e-9, atol=1e-15)


@given(st.floats(0.05, 0.6), st.integers(0, 2 ** 31))
def test_derivative_is_linear(gam, seed):
    g = make_grid(256, 3)
    rng = np.random.default_rng(seed)
    a, b = GridFunction(g, rng.random(256)), GridFunction(g, rng.random(256))
    c = DerivativeCache(4)
    lhs = operator_parameter_derivative(gam, a + 2 * b, cache=c)
    rhs = operator_parameter_derivative(gam, a, cache=c) + 2 * operator_parameter_derivative(gam, b, cache=c)
    assert np.allclose(lhs.values, rhs.values, rtol=1e-10, atol=1e-10)
    assert abs(integrate(lhs)) < 1e-10
