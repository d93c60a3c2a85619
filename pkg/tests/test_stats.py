import numpy as np
import pytest
from hypothesis import given, strategies as st

from quenched_lsv.base import BasePoint, ParameterProcess, make_base
from quenched_lsv.grid import (C2Function, GridFunction, Tag, cell_averages, const_function, constant, cosine,
                               identity_function, make_grid)
from quenched_lsv.stats import (DegenerateObservableError, ObservableKit, ObservableProcess, birkhoff_clt,
                                build_special_observable, center_observable, correlation_sweep,
                                green_kubo_variance, mc_correlation, variance_continuity_experiment)
from quenched_lsv.transfer import Cocycle, fixed_density

DOUBLING = ParameterProcess("0", "0", 0.0, 0.0, boundary=True)


def test_center_observable_examples(grid512):
    h = constant(grid512).as_density()
    c = center_observable(const_function(2.5), h)
    assert np.abs(c(np.linspace(0, 1, 9))).max() < 1e-14
    x = center_observable(identity_function(), h)
    assert x(0.75) == pytest.approx(0.25, abs=1e-12)
    hg = fixed_density(0.25, make_grid(4096, 3))
    cc = center_observable(cosine(), hg)
    assert abs(cell_averages(cc, hg.grid) @ (hg.values * hg.grid.widths)) < 1e-10


def test_special_observable_examples(grid512):
    h = constant(grid512).as_density()
    u = identity_function()
    phi = build_special_observable(u, const_function(3.0), h)
    assert np.abs(phi(np.linspace(0, 1, 17))).max() < 1e-12
    phi = build_special_observable(u, identity_function(), h, K=1.0, gamma_obs=1.0)
    assert phi.c == pytest.approx(2 / 3, abs=1e-9)
    assert phi(0.5) == pytest.approx(0.5 * (0.5 - 2 / 3), abs=1e-9)
    zero_u = const_function(0.0)
    with pytest.raises(DegenerateObservableError):
        build_special_observable(zero_u, identity_function(), h)


def test_constant_observable_has_zero_variance(grid512, rotation, mild_params, op_cache):
    v = green_kubo_variance(rotation, mild_params, ObservableProcess.constant(const_function(1.7)), n_max=32,
                            omega_count=8, grid=grid512, cache=op_cache, depth=300)
    assert abs(v.sigma2) < 1e-12


def test_doubling_variance_is_one_half(rotation):
    g = make_grid(1024, 1)
    v = green_kubo_variance(rotation, DOUBLING, ObservableProcess.constant(cosine()), n_max=16, omega_count=8,
                            grid=g, depth=10)
    assert v.sigma2 == pytest.approx(0.5, abs=1e-3)
    assert np.abs(v.correlations).max() < 1e-4


def test_zero_observable_takes_unit_mass_branch(grid512, rotation, mild_params, op_cache):
    r = birkhoff_clt(rotation, mild_params, ObservableProcess.constant(const_function(0.0)), BasePoint(0.3),
                     n=50, trials=200, grid=grid512, cache=op_cache, depth=200, n_max=16, omega_count=8,
                     strict=False)
    assert r.degenerate and r.verdict == "pass(unit-mass)" and np.all(r.sums == 0)
    with pytest.raises(ValueError):
        birkhoff_clt(rotation, mild_params, ObservableProcess.constant(cosine()), BasePoint(0.3), n=50,
                     trials=200, grid=grid512)


def test_doubling_clt_small(rotation):
    g = make_grid(1024, 1)
    obs = ObservableProcess.constant(cosine())
    r = birkhoff_clt(rotation, DOUBLING, obs, BasePoint(0.1), n=1000, trials=2000, grid=g, depth=10,
                     n_max=16, omega_count=8)
    assert not r.degenerate and r.sigma2_hat == pytest.approx(0.5, abs=1e-3)
    assert r.passed


def test_continuity_flat_when_unperturbed(grid512, rotation, op_cache):
    pp = ParameterProcess("0.2+0.05*sin(2*pi*w)", "0", 0.1, 0.3, 0.05)
    rep = variance_continuity_experiment(rotation, pp, ObservableProcess.constant(cosine()), [-0.02, 0.02],
                                         n_max=32, omega_count=8, grid=grid512, cache=op_cache, depth=300)
    assert np.all(rep.deviation == 0)
    rep0 = variance_continuity_experiment(rotation, pp, ObservableProcess.constant(cosine()), [0.0],
                                          n_max=32, omega_count=8, grid=grid512, cache=op_cache, depth=300)
    assert len(rep0.eps) == 1 and rep0.max_deviation == 0.0


def test_correlation_matches_monte_carlo(grid1024, rotation, mild_params, op_cache):
    coc = Cocycle(rotation, mild_params, grid1024, 0.0, op_cache)
    obs = ObservableProcess.constant(cosine())
    term0, corr, dens = correlation_sweep(coc, BasePoint(0.6), obs, 4, [0], depth=800)
    est, se = mc_correlation(coc, BasePoint(0.6), obs, 2, 200_000, seed=2, density=dens)
    assert abs(est - corr[0, 1]) < 4 * se + 2e-3


def test_kit_centered_square_uses_product_averages(grid512):
    h = fixed_density(0.3, grid512)
    kit = ObservableKit(ObservableProcess.constant(cosine(3)), grid512)
    fib = kit.fiber(0.0, h.values)
    direct = cell_averages(lambda x: (np.cos(6 * np.pi * x) - fib.mean) ** 2, grid512) @ (h.values *
                                                                                        grid512.widths)
    assert kit.centered_square(fib, h.values) == pytest.approx(direct, rel=1e-9)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(1, 4))
def test_centring_annihilates_mean(a, b, k):
    g = make_grid(256, 3)
    h = fixed_density(0.2, g)
    F = C2Function(lambda x: a * np.cos(2 * np.pi * k * np.asarray(x)) + b * np.asarray(x), None, None)
    c = center_observable(F, h)
    assert abs(cell_averages(c, g) @ (h.values * g.widths)) < 1e-10 * (1 + abs(a) + abs(b))


@given(st.floats(0.05, 1.0), st.floats(-1, 1))
def test_special_observable_is_centred_and_vanishes_at_zero(e, shift):
    g = make_grid(256, 3)
    h = fixed_density(0.35, g)
    u = C2Function(lambda x, e=e: np.power(x, e), None, None)
    gg = C2Function(lambda x: np.cos(2 * np.pi * np.asarray(x)) + shift, None, None)
    phi = build_special_observable(u, gg, h)
    assert abs(cell_averages(phi, g) @ (h.values * g.widths)) < 1e-10
    assert phi(0.0) == 0.0
