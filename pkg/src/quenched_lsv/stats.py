"""Observables, fibrewise centring, quenched CLT experiments and Green-Kubo variance.

Every fibre observable F_omega is stored as a linear combination of fixed
basis functions whose coefficients may depend on the base state and on the
fibre density; this keeps per-step work to a few dot products when an orbit
of length 10^4 has to be centred fibre by fibre.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats

from .base import BasePoint, BaseSystem, ParameterProcess
from .grid import (C2Function, GradedGrid, GridFunction, Tag, cell_averages, inverse_cdf_sample,
                   maybe_grid, observable_norms)
from .transfer import (DEFAULT_DEPTH, Cocycle, DegenerateDensityError, EquivariantDensity,
                       OperatorCache, _density_from_cocycle, _map_fast, decay_envelope)

log = logging.getLogger(__name__)

KS_COEFF = 1.36
DEGENERATE_MASS = 1e-12


class DegenerateObservableError(ArithmeticError):
    """The weight u of a special observable has (numerically) zero mass."""


class Family(str, Enum):
    CONSTANT = "constant"
    SPECIAL = "special"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ObservableProcess:
    """A family omega -> F_omega of fibre observables.

    ``constant``: one C2 function for every fibre.  ``special``:
    F_omega = u (g - c_omega) with c_omega = int g u dmu_omega / int u dmu_omega,
    which vanishes like x^gamma_obs at 0 when u does.  ``custom``: an
    arbitrary map from base states to C2 functions with a declared uniform
    C2 bound.
    """

    family: Family
    F: Optional[C2Function] = None
    u: Optional[C2Function] = None
    g: Optional[C2Function] = None
    gamma_obs: float = 0.0
    K: float = 1.0
    custom: Optional[Callable[[object], C2Function]] = None
    uniform_c2_bound: float = float("nan")

    @classmethod
    def constant(cls, F: C2Function) -> "ObservableProcess":
        return cls(Family.CONSTANT, F=F, uniform_c2_bound=observable_norms(F, 1024).c2)

    @classmethod
    def special(cls, u: C2Function, g: C2Function, gamma_obs: float, K: float = 1.0) -> "ObservableProcess":
        if gamma_obs < 0:
            raise ValueError("gamma_obs must be >= 0")
        return cls(Family.SPECIAL, u=u, g=g, gamma_obs=float(gamma_obs), K=float(K),
                   uniform_c2_bound=_product_bound(u, g))

    @classmethod
    def from_callable(cls, fn: Callable[[object], C2Function], bound: float) -> "ObservableProcess":
        if not np.isfinite(bound):
            raise ValueError("custom observables need a finite uniform C2 bound")
        return cls(Family.CUSTOM, custom=fn, uniform_c2_bound=float(bound))

    @property
    def decay_gamma(self) -> Optional[float]:
        """Vanishing order used for the faster decay envelope (None for generic)."""
        return self.gamma_obs if self.family is Family.SPECIAL else None


def _product_bound(u: C2Function, g: C2Function) -> float:
    """Bound on ||u (g - c)|| with |c| <= ||g||_inf; sup norms if u is not C^2 up to 0."""
    try:
        nu, ng = observable_norms(u, 1024).c2, observable_norms(g, 1024).c2
    except (ValueError, TypeError, FloatingPointError):
        xs = np.linspace(0.0, 1.0, 4097)
        nu, ng = float(np.abs(u(xs)).max()), float(np.abs(g(xs)).max())
    return 2.0 * nu * ng


@dataclass(frozen=True)
class SpecialFunction(C2Function):
    """u (g - c) together with its centring constant c."""

    c: float = 0.0


# --------------------------------------------------------------------------
# per-grid evaluation kit


@dataclass
class Fiber:
    """F_omega on one fibre: coefficients over the kit basis plus its mean."""

    coeffs: np.ndarray
    cells: np.ndarray
    mean: float  # int F h dm
    basis: Sequence[C2Function]

    def __call__(self, x):
        out = self.coeffs[0] * self.basis[0](x)
        for a, b in zip(self.coeffs[1:], self.basis[1:]):
            out = out + a * b(x)
        return out


class ObservableKit:
    """Cell averages of the basis (and of basis products) on one grid."""

    def __init__(self, obs: ObservableProcess, grid: GradedGrid):
        self.obs = obs
        self.grid = grid
        self.w = grid.widths
        if obs.family is Family.CONSTANT:
            self.basis = [obs.F]
        elif obs.family is Family.SPECIAL:
            u, g = obs.u, obs.g
            self.basis = [C2Function(lambda x: u(x) * g(x), None, None, "u*g"), u]
        else:
            self.basis = None
        if self.basis is not None:
            self._set_basis(self.basis)

    def _set_basis(self, basis):
        self.cells = np.array([cell_averages(b, self.grid) for b in basis])
        m = len(basis)
        self.gram = np.empty((m, m, self.grid.N))
        for i in range(m):
            for j in range(i, m):
                c = cell_averages(lambda x, i=i, j=j: basis[i](x) * basis[j](x), self.grid)
                self.gram[i, j] = self.gram[j, i] = c

    def fiber(self, state, hv: np.ndarray) -> Fiber:
        """F for the fibre with base state ``state`` and density cell values ``hv``."""
        obs = self.obs
        hw = hv * self.w
        if obs.family is Family.CUSTOM:
            F = obs.custom(state)
            basis = [F]
            cells = cell_averages(F, self.grid)
            return Fiber(np.ones(1), cells, float(cells @ hw), basis)
        if obs.family is Family.CONSTANT:
            coeffs = np.ones(1)
        else:
            mu = float(self.cells[1] @ hw)
            if mu < DEGENERATE_MASS:
                raise DegenerateObservableError(f"int u dmu = {mu:.3e} below {DEGENERATE_MASS}")
            coeffs = np.array([1.0, -float(self.cells[0] @ hw) / mu])
        cells = coeffs @ self.cells
        return Fiber(coeffs, cells, float(cells @ hw), self.basis)

    def centered_square(self, fib: Fiber, hv: np.ndarray) -> float:
        """int (F - int F h)^2 h dm, using cell averages of products (not products of averages)."""
        hw = hv * self.w
        if self.obs.family is Family.CUSTOM:
            F, c = fib.basis[0], fib.mean
            return float(cell_averages(lambda x: (F(x) - c) ** 2, self.grid) @ hw)
        sq = np.einsum("i,j,ijk->k", fib.coeffs, fib.coeffs, self.gram)
        return float(sq @ hw) - fib.mean ** 2


# --------------------------------------------------------------------------
# centring


def center_observable(F: C2Function, h: GridFunction) -> C2Function:
    """F - int F h dm as a C2 function handle."""
    m = float(cell_averages(F, h.grid) @ (h.values * h.grid.widths))
    out = F.shifted(-m)
    return C2Function(out.f, out.df, out.d2f, f"{F.name} - {m:.6g}")


def build_special_observable(u: C2Function, g: C2Function, h: GridFunction,
                             K: Optional[float] = None, gamma_obs: Optional[float] = None) -> C2Function:
    """phi = u (g - c) with c = int g u h / int u h, so that int phi h = 0.

    With ``K`` and ``gamma_obs`` given, the bound |phi(x)| <= 2 K ||g||_inf x^gamma_obs
    is checked on samples.
    """
    hw = h.values * h.grid.widths
    mu = float(cell_averages(u, h.grid) @ hw)
    if mu < DEGENERATE_MASS:
        raise DegenerateObservableError(f"int u dmu = {mu:.3e} below {DEGENERATE_MASS}")
    c = float(cell_averages(lambda x: u(x) * g(x), h.grid) @ hw) / mu

    def f(x):
        return u(x) * (g(x) - c)

    df = d2f = None
    if u.df is not None and g.df is not None:
        def df(x):
            return u.df(x) * (g(x) - c) + u(x) * g.df(x)
        if u.d2f is not None and g.d2f is not None:
            def d2f(x):
                return u.d2f(x) * (g(x) - c) + 2 * u.df(x) * g.df(x) + u(x) * g.d2f(x)
    phi = SpecialFunction(f, df, d2f, f"u*(g - {c:.6g})", c)
    if K is not None and gamma_obs is not None:
        xs = np.linspace(0.0, 1.0, 4097)[1:]
        gsup = float(np.max(np.abs(g(np.linspace(0.0, 1.0, 4097)))))
        excess = np.abs(f(xs)) - 2.0 * K * gsup * xs ** gamma_obs
        if excess.max() > 1e-12:
            raise ValueError(f"|phi| exceeds 2K||g|| x^gamma by {excess.max():.3e}")
    return phi


# --------------------------------------------------------------------------
# Green-Kubo variance


@dataclass
class VarianceEstimate:
    eps: float
    sigma2: float
    term0: float
    n_max: int
    tail_bound: float
    mc_stderr: float
    per_omega: np.ndarray = field(repr=False, default=None)
    correlations: np.ndarray = field(repr=False, default=None)  # mean C_n, n = 1..n_max
    decay_constant: float = 0.0
    decay_exponent: float = float("nan")
    density_residual: float = 0.0
    omegas: list = field(repr=False, default=None)

    @property
    def budget(self) -> float:
        return self.tail_bound + self.mc_stderr

    def row(self):
        return (self.eps, self.sigma2, self.tail_bound, self.mc_stderr)


def _orbit_starts(count: int, spacing: int) -> np.ndarray:
    return np.arange(count) * spacing


def correlation_sweep(coc: Cocycle, omega0: BasePoint, obs: ObservableProcess, n_max: int,
                      starts: Sequence[int], depth: int = DEFAULT_DEPTH, density=None):
    """C_0 and C_n (n = 1..n_max) for the fibres sigma^s omega0, s in ``starts``.

    One pullback at omega0 gives h; pushing it forward yields every later
    fibre density exactly (for the discretised cocycle), and each started
    column L^n(f h) rides along in the same sparse products.
    """
    dens = density or _density_from_cocycle(coc, omega0, depth, tol=np.inf)
    kit = ObservableKit(obs, coc.grid)
    starts = np.asarray(sorted(set(int(s) for s in starts)))
    last = int(starts[-1]) + n_max
    gam = coc.gammas(omega0, last)
    states = coc.base.states(omega0, np.arange(last + 1))
    w = coc.grid.widths
    startset = {int(s): i for i, s in enumerate(starts)}
    term0 = np.zeros(len(starts))
    corr = np.zeros((len(starts), n_max))
    V = dens.h.values[:, None].copy()
    active: list = []  # (row index, start step)
    for k in range(last + 1):
        hv = V[:, 0]
        if active or k in startset:
            fib = kit.fiber(states[k], hv)
        for col, (i, s) in enumerate(active, start=1):
            corr[i, k - s - 1] = fib.cells @ (V[:, col] * w)
        keep = [j for j, (i, s) in enumerate(active, start=1) if k - s < n_max]
        V = V[:, [0] + keep]
        active = [active[j - 1] for j in keep]
        if k in startset:
            i = startset[k]
            term0[i] = kit.centered_square(fib, hv)
            V = np.column_stack([V, (fib.cells - fib.mean) * hv])
            active.append((i, k))
        if k < last:
            V = coc.operator(gam[k]).apply_values(V)
    return term0, corr, dens


def _tail(corr_abs_mean: np.ndarray, n_max: int, exponent: float):
    """Fitted constant C with |C_n| <= C n^exponent on n in [n_max/4, n_max], and 2 C sum_{n>n_max} n^exponent."""
    n = np.arange(1, n_max + 1)
    if not np.isfinite(exponent):
        return 0.0, 0.0
    sel = n >= max(1, n_max // 4)
    C = float(np.max(corr_abs_mean[sel] * n[sel] ** (-exponent)))
    if C == 0.0:
        return 0.0, 0.0
    s = -exponent
    if s <= 1.0:
        return C, float("inf")
    return C, float(2.0 * C * special.zeta(s, n_max + 1))


def green_kubo_variance(base: BaseSystem, params: ParameterProcess, observable: ObservableProcess,
                        eps: float = 0.0, n_max: int = 512, omega_count: int = 16, seed: int = 0,
                        grid: Optional[GradedGrid] = None, cache: Optional[OperatorCache] = None,
                        depth: int = DEFAULT_DEPTH, sampling: str = "orbit", spacing: Optional[int] = None,
                        omegas: Optional[Sequence[BasePoint]] = None, min_count: int = 8) -> VarianceEstimate:
    """Sigma^2_eps = int [C_0 + 2 sum_{n>=1} C_n] dP with C_n = int F_{sigma^n omega} L^n(f_omega h_omega) dm.

    ``sampling="orbit"`` (default) takes the fibres sigma^{j s} omega0 with
    s = ``spacing`` (default n_max // 4) along one pulled-back orbit;
    ``"independent"`` pulls back separately at each of ``omegas`` (or at
    draws from ``sample_omegas``).  The same seed gives the same fibres for
    every eps, so finite differences in eps are paired.
    """
    if n_max < 16:
        raise ValueError("n_max must be >= 16")
    if omega_count < min_count:
        raise ValueError(f"omega_count must be >= {min_count}")
    grid = maybe_grid(grid)
    coc = Cocycle(base, params, grid, eps, cache)
    if sampling == "orbit":
        omega0 = omegas[0] if omegas else base.sample_omegas(1, seed)[0]
        s = spacing or max(1, n_max // 4)
        starts = _orbit_starts(omega_count, s)
        term0, corr, dens = correlation_sweep(coc, omega0, observable, n_max, starts, depth)
        residual = dens.residual
        pts = [base.advance(omega0, int(k)) for k in starts]
    elif sampling == "independent":
        pts = list(omegas) if omegas else base.sample_omegas(omega_count, seed, mode="stratified"
                                                               if hasattr(base, "angle") else "random")
        rows = [correlation_sweep(coc, om, observable, n_max, [0], depth) for om in pts]
        term0 = np.concatenate([r[0] for r in rows])
        corr = np.vstack([r[1] for r in rows])
        residual = max(r[2].residual for r in rows)
    else:
        raise ValueError("sampling must be 'orbit' or 'independent'")
    per = term0 + 2.0 * corr.sum(axis=1)
    m = len(per)
    stderr = float(np.std(per, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    expo = decay_envelope(params.alpha, observable.decay_gamma)
    C, tail = _tail(np.abs(corr).mean(axis=0), n_max, expo)
    return VarianceEstimate(float(eps), float(per.mean()), float(term0.mean()), n_max, tail, stderr,
                            per, corr.mean(axis=0), C, expo, residual, pts)


# --------------------------------------------------------------------------
# quenched CLT


@dataclass
class CltReport:
    n: int
    trials: int
    sigma2_hat: float
    ks_stat: float
    ks_critical: float
    passed: bool
    degenerate: bool = False
    mean: float = 0.0
    std: float = 0.0
    omega: Optional[BasePoint] = None
    sums: np.ndarray = field(repr=False, default=None)

    @property
    def verdict(self) -> str:
        if self.degenerate:
            return "pass(unit-mass)" if self.passed else "fail(unit-mass)"
        return "pass" if self.passed else "fail"

    def rows(self):
        return list(enumerate(self.sums.tolist()))


MANTISSA = 53


def birkhoff_sums(coc: Cocycle, omega: BasePoint, observable: ObservableProcess, n: int, x0: np.ndarray,
                  h0: GridFunction, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """sum_{i<n} (F_{sigma^i omega}(T^i x0) - int F_{sigma^i omega} dmu_{sigma^i omega}), unnormalised.

    The centring constants use h_{sigma^i omega} obtained by pushing h0 forward.
    When every fibre is the doubling map, floating-point doubling would run
    out of mantissa after 53 steps; the orbit is then kept as a 53-bit
    integer whose vacated low bit is refilled from ``rng`` each step, which
    is exact in law for Lebesgue-distributed starting points.
    """
    kit = ObservableKit(observable, coc.grid)
    gam = coc.gammas(omega, n)
    states = coc.base.states(omega, np.arange(n))
    hv = h0.values.copy()
    x = np.array(x0, dtype=float)
    doubling = bool(n and np.all(gam == 0.0))
    if doubling:
        rng = rng or np.random.default_rng(0)
        scale = float(2 ** MANTISSA)
        k = np.minimum((x * scale).astype(np.uint64), np.uint64(2 ** MANTISSA - 1))
        mask = np.uint64(2 ** MANTISSA - 1)
    S = np.zeros_like(x)
    for i in range(n):
        fib = kit.fiber(states[i], hv)
        S += fib(x) - fib.mean
        if i + 1 < n:
            op = coc.operator(gam[i])
            hv = op.apply_values(hv)
            if doubling:
                k = ((k << np.uint64(1)) & mask) | rng.integers(0, 2, size=k.shape, dtype=np.uint64)
                x = k / scale
            else:
                x = _map_fast(gam[i], x)
    return S


def birkhoff_clt(base: BaseSystem, params: ParameterProcess, observable: ObservableProcess, omega: BasePoint,
                 n: int, trials: int, eps: float = 0.0, seed: int = 0, grid: Optional[GradedGrid] = None,
                 cache: Optional[OperatorCache] = None, depth: int = DEFAULT_DEPTH,
                 variance: Optional[VarianceEstimate] = None, n_max: int = 512, omega_count: int = 16,
                 strict: bool = True) -> CltReport:
    """KS test of normalised fibre-centred Birkhoff sums against N(0, Sigma^2).

    Initial points are drawn from mu_{omega,eps}.  When Sigma^2 is not
    distinguishable from 0 (below 3 x (tail + MC error)) the sums are
    compared with the unit mass at 0 instead.
    """
    if strict and (n < 1000 or trials < 1000):
        raise ValueError("n and trials must be >= 1000 (strict=False to override)")
    grid = maybe_grid(grid)
    if variance is None:
        variance = green_kubo_variance(base, params, observable, eps, n_max, omega_count, seed, grid, cache,
                                       depth)
    coc = Cocycle(base, params, grid, eps, cache)
    dens = _density_from_cocycle(coc, omega, depth, tol=np.inf)
    rng = np.random.default_rng(seed)
    x0 = inverse_cdf_sample(dens.h, rng.random(trials))
    sums = birkhoff_sums(coc, omega, observable, n, x0, dens.h, rng) / np.sqrt(n)
    crit = KS_COEFF / np.sqrt(trials)
    s2 = variance.sigma2
    degenerate = s2 <= 3.0 * (variance.tail_bound + variance.mc_stderr)
    if degenerate:
        ks = float(max(np.mean(sums < 0), np.mean(sums > 0)))
    else:
        ks = float(stats.kstest(sums, "norm", args=(0.0, np.sqrt(s2))).statistic)
    return CltReport(n, trials, s2, ks, crit, ks <= crit, degenerate, float(sums.mean()), float(sums.std()),
                     omega, sums)


# --------------------------------------------------------------------------
# continuity in eps


@dataclass
class ContinuityReport:
    eps: np.ndarray
    estimates: list
    deviation: np.ndarray  # Sigma^2_eps - Sigma^2_0 (paired over fibres)
    deviation_stderr: np.ndarray
    magnitudes: np.ndarray
    magnitude_deviation: np.ndarray  # max over +-m of |deviation|
    magnitude_budget: np.ndarray
    monotone: bool
    modulus_slope: float
    max_deviation: float
    strictly_decreasing: bool = False
    modulus_exponent: float = float("nan")
    modulus_constant: float = 0.0
    within_modulus: bool = True

    def rows(self):
        return [e.row() for e in self.estimates]


def variance_continuity_experiment(base: BaseSystem, params: ParameterProcess, observable: ObservableProcess,
                                   eps_grid: Sequence[float], n_max: int = 512, omega_count: int = 16,
                                   seed: int = 0, grid: Optional[GradedGrid] = None,
                                   cache: Optional[OperatorCache] = None, depth: int = DEFAULT_DEPTH,
                                   **kw) -> ContinuityReport:
    """Sigma^2_eps over a symmetric grid, with paired (common-fibre) differences from eps = 0."""
    eps = np.array(sorted(set(float(e) for e in eps_grid) | {0.0}))
    if np.any(np.abs(eps) > params.eps0 + 1e-15):
        raise ValueError("eps grid leaves (-eps0, eps0)")
    ests = [green_kubo_variance(base, params, observable, e, n_max, omega_count, seed, grid, cache, depth, **kw)
            for e in eps]
    ref = ests[int(np.flatnonzero(eps == 0.0)[0])]
    dev, dse = [], []
    for e in ests:
        d = e.per_omega - ref.per_omega
        dev.append(float(d.mean()))
        dse.append(float(np.std(d, ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0)
    dev, dse = np.array(dev), np.array(dse)
    mags = np.array(sorted(set(np.abs(eps[eps != 0]))))
    mdev, mbud = [], []
    for m in mags:
        sel = np.isclose(np.abs(eps), m)
        k = np.flatnonzero(sel)[np.argmax(np.abs(dev[sel]))]
        mdev.append(abs(dev[k]))
        mbud.append(dse[k] + ests[k].tail_bound + ref.tail_bound)
    mdev, mbud = np.array(mdev), np.array(mbud)
    # non-increasing as |eps| shrinks, allowing two standard errors of slack
    monotone = bool(all(mdev[i] <= mdev[i + 1] + 2.0 * np.hypot(mbud[i], mbud[i + 1])
                        for i in range(len(mags) - 1)))
    if len(mags) >= 2 and np.all(mdev > 0):
        slope = float(np.polyfit(np.log(mags), np.log(mdev), 1)[0])
    else:
        slope = 0.0 if len(mags) else float("nan")
    # strict version: only the paired sampling error as slack
    mse = np.array([dse[np.flatnonzero(np.isclose(np.abs(eps), m))].max() for m in mags]) if len(mags) else mags
    strict = bool(all(mdev[i] < mdev[i + 1] + 2.0 * np.hypot(mse[i], mse[i + 1]) for i in range(len(mags) - 1)))
    # |dev(m)| <= 2 budget(m) + C m^q with q = min(1, 1 - 2 alpha), C calibrated at the largest |eps|
    q = min(1.0, 1.0 - 2.0 * params.alpha)
    if len(mags) and q > 0:
        C = float(mdev[-1] / mags[-1] ** q)
        within = bool(np.all(mdev <= 2.0 * mbud + C * mags ** q + 1e-15))
    else:
        C, within = 0.0, True
    return ContinuityReport(eps, ests, dev, dse, mags, mdev, mbud, monotone, slope,
                            float(mdev.max()) if len(mdev) else 0.0, strict, q, C, within)


# --------------------------------------------------------------------------
# direct Monte Carlo (duality cross-check)


def mc_correlation(coc: Cocycle, omega: BasePoint, observable: ObservableProcess, n: int, samples: int,
                   seed: int = 0, density: Optional[EquivariantDensity] = None, depth: int = DEFAULT_DEPTH):
    """Monte Carlo estimate of int f_omega (f_{sigma^n omega} o T^n_omega) dmu_omega and its standard error."""
    dens = density or _density_from_cocycle(coc, omega, depth, tol=np.inf)
    kit = ObservableKit(observable, coc.grid)
    states = coc.base.states(omega, np.arange(n + 1))
    gam = coc.gammas(omega, n)
    hv = dens.h.values
    f0 = kit.fiber(states[0], hv)
    hn = coc.push(omega, n, hv.copy())
    fn = kit.fiber(states[n], hn)
    rng = np.random.default_rng(seed)
    x = inverse_cdf_sample(dens.h, rng.random(samples))
    a = f0(x) - f0.mean
    for g in gam:
        x = _map_fast(g, x)
    prod = a * (fn(x) - fn.mean)
    return float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(samples))
