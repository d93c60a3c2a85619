"""Ulam discretisation of LSV transfer operators and their cocycles.

The kernel entry for source cell i and target cell j is the exact
preimage-measure fraction m(c_i & T^-1 c_j) / m(c_i).  It is assembled
from the sorted union of grid nodes and the preimages of all nodes under
both inverse branches: every segment of that union lies in exactly one
source cell and maps into exactly one target cell.
"""
from __future__ import annotations

import logging
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

from . import lsv
from .base import BasePoint, BaseSystem, ParameterProcess
from .grid import (C2Function, GradedGrid, GridFunction, GridMismatchError, Tag,
                   cell_averages, cumulative, differentiate, integrate, inner,
                   inverse_cdf_sample, l1_distance, l1_norm, lebesgue,
                   second_difference)

log = logging.getLogger(__name__)

TOP_MAGIC = b"TOP1"
DEFAULT_DEPTH = 2000
DEFAULT_RESIDUAL_TARGET = 1e-4
DEFAULT_RHO = 1e-3
RESIDUAL_FLOOR = 1e-12


class DegenerateDensityError(ArithmeticError):
    """A density dropped below the configured lower bound rho."""


def gamma_key(gamma: float) -> float:
    return float(f"{float(gamma):.12g}")


@dataclass(frozen=True, eq=False)
class TransferOperatorDisc:
    """Sparse Ulam kernel stored as triplets (source, target, overlap length)."""

    gamma: float
    grid: GradedGrid
    src: np.ndarray = field(repr=False)
    tgt: np.ndarray = field(repr=False)
    length: np.ndarray = field(repr=False)

    @property
    def nnz(self) -> int:
        return len(self.src)

    @property
    def weights(self) -> np.ndarray:
        """Row-stochastic weights m(c_i & T^-1 c_j) / m(c_i)."""
        return self.length / self.grid.widths[self.src]

    def matrix(self) -> sparse.csr_matrix:
        """Matrix acting on cell-average vectors (target x source)."""
        m = self.__dict__.get("_csr")
        if m is None:
            w = self.grid.widths
            m = sparse.csr_matrix((self.length / w[self.tgt], (self.tgt, self.src)),
                                  shape=(self.grid.N, self.grid.N))
            object.__setattr__(self, "_csr", m)
        return m

    def dense_weights(self) -> np.ndarray:
        W = np.zeros((self.grid.N, self.grid.N))
        np.add.at(W, (self.src, self.tgt), self.weights)
        return W

    def apply_values(self, v: np.ndarray) -> np.ndarray:
        """Apply to raw cell values; ``v`` may be (N,) or (N, k)."""
        return self.matrix() @ v

    def to_bytes(self) -> bytes:
        head = TOP_MAGIC + struct.pack("<dIdQ", self.gamma, self.grid.N, self.grid.p, self.nnz)
        rec = np.empty(self.nnz, dtype=[("row", "<u4"), ("col", "<u4"), ("w", "<f8")])
        rec["row"], rec["col"], rec["w"] = self.src, self.tgt, self.weights
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, grid: Optional[GradedGrid] = None) -> "TransferOperatorDisc":
        from .grid import make_grid
        hsize = 4 + struct.calcsize("<dIdQ")
        if len(data) < hsize or data[:4] != TOP_MAGIC:
            raise ValueError("not a TOP1 record")
        gamma, N, p, nnz = struct.unpack("<dIdQ", data[4:hsize])
        if len(data) != hsize + 16 * nnz:
            raise ValueError("truncated TOP1 record")
        rec = np.frombuffer(data, dtype=[("row", "<u4"), ("col", "<u4"), ("w", "<f8")],
                            offset=hsize, count=nnz)
        g = grid if grid is not None and grid.key() == (N, p) else make_grid(N, p, allow_small=True)
        src = rec["row"].astype(np.int64)
        return cls(gamma, g, src, rec["col"].astype(np.int64), rec["w"] * g.widths[src])


def _preimage_segments(gamma: float, grid: GradedGrid):
    x = grid.nodes
    gl = np.asarray(lsv.left_inverse(gamma, x), dtype=float)
    gl[0], gl[-1] = 0.0, 0.5
    gr = 0.5 * (x + 1.0)
    gr[0], gr[-1] = 0.5, 1.0
    bp = np.unique(np.concatenate([x, gl, gr]))
    length = np.diff(bp)
    mid = 0.5 * (bp[:-1] + bp[1:])
    keep = length > 0
    mid, length = mid[keep], length[keep]
    src = grid.locate(mid)
    left = mid < 0.5
    tgt = np.where(left, np.searchsorted(gl, mid, side="right") - 1,
                   np.searchsorted(gr, mid, side="right") - 1)
    tgt = np.clip(tgt, 0, grid.N - 1)
    return src.astype(np.int64), tgt.astype(np.int64), length, gl


def build_operator(gamma, grid: GradedGrid, *, boundary: bool = False) -> TransferOperatorDisc:
    """Ulam transfer operator for T_gamma on ``grid``."""
    g = gamma.gamma if isinstance(gamma, lsv.MapParameter) else float(gamma)
    boundary = boundary or (isinstance(gamma, lsv.MapParameter) and gamma.boundary)
    lsv.check_gamma(g, boundary=boundary)
    src, tgt, length, _ = _preimage_segments(g, grid)
    return TransferOperatorDisc(g, grid, src, tgt, length)


def apply(op: TransferOperatorDisc, f: GridFunction) -> GridFunction:
    if f.grid != op.grid:
        raise GridMismatchError("operator and function grids differ")
    return GridFunction(f.grid, op.apply_values(f.values), f.tag)


def dense_oracle_kernel(gamma: float, grid: GradedGrid) -> np.ndarray:
    """Brute-force kernel W[i, j] = m(c_i & T^-1 c_j) / m(c_i).

    Independent of the sparse assembly: preimages are found by bracketing
    root solves of T(x) = y (scipy brentq) and overlaps are accumulated
    pairwise over all (i, j).
    """
    from scipy.optimize import brentq
    x = grid.nodes
    N = grid.N
    c = 2.0 ** gamma

    def ginv(y):
        if y <= 0:
            return 0.0
        if y >= 1:
            return 0.5
        return brentq(lambda t: t + c * t ** (1 + gamma) - y, 0.0, 0.5, xtol=1e-22, rtol=1e-15,
                      maxiter=500)

    pre = [(np.array([ginv(v) for v in x])), 0.5 * (x + 1.0)]
    W = np.zeros((N, N))
    a, b = x[:-1], x[1:]
    for branch in pre:
        lo, hi = branch[:-1], branch[1:]
        # overlap of source cell i with preimage interval of target j
        ov = np.minimum(b[:, None], hi[None, :]) - np.maximum(a[:, None], lo[None, :])
        W += np.clip(ov, 0.0, None)
    return W / grid.widths[:, None]


# --------------------------------------------------------------------------
# operator cache


class OperatorCache:
    """Thread-safe bounded LRU of operators keyed by (gamma to 12 digits, N, p).

    With ``directory`` set, operators are also persisted as TOP1 files.
    """

    def __init__(self, maxsize: int = 512, directory: Optional[str] = None):
        self.maxsize = maxsize
        self.directory = directory
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = self.misses = 0

    def _path(self, key):
        g, N, p = key
        return os.path.join(self.directory, f"top_{g!r}_{N}_{p!r}.bin")

    def get(self, gamma: float, grid: GradedGrid, *, boundary: bool = False) -> TransferOperatorDisc:
        key = (gamma_key(gamma), grid.N, grid.p)
        with self._lock:
            op = self._data.get(key)
            if op is not None:
                self._data.move_to_end(key)
                self.hits += 1
                return op
        op = None
        if self.directory:
            op = self._load(key, grid)
        if op is None:
            op = build_operator(key[0], grid, boundary=boundary or key[0] == 0.0)
            if self.directory:
                self._store(key, op)
        with self._lock:
            self.misses += 1
            op = self._data.setdefault(key, op)
            self._data.move_to_end(key)
            while len(self._data) > self.maxsize:
                self._data.popitem(last=False)
        return op

    def _load(self, key, grid):
        path = self._path(key)
        try:
            with open(path, "rb") as fh:
                return TransferOperatorDisc.from_bytes(fh.read(), grid)
        except FileNotFoundError:
            return None
        except (ValueError, struct.error):
            log.warning("corrupted operator cache entry %s; recomputing", path)
            return None

    def _store(self, key, op):
        path = self._path(key)
        try:
            os.makedirs(self.directory, exist_ok=True)
            tmp = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
            with open(tmp, "wb") as fh:
                fh.write(op.to_bytes())
            os.replace(tmp, path)
        except OSError as exc:
            log.warning("operator cache not writable (%s); continuing uncached", exc)
            self.directory = None

    def clear(self):
        with self._lock:
            self._data.clear()


DEFAULT_CACHE = OperatorCache()


# --------------------------------------------------------------------------
# cocycles


class Cocycle:
    """The perturbed cocycle omega -> L_{omega, eps} on a fixed grid."""

    def __init__(self, base: BaseSystem, params: ParameterProcess, grid: GradedGrid,
                 eps: float = 0.0, cache: Optional[OperatorCache] = None, boundary: bool = False):
        self.base = base
        self.params = params
        self.grid = grid
        self.eps = float(eps)
        self.cache = cache if cache is not None else DEFAULT_CACHE
        self.boundary = boundary or getattr(params, "boundary", False)

    def with_eps(self, eps: float) -> "Cocycle":
        return Cocycle(self.base, self.params, self.grid, eps, self.cache, self.boundary)

    def gammas(self, omega: BasePoint, n: int, start: int = 0) -> np.ndarray:
        """Parameters beta(sigma^k omega) + eps delta(sigma^k omega), k = start..start+n-1."""
        if n <= 0:
            return np.zeros(0)
        w = self.base.states(omega, np.arange(start, start + n))
        return np.atleast_1d(self.params.value(w, self.eps)).astype(float)

    def deltas(self, omega: BasePoint, n: int, start: int = 0) -> np.ndarray:
        if n <= 0:
            return np.zeros(0)
        w = self.base.states(omega, np.arange(start, start + n))
        return np.atleast_1d(self.params.delta(w)).astype(float)

    def operator(self, gamma: float) -> TransferOperatorDisc:
        return self.cache.get(gamma, self.grid, boundary=self.boundary)

    def operators(self, omega: BasePoint, n: int, start: int = 0):
        return [self.operator(g) for g in self.gammas(omega, n, start)]

    def push(self, omega: BasePoint, n: int, v: np.ndarray, start: int = 0) -> np.ndarray:
        for g in self.gammas(omega, n, start):
            v = self.operator(g).apply_values(v)
        return v


def compose_along(base: BaseSystem, params: ParameterProcess, omega: BasePoint, n: int,
                  f: GridFunction, eps: float = 0.0, cache: Optional[OperatorCache] = None,
                  boundary: bool = False) -> GridFunction:
    """L^n_{omega, eps} f; n = 0 is the identity."""
    if n < 0:
        raise ValueError("n must be >= 0")
    coc = Cocycle(base, params, f.grid, eps, cache, boundary)
    return GridFunction(f.grid, coc.push(omega, n, f.values), f.tag)


@dataclass(frozen=True)
class EquivariantDensity:
    omega_anchor: BasePoint
    h: GridFunction
    pullback_depth: int
    residual: float
    eps: float = 0.0
    min_value: float = 0.0
    converged: bool = True
    step_residual: float = 0.0


def pullback_values(coc: Cocycle, omega: BasePoint, depth: int):
    """Pull back the constant 1 from depths ``depth``, ``depth - 1`` and ``depth // 2``.

    The three runs end at ``omega`` and share every operator, so the
    shallower ones cost an extra column in each sparse product rather than
    another pullback.  Returns the three value vectors in that order.
    """
    N = coc.grid.N
    gam = coc.gammas(omega, depth, start=-depth)
    starts = sorted({0, min(1, depth), depth - depth // 2})
    cols = {}
    V = np.ones((N, 1))
    for k, g in enumerate(gam):
        if k in starts and k > 0:
            V = np.column_stack([V, np.ones(N)])
        cols = {s: i for i, s in enumerate(x for x in starts if x <= k)}
        V = coc.operator(g).apply_values(V)
    if depth == 0:
        return V[:, 0], V[:, 0], V[:, 0]
    full = V[:, cols[0]]
    one_less = V[:, cols[1]] if 1 in cols else np.ones(N)
    half = V[:, cols[depth - depth // 2]] if (depth - depth // 2) in cols else np.ones(N)
    return full, one_less, half


def equivariant_density(base: BaseSystem, params: ParameterProcess, omega: BasePoint,
                        depth: int = DEFAULT_DEPTH, eps: float = 0.0, grid: Optional[GradedGrid] = None,
                        cache: Optional[OperatorCache] = None, tol: float = DEFAULT_RESIDUAL_TARGET,
                        rho: float = 0.0, boundary: bool = False) -> EquivariantDensity:
    """Pullback approximation h_omega = L^depth_{sigma^-depth omega, eps} 1."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    from .grid import maybe_grid
    grid = maybe_grid(grid)
    coc = Cocycle(base, params, grid, eps, cache, boundary)
    return _density_from_cocycle(coc, omega, depth, tol, rho)


def _density_from_cocycle(coc: Cocycle, omega: BasePoint, depth: int, tol: float = DEFAULT_RESIDUAL_TARGET,
                          rho: float = 0.0) -> EquivariantDensity:
    v, w, u = pullback_values(coc, omega, depth)
    widths = coc.grid.widths
    mass = v @ widths
    if abs(mass - 1.0) > 1e-10:
        raise ArithmeticError(f"pullback mass drift {mass - 1.0:.3e} exceeds 1e-10")
    v = v / mass
    step = float(np.abs(v - w / (w @ widths)) @ widths)
    half = float(np.abs(v - u / (u @ widths)) @ widths)
    resid = max(step, half, RESIDUAL_FLOOR)
    h = GridFunction(coc.grid, v, Tag.DENSITY)
    mn = float(v.min())
    if resid > tol:
        log.info("pullback residual %.3e above target %.1e at depth %d", resid, tol, depth)
    if mn < rho:
        raise DegenerateDensityError(f"density minimum {mn:.3e} below rho={rho:.3e}")
    return EquivariantDensity(omega, h, depth, resid, coc.eps, mn, resid <= tol, step)


def fixed_density(gamma: float, grid: GradedGrid, *, boundary: bool = False, op=None) -> GridFunction:
    """Invariant density of a single map: sparse direct solve of (I - P) h = 0, mass 1."""
    from scipy.sparse.linalg import spsolve
    op = op or build_operator(gamma, grid, boundary=boundary)
    P = op.matrix()
    N = grid.N
    A = (sparse.identity(N, format="csr") - P).tolil()
    A[N - 1, :] = grid.widths
    rhs = np.zeros(N)
    rhs[-1] = 1.0
    h = spsolve(A.tocsr(), rhs)
    h = np.maximum(h, 0.0)
    return GridFunction(grid, h / (h @ grid.widths), Tag.DENSITY)


def dense_power_fixed_point(W: np.ndarray, grid: GradedGrid, doublings: int = 40) -> GridFunction:
    """Fixed density by repeated squaring of a dense row-stochastic kernel."""
    # act on masses: m' = m W
    M = W.copy()
    for _ in range(doublings):
        M = M @ M
        M /= M.sum(axis=1, keepdims=True)
    mass = grid.widths @ M
    return GridFunction(grid, mass / grid.widths / mass.sum(), Tag.DENSITY)


# --------------------------------------------------------------------------
# normalised (Markov) operator


def normalized_apply(base: BaseSystem, params: ParameterProcess, omega: BasePoint, psi: GridFunction,
                     n: int, eps: float = 0.0, depth: int = DEFAULT_DEPTH, rho: float = DEFAULT_RHO,
                     density: Optional[EquivariantDensity] = None, cache=None) -> GridFunction:
    """psi -> L^n_omega(psi h_omega) / h_{sigma^n omega}.

    h_{sigma^n omega} is obtained by pushing h_omega forward n steps.
    """
    dens = density or equivariant_density(base, params, omega, depth, eps, psi.grid, cache)
    coc = Cocycle(base, params, psi.grid, eps, cache)
    both = coc.push(omega, n, np.column_stack([psi.values * dens.h.values, dens.h.values]))
    num, hn = both[:, 0], both[:, 1]
    if hn.min() < rho:
        raise DegenerateDensityError(f"h at sigma^{n} omega drops to {hn.min():.3e} < rho={rho:.3e}")
    return GridFunction(psi.grid, num / hn)


# --------------------------------------------------------------------------
# cones


@dataclass
class ConeReport:
    member: bool
    violations: list
    margins: dict

    def __bool__(self):
        return self.member


C2_BLOCK = 8


def _coarse_derivatives(f: GridFunction, block: int = C2_BLOCK):
    """Block-averaged values and first/second derivatives at block centres.

    Ulam densities carry O(width) noise at grid scale, which raw second
    differences amplify by width^-2; merging ``block`` cells first keeps the
    stencil error well below the quantities being tested.
    """
    grid = f.grid
    n = max(3, grid.N // block)
    cuts = np.linspace(0, grid.N, n + 1).round().astype(int)
    mass = np.add.reduceat(f.values * grid.widths, cuts[:-1])
    width = np.add.reduceat(grid.widths, cuts[:-1])
    avg = mass / width
    edges = grid.nodes[cuts]
    c = 0.5 * (edges[1:] + edges[:-1])
    d1 = np.gradient(avg, c)
    d2 = np.gradient(d1, c)
    return c, avg, d1, d2


def cone_check(f: GridFunction, a: float, alpha: float, b1: float, b2: float, which: str = "both",
               slack: float = 1e-6) -> ConeReport:
    """Check membership of a cell-average function in C*(a) and/or C2(b1, b2).

    Each margin is relative to the local size of the quantity it bounds, and a
    condition counts as violated when its margin drops below ``-slack``.

    * decreasing: consecutive cell averages;
    * x^(alpha+1) phi increasing: cell averages over the cell average of
      x^-(alpha+1), first cell exempt;
    * integral bound: at every node;
    * C2 conditions: block-averaged derivatives, end blocks exempt.
    """
    if which not in ("star", "c2", "both"):
        raise ValueError("which must be 'star', 'c2' or 'both'")
    v = f.values
    grid = f.grid
    x = grid.nodes
    tiny = np.finfo(float).tiny
    scale = float(np.abs(v).max()) or 1.0
    margins: dict = {}
    locs: dict = {}

    def record(name, arr, where):
        k = int(np.argmin(arr))
        margins[name] = float(arr[k])
        locs[name] = float(where[k])

    record("nonneg", v / scale, grid.centers)
    if which in ("star", "both"):
        record("decreasing", (v[:-1] - v[1:]) / np.maximum(np.abs(v[:-1]), tiny), x[1:-1])
        lo, hi = x[1:-1], x[2:]
        # cell average of t^-(alpha+1) on cells 1..N-1
        wavg = (lo ** (-alpha) - hi ** (-alpha)) / (alpha * (hi - lo))
        r = v[1:] / wavg
        record("x^(alpha+1) phi increasing", (r[1:] - r[:-1]) / np.maximum(np.abs(r[1:]), tiny), x[2:-1])
        cum = cumulative(f)
        total = cum[-1]
        if total > 0:
            xs = x[1:]
            bound = a * xs ** (1.0 - alpha) * total
            record("integral bound", (bound - cum[1:]) / bound, xs)
        else:
            margins["integral bound"] = -np.inf
            locs["integral bound"] = 0.0
    if which in ("c2", "both"):
        c, avg, d1, d2 = _coarse_derivatives(f)
        c, avg, d1, d2 = c[1:-1], avg[1:-1], d1[1:-1], d2[1:-1]
        den = np.maximum(np.abs(avg), tiny)
        record("C2 first derivative", (b1 * avg - c * np.abs(d1)) / den, c)
        record("C2 second derivative", (b2 * avg - c * c * np.abs(d2)) / den, c)
    violations = [(k, locs[k], m) for k, m in margins.items() if m < -slack]
    return ConeReport(not violations, violations, margins)


@dataclass(frozen=True)
class ConeParams:
    """Cone parameters used for diagnostics; calibrated, not derived."""

    a: float = 4.0
    b1: float = 2.0
    b2: float = 6.0


def calibrate_cone(densities: Sequence[GridFunction], alpha: float, safety: float = 1.25) -> ConeParams:
    """Smallest (a, b1, b2) admitting the given densities, inflated by ``safety``."""
    a = b1 = b2 = 0.0
    for h in densities:
        cum = cumulative(h)
        xs = h.grid.nodes[1:]
        a = max(a, float(np.max(cum[1:] / (xs ** (1 - alpha) * cum[-1]))))
        c, avg, d1, d2 = (z[1:-1] for z in _coarse_derivatives(h))
        b1 = max(b1, float(np.max(c * np.abs(d1) / avg)))
        b2 = max(b2, float(np.max(c * c * np.abs(d2) / avg)))
    return ConeParams(max(1.0 + 1e-9, a) * safety, b1 * safety, b2 * safety)


# --------------------------------------------------------------------------
# decay of correlations


@dataclass
class DecayProfile:
    n: np.ndarray
    norms: np.ndarray
    slope: float
    slope_stderr: float
    fit_range: tuple

    def rows(self):
        return list(zip(self.n.tolist(), self.norms.tolist()))


def fit_loglog(n, y, lo, hi, floor: float = 10 * np.finfo(float).eps):
    """Least-squares slope of log y against log n over lo <= n <= hi (y above floor)."""
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    sel = (n >= lo) & (n <= hi) & (y > floor)
    if sel.sum() < 3:
        return float("nan"), float("nan"), (lo, hi)
    X, Y = np.log(n[sel]), np.log(y[sel])
    A = np.column_stack([X, np.ones_like(X)])
    coef, res, *_ = np.linalg.lstsq(A, Y, rcond=None)
    dof = max(1, len(X) - 2)
    s2 = float(np.sum((Y - A @ coef) ** 2)) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(np.sqrt(cov[0, 0])), (float(n[sel].min()), float(n[sel].max()))


def decay_profile(base: BaseSystem, params: ParameterProcess, omega: BasePoint, phi: Callable,
                  h: GridFunction, n_max: int, eps: float = 0.0, cache=None, boundary: bool = False,
                  fit_lo: Optional[int] = None) -> DecayProfile:
    """Norms ||L^n_{omega,eps}(phi_0 h)||_1 for n = 1..n_max with phi_0 = phi - int phi h."""
    if n_max < 16:
        raise ValueError("n_max must be >= 16")
    grid = h.grid
    pv = phi.values if isinstance(phi, GridFunction) else cell_averages(phi, grid)
    v = (pv - (pv * h.values) @ grid.widths) * h.values
    coc = Cocycle(base, params, grid, eps, cache, boundary)
    norms = np.empty(n_max)
    for k, g in enumerate(coc.gammas(omega, n_max)):
        v = coc.operator(g).apply_values(v)
        norms[k] = np.abs(v) @ grid.widths
    n = np.arange(1, n_max + 1)
    lo = fit_lo if fit_lo is not None else n_max // 4
    slope, se, rng = fit_loglog(n, norms, lo, n_max)
    return DecayProfile(n, norms, slope, se, rng)


def decay_envelope(alpha: float, gamma_obs: Optional[float] = None) -> float:
    """Exponent of the polynomial decay bound; faster for observables vanishing like x^gamma.

    alpha = 0 (uniformly expanding) decays faster than any power: -inf.
    """
    if alpha <= 0.0:
        return -np.inf
    if gamma_obs is None:
        return 1.0 - 1.0 / alpha
    return 1.0 - (1.0 + min(gamma_obs, alpha)) / alpha


# --------------------------------------------------------------------------
# first entry time into [1/2, 1]


@dataclass
class EntryTail:
    n: np.ndarray
    tail: np.ndarray
    exponent: float
    exponent_stderr: float
    trials: int


def simulate_orbits(coc: Cocycle, omega: BasePoint, x0: np.ndarray, n: int):
    """Yield T^k_omega x0 for k = 1..n (vectorised over x0)."""
    x = np.array(x0, dtype=float)
    for g in coc.gammas(omega, n):
        x = _map_fast(g, x)
        yield x


def _map_fast(g, x):
    left = x < 0.5
    out = 2.0 * x - 1.0
    xl = x[left]
    out[left] = xl + 2.0 ** g * xl * np.exp(g * np.log(np.maximum(xl, 1e-300)))
    return out


def entry_time_tail(base: BaseSystem, params: ParameterProcess, omega: BasePoint, nu: GridFunction,
                    n_max: int, trials: int, seed: int, eps: float = 0.0, fit_lo: Optional[int] = None,
                    boundary: bool = False) -> EntryTail:
    """Monte Carlo estimate of P_nu(tau_omega >= n), n = 0..n_max."""
    if trials < 1:
        raise ValueError("trials must be positive")
    rng = np.random.default_rng(seed)
    x = inverse_cdf_sample(nu, rng.random(trials))
    coc = Cocycle(base, params, nu.grid, eps, None, boundary)
    tau = np.full(trials, n_max + 1, dtype=np.int64)
    alive = np.ones(trials, dtype=bool)
    for k, xk in enumerate(simulate_orbits(coc, omega, x, n_max), start=1):
        hit = alive & (xk >= 0.5)
        tau[hit] = k
        alive &= ~hit
        if not alive.any():
            break
    n = np.arange(n_max + 1)
    tail = np.array([(tau >= k).mean() for k in n])
    lo = fit_lo if fit_lo is not None else max(2, n_max // 10)
    slope, se, _ = fit_loglog(n, tail, lo, n_max, floor=0.0)
    return EntryTail(n, tail, slope, se, trials)
