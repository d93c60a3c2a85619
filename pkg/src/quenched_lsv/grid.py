"""Cell-average functions on a graded partition of [0, 1].

The partition has nodes x_i = (i/N)**p, clustering at the origin so that
densities behaving like x**(-alpha) are resolved.  A :class:`GridFunction`
stores one value per cell, the average of the represented function over
that cell, which is the representation transfer operators act on in the
Ulam scheme.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

GFN_MAGIC = b"GFN1"
DENSITY_TOL = 1e-10
DEFAULT_N = 4096
DEFAULT_P = 3.0


class Tag(IntEnum):
    DENSITY = 0
    SIGNED = 1


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GradedGrid:
    N: int
    p: float
    nodes: np.ndarray = field(repr=False)

    @property
    def widths(self) -> np.ndarray:
        return self._derived()[0]

    @property
    def centers(self) -> np.ndarray:
        return self._derived()[1]

    def _derived(self):
        d = self.__dict__.get("_cache")
        if d is None:
            w = np.diff(self.nodes)
            c = 0.5 * (self.nodes[1:] + self.nodes[:-1])
            w.flags.writeable = False
            c.flags.writeable = False
            d = (w, c)
            object.__setattr__(self, "_cache", d)
        return d

    def key(self):
        return (self.N, float(self.p))

    def __eq__(self, other):
        return isinstance(other, GradedGrid) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def locate(self, x) -> np.ndarray:
        """Index of the cell containing each x (x = 1 goes to the last cell)."""
        idx = np.searchsorted(self.nodes, x, side="right") - 1
        return np.clip(idx, 0, self.N - 1)


def make_grid(N: int, p: float = DEFAULT_P, *, allow_small: bool = False) -> GradedGrid:
    """Graded grid with ``N`` cells and grading exponent ``p``.

    ``N >= 8`` is required unless ``allow_small`` is set (used for tiny
    hand-checkable examples).
    """
    if int(N) != N or N < (1 if allow_small else 8):
        raise ValueError(f"invalid cell count N={N!r}")
    if not np.isfinite(p) or p < 1:
        raise ValueError(f"grading exponent p={p!r} must be >= 1")
    N = int(N)
    nodes = (np.arange(N + 1, dtype=float) / N) ** float(p)
    nodes[0], nodes[-1] = 0.0, 1.0
    nodes.flags.writeable = False
    return GradedGrid(N, float(p), nodes)


def min_grading(alpha_max: float) -> float:
    """Smallest p keeping x**(-alpha_max) cellwise integrable with bounded relative error."""
    return 1.0 / (1.0 - alpha_max)


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: GradedGrid
    values: np.ndarray
    tag: Tag = Tag.SIGNED

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.N,):
            raise ValueError(f"expected {self.grid.N} cell values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tag", Tag(self.tag))
        if self.tag is Tag.DENSITY:
            if v.min() < 0:
                raise ValueError("density has negative cell values")
            mass = float(v @ self.grid.widths)
            if abs(mass - 1.0) > DENSITY_TOL:
                raise ValueError(f"density integrates to {mass!r}, not 1")

    def _coerce(self, other):
        if isinstance(other, GridFunction):
            if other.grid != self.grid:
                raise GridMismatchError("grid functions live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return GridFunction(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return GridFunction(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def as_density(self) -> "GridFunction":
        """Renormalise to unit mass and tag as a density."""
        mass = integrate(self)
        return GridFunction(self.grid, self.values / mass, Tag.DENSITY)

    def signed(self) -> "GridFunction":
        return GridFunction(self.grid, self.values, Tag.SIGNED)

    # -- GFN1 binary record -------------------------------------------------
    def to_bytes(self) -> bytes:
        head = GFN_MAGIC + struct.pack("<Idb", self.grid.N, self.grid.p, int(self.tag))
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GridFunction":
        hsize = 4 + struct.calcsize("<Idb")
        if len(data) < hsize or data[:4] != GFN_MAGIC:
            raise ValueError("not a GFN1 record")
        N, p, tag = struct.unpack("<Idb", data[4:hsize])
        if len(data) != hsize + 8 * N:
            raise ValueError("truncated GFN1 record")
        vals = np.frombuffer(data, dtype="<f8", offset=hsize, count=N)
        return cls(make_grid(N, p, allow_small=True), vals.astype(float), Tag(tag))


def constant(grid: GradedGrid, c: float = 1.0, tag: Tag = Tag.SIGNED) -> GridFunction:
    return GridFunction(grid, np.full(grid.N, float(c)), tag)


def lebesgue(grid: GradedGrid) -> GridFunction:
    return constant(grid, 1.0, Tag.DENSITY)


_GL_CACHE: dict = {}


def _gauss_legendre(order):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def cell_averages(fn: Callable, grid: GradedGrid, order: int = 4) -> np.ndarray:
    """Average of ``fn`` over every cell by Gauss-Legendre quadrature."""
    t, w = _gauss_legendre(order)
    a, b = grid.nodes[:-1], grid.nodes[1:]
    pts = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * t[None, :]
    vals = np.asarray(fn(pts), dtype=float)
    if vals.shape != pts.shape:
        vals = np.broadcast_to(vals, pts.shape)
    return 0.5 * vals @ w


def sample(fn: Callable, grid: GradedGrid, tag: Tag = Tag.SIGNED, order: int = 4) -> GridFunction:
    """Cell-average representation of a callable."""
    vals = cell_averages(fn, grid, order)
    if tag is Tag.DENSITY:
        return GridFunction(grid, vals).as_density()
    return GridFunction(grid, vals, tag)


def integrate(f: GridFunction) -> float:
    return float(f.values @ f.grid.widths)


def inner(f: GridFunction, g: GridFunction) -> float:
    """Integral of the product of two cellwise-constant functions."""
    if f.grid != g.grid:
        raise GridMismatchError("grid functions live on different grids")
    return float((f.values * g.values) @ f.grid.widths)


def l1_norm(f: GridFunction) -> float:
    return float(np.abs(f.values) @ f.grid.widths)


def l1_distance(f: GridFunction, g: GridFunction) -> float:
    if f.grid != g.grid:
        raise GridMismatchError("grid functions live on different grids")
    return float(np.abs(f.values - g.values) @ f.grid.widths)


def cumulative(f: GridFunction) -> np.ndarray:
    """Values of x -> int_0^x f at every node (length N + 1)."""
    out = np.zeros(f.grid.N + 1)
    np.cumsum(f.values * f.grid.widths, out=out[1:])
    return out


def _three_point(xm, x0, xp, fm, f0, fp, at):
    """Derivative at ``at`` of the quadratic through three points."""
    # Lagrange basis derivatives
    dm = (2 * at - x0 - xp) / ((xm - x0) * (xm - xp))
    d0 = (2 * at - xm - xp) / ((x0 - xm) * (x0 - xp))
    dp = (2 * at - xm - x0) / ((xp - xm) * (xp - x0))
    return fm * dm + f0 * d0 + fp * dp


def differentiate(f: GridFunction) -> GridFunction:
    """Cellwise slopes from neighbouring cell centres.

    Interior cells use the centred three-point (non-uniform) stencil,
    the two end cells one-sided second-order stencils.
    """
    N = f.grid.N
    if N < 3:
        raise ValueError("differentiate needs at least 3 cells")
    c, v = f.grid.centers, f.values
    out = np.empty(N)
    out[1:-1] = _three_point(c[:-2], c[1:-1], c[2:], v[:-2], v[1:-1], v[2:], c[1:-1])
    out[0] = _three_point(c[0], c[1], c[2], v[0], v[1], v[2], c[0])
    out[-1] = _three_point(c[-3], c[-2], c[-1], v[-3], v[-2], v[-1], c[-1])
    return GridFunction(f.grid, out)


def second_difference(f: GridFunction) -> GridFunction:
    """Second derivative from three neighbouring cell centres (ends copied inward)."""
    c, v = f.grid.centers, f.values
    xm, x0, xp = c[:-2], c[1:-1], c[2:]
    inner_vals = 2 * (v[:-2] / ((xm - x0) * (xm - xp)) + v[1:-1] / ((x0 - xm) * (x0 - xp))
                      + v[2:] / ((xp - xm) * (xp - x0)))
    out = np.concatenate([[inner_vals[0]], inner_vals, [inner_vals[-1]]])
    return GridFunction(f.grid, out)


@dataclass(frozen=True)
class C2Function:
    """A C^2 function handle: value, first and second derivative callables."""

    f: Callable
    df: Callable
    d2f: Callable
    name: str = "F"

    def __call__(self, x):
        return self.f(x)

    def shifted(self, c: float) -> "C2Function":
        return C2Function(lambda x, f=self.f: f(x) + c, self.df, self.d2f, f"{self.name}+{c:g}")

    def scaled(self, s: float) -> "C2Function":
        return C2Function(lambda x, f=self.f: s * f(x), lambda x, g=self.df: s * g(x),
                          lambda x, g=self.d2f: s * g(x), f"{s:g}*{self.name}")


def _const_fn(c):
    return lambda x: np.full(np.shape(x), float(c))


def const_function(c: float) -> C2Function:
    return C2Function(_const_fn(c), _const_fn(0.0), _const_fn(0.0), f"const({c:g})")


def identity_function() -> C2Function:
    return C2Function(lambda x: np.asarray(x, dtype=float), _const_fn(1.0), _const_fn(0.0), "x")


def cosine(k: float = 1.0) -> C2Function:
    w = 2 * np.pi * k
    return C2Function(lambda x: np.cos(w * np.asarray(x)), lambda x: -w * np.sin(w * np.asarray(x)),
                      lambda x: -w * w * np.cos(w * np.asarray(x)), f"cos(2pi*{k:g}x)")


@dataclass(frozen=True)
class ObservableNorms:
    c0: float
    c1: float
    c2: float
    resolution: int


def observable_norms(F: C2Function, N: int = DEFAULT_N) -> ObservableNorms:
    """Sup-norm estimates ||F||_{C^k} = max_{j<=k} sup|F^(j)| on 4N+1 points."""
    x = np.linspace(0.0, 1.0, 4 * N + 1)
    s = [np.abs(np.asarray(h(x), dtype=float)) for h in (F.f, F.df, F.d2f)]
    if any(not np.all(np.isfinite(a)) for a in s):
        raise ValueError("observable has non-finite samples")
    m0, m1, m2 = (float(a.max()) for a in s)
    return ObservableNorms(m0, max(m0, m1), max(m0, m1, m2), 4 * N + 1)


def inverse_cdf_sample(h: GridFunction, u: np.ndarray) -> np.ndarray:
    """Map uniforms ``u`` to draws from the cellwise-constant density ``h``.

    Exact for the cellwise representation: the CDF is piecewise linear.
    """
    cdf = cumulative(h)
    cdf /= cdf[-1]
    u = np.asarray(u, dtype=float)
    k = np.searchsorted(cdf, u, side="right") - 1
    k = np.clip(k, 0, h.grid.N - 1)
    # skip zero-mass cells (cdf flat) by searching from the right on ties
    mass = cdf[k + 1] - cdf[k]
    frac = np.where(mass > 0, (u - cdf[k]) / np.where(mass > 0, mass, 1.0), 0.5)
    nodes = h.grid.nodes
    return nodes[k] + np.clip(frac, 0.0, 1.0) * (nodes[k + 1] - nodes[k])


def load_gridfunction(path) -> GridFunction:
    with open(path, "rb") as fh:
        return GridFunction.from_bytes(fh.read())


def save_gridfunction(f: GridFunction, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f.to_bytes())


def refine_pair(fn: Callable, N: int, p: float, order: int = 4) -> tuple:
    """Integrals of ``fn`` on grids with N and 2N cells (refinement check helper)."""
    a = integrate(sample(fn, make_grid(N, p), order=order))
    b = integrate(sample(fn, make_grid(2 * N, p), order=order))
    return a, b


def maybe_grid(grid: Optional[GradedGrid]) -> GradedGrid:
    return grid if grid is not None else make_grid(DEFAULT_N, DEFAULT_P)
