"""Analytic primitives of the Liverani-Saussol-Vaienti family.

    T_g(x) = x (1 + 2^g x^g)   on [0, 1/2)
    T_g(x) = 2x - 1            on [1/2, 1]

All functions accept scalars or numpy arrays and are vectorised.  ``gamma``
must lie in (0, 1); ``boundary=True`` additionally admits ``gamma == 0``
(the doubling map), which is only meant for oracle tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

LOG2 = np.log(2.0)

NEWTON_MAXITER = 60
BISECT_MAXITER = 200
INVERSE_TOL = 1e-14


class SingularityError(ValueError):
    """Request for a derivative at the neutral fixed point where it blows up."""


class ConvergenceError(ArithmeticError):
    """Raised when the inverse-branch root solve fails to converge."""

    def __init__(self, message, worst_y=None, worst_residual=None):
        super().__init__(message)
        self.worst_y = worst_y
        self.worst_residual = worst_residual


class Branch(Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class MapParameter:
    gamma: float
    boundary: bool = False

    def __post_init__(self):
        check_gamma(self.gamma, boundary=self.boundary)

    def __float__(self):
        return float(self.gamma)


@dataclass(frozen=True)
class BranchPoint:
    x: float
    branch: Branch

    @classmethod
    def of(cls, x: float) -> "BranchPoint":
        _check_unit(x)
        return cls(float(x), Branch.LEFT if x < 0.5 else Branch.RIGHT)


def check_gamma(gamma, boundary=False):
    g = float(gamma)
    if not np.isfinite(g) or g >= 1.0 or g < 0.0 or (g == 0.0 and not boundary):
        allowed = "[0, 1)" if boundary else "(0, 1)"
        raise ValueError(f"LSV exponent gamma={gamma!r} outside {allowed}")
    return g


def _gamma(gamma):
    if isinstance(gamma, MapParameter):
        return gamma.gamma
    # bare floats get the permissive check; MapParameter enforces the strict one
    return check_gamma(gamma, boundary=True)


def _check_unit(x, lo=0.0, hi=1.0):
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < lo) or np.any(arr > hi):
        raise ValueError(f"argument outside [{lo}, {hi}]")
    return arr


def _pow(x, e):
    """x**e for x >= 0 with 0**e = 0 (e > 0) computed through exp/log."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(e * np.log(x[pos]))
    return out


def _ret(arr, like):
    if np.ndim(like) == 0:
        return float(np.asarray(arr).reshape(-1)[0])
    return arr


def map_apply(gamma, x):
    """Evaluate T_gamma at ``x``."""
    g = _gamma(gamma)
    xa = np.atleast_1d(_check_unit(x))
    left = xa < 0.5
    out = 2.0 * xa - 1.0
    out[left] = xa[left] + 2.0 ** g * _pow(xa[left], 1.0 + g)
    return _ret(out, x)


def left_branch_limit(gamma):
    """Limit of T_gamma(x) as x -> 1/2 from the left (always 1)."""
    g = _gamma(gamma)
    return 0.5 * (1.0 + 2.0 ** g * 0.5 ** g)


def _left_d1(g, x):
    return 1.0 + 2.0 ** g * (1.0 + g) * _pow(x, g)


def _left_d2(g, x):
    x = np.asarray(x, dtype=float)
    if g == 0.0:
        return np.zeros_like(x)
    if np.any(x <= 0):
        raise SingularityError("second derivative of the left branch is singular at x = 0")
    return 2.0 ** g * g * (1.0 + g) * np.exp((g - 1.0) * np.log(x))


def map_derivative(gamma, x, order=1):
    """First or second derivative of T_gamma.  x = 1/2 uses the right branch."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    g = _gamma(gamma)
    xa = np.atleast_1d(_check_unit(x))
    left = xa < 0.5
    if order == 1:
        out = np.full_like(xa, 2.0)
        out[left] = _left_d1(g, xa[left])
    else:
        out = np.zeros_like(xa)
        out[left] = _left_d2(g, xa[left])
    return _ret(out, x)


def left_inverse(gamma, y):
    """Inverse of the left branch, g_gamma : [0, 1] -> [0, 1/2].

    Safeguarded Newton seeded at y/2; any iterate leaving the bracket is
    replaced by a bisection step.  Residual |T(g(y)) - y| <= 1e-14.
    """
    g = _gamma(gamma)
    ya = np.atleast_1d(_check_unit(y)).astype(float)
    if g == 0.0:
        x = 0.5 * ya
        return _ret(x, y)
    c = 2.0 ** g
    lo = np.zeros_like(ya)
    hi = np.minimum(ya, 0.5)  # T(x) >= x, so g(y) <= y
    x = 0.5 * ya
    converged = ya == 0.0
    x[converged] = 0.0
    for _ in range(NEWTON_MAXITER):
        act = ~converged
        if not act.any():
            break
        xa = x[act]
        xg = _pow(xa, g)
        f = xa + c * xa * xg - ya[act]
        # keep the bracket: f(x) > 0 means x is right of the root
        pos = f > 0
        hi_a, lo_a = hi[act], lo[act]
        hi_a = np.where(pos, np.minimum(hi_a, xa), hi_a)
        lo_a = np.where(pos, lo_a, np.maximum(lo_a, xa))
        step = f / (1.0 + c * (1.0 + g) * xg)
        xn = xa - step
        bad = (xn < lo_a) | (xn > hi_a) | ~np.isfinite(xn)
        xn = np.where(bad, 0.5 * (lo_a + hi_a), xn)
        done = np.abs(xn - xa) <= 4.0 * np.finfo(float).eps * np.maximum(xn, np.finfo(float).tiny)
        x[act], hi[act], lo[act] = xn, hi_a, lo_a
        idx = np.flatnonzero(act)
        converged[idx[done]] = True
    if not converged.all():
        # bisection fallback for the stragglers
        act = ~converged
        for _ in range(BISECT_MAXITER):
            mid = 0.5 * (lo[act] + hi[act])
            f = mid + c * _pow(mid, 1.0 + g) - ya[act]
            hi[act] = np.where(f > 0, mid, hi[act])
            lo[act] = np.where(f > 0, lo[act], mid)
        x[act] = 0.5 * (lo[act] + hi[act])
    resid = np.abs(x + c * _pow(x, 1.0 + g) - ya)
    if np.any(resid > INVERSE_TOL):
        k = int(np.argmax(resid))
        raise ConvergenceError(
            f"left_inverse failed: residual {resid[k]:.3e} at y={ya[k]!r}",
            worst_y=float(ya[k]), worst_residual=float(resid[k]))
    return _ret(x, y)


def inverse_branch_derivatives(gamma, y, order=2):
    """(g', g'') of the inverse left branch at ``y``.

    g' = 1 / T'(g(y)),  g'' = -T''(g(y)) / T'(g(y))**3.
    With ``order=1`` only g' is computed and y = 0 is allowed.
    """
    g = _gamma(gamma)
    ya = np.atleast_1d(_check_unit(y))
    x = left_inverse(g, ya)
    d1 = _left_d1(g, x)
    gp = 1.0 / d1
    if order == 1:
        return _ret(gp, y), None
    if g > 0 and np.any(x <= 0):
        raise SingularityError("g'' is singular at y = 0")
    gpp = -_left_d2(g, x) / d1 ** 3
    return _ret(gp, y), _ret(gpp, y)


def parameter_velocity(gamma, x):
    """v_gamma(x) = d/dgamma T_gamma(x) = 2^g x^(1+g) log(2x) on (0, 1/2]."""
    g = _gamma(gamma)
    xa = np.atleast_1d(_check_unit(x, 0.0, 0.5))
    out = np.zeros_like(xa)
    pos = xa > 0
    out[pos] = 2.0 ** g * np.exp((1.0 + g) * np.log(xa[pos])) * np.log(2.0 * xa[pos])
    return _ret(out, x)


def conjugated_velocity(gamma, y):
    """X_gamma(y) = v_gamma(g_gamma(y))."""
    g = _gamma(gamma)
    return parameter_velocity(g, left_inverse(g, y))


def conjugated_velocity_derivative(gamma, y):
    """d/dy X_gamma(y) = v'_gamma(g(y)) g'(y), with v'(x) = 2^g x^g ((1+g) log(2x) + 1)."""
    g = _gamma(gamma)
    x = np.atleast_1d(np.asarray(left_inverse(g, y), dtype=float))
    gp = 1.0 / _left_d1(g, x)
    vp = np.zeros_like(x)
    pos = x > 0
    vp[pos] = 2.0 ** g * np.exp(g * np.log(x[pos])) * ((1.0 + g) * np.log(2.0 * x[pos]) + 1.0)
    return _ret(vp * gp, y)
