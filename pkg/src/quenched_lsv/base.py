"""Ergodic drivers (Omega, sigma, P) and the parameter processes beta, delta.

Base points are value objects ``BasePoint(origin, shift)``; advancing only
changes the integer shift, so the group property and invertibility are
exact.  What a point *means* is decided by its driver:

* rotation: omega = frac(origin + shift * angle)
* iid / Markov: ``origin`` keys a two-sided stationary sequence and
  ``shift`` indexes into it.
"""
from __future__ import annotations

import ast
import math
import operator
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
MIN_DENOMINATOR = 10 ** 6
BLOCK = 1024


class ConfigError(ValueError):
    """Invalid driver or parameter configuration."""


@dataclass(frozen=True)
class BasePoint:
    origin: float
    shift: int = 0

    def __str__(self):
        return f"{self.origin!r}{self.shift:+d}"


class BaseSystem:
    kind = "abstract"
    finite = False

    def advance(self, omega: BasePoint, k: int = 1) -> BasePoint:
        return BasePoint(omega.origin, omega.shift + int(k))

    def state(self, omega: BasePoint):
        raise NotImplementedError

    def states(self, omega: BasePoint, ks: Sequence[int]) -> np.ndarray:
        return np.array([self.state(self.advance(omega, k)) for k in ks])

    def sample_omegas(self, count: int, seed: int, burn_in: int = 0, mode: str = "random"):
        raise NotImplementedError

    def state_sample(self) -> np.ndarray:
        """States used to validate parameter expressions."""
        raise NotImplementedError


def _zigzag(b: int) -> int:
    return 2 * b if b >= 0 else -2 * b - 1


def check_irrational(angle: float, max_den: int = MIN_DENOMINATOR, tol: float = 1e-13) -> None:
    """Reject angles that coincide with a rational p/q, q < max_den, to ``tol``."""
    if not (0.0 < angle < 1.0):
        raise ConfigError(f"rotation angle {angle!r} must lie in (0, 1)")
    approx = Fraction(angle).limit_denominator(max_den - 1)
    if abs(angle - approx) < tol:
        raise ConfigError(f"rotation angle {angle!r} is numerically rational ({approx})")


class IrrationalRotation(BaseSystem):
    kind = "rotation"

    def __init__(self, angle: float = GOLDEN):
        check_irrational(angle)
        self.angle = float(angle)

    def state(self, omega: BasePoint) -> float:
        return (omega.origin + (omega.shift * self.angle) % 1.0) % 1.0

    def states(self, omega, ks):
        ks = np.asarray(ks, dtype=float)
        return (omega.origin + (ks + omega.shift) * self.angle % 1.0) % 1.0

    def sample_omegas(self, count, seed, burn_in=0, mode="random"):
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = np.random.default_rng(seed)
        if mode == "random":
            w = rng.random(count)
        elif mode == "stratified":
            w = (np.arange(count) + rng.random(count)) / count
        elif mode == "orbit":
            w = (rng.random() + np.arange(count) * self.angle) % 1.0
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
        return [BasePoint(float(x), 0) for x in w]

    def state_sample(self):
        return np.linspace(0.0, 1.0, 4097)[:-1]


class _FiniteStateSystem(BaseSystem):
    finite = True

    def __init__(self, n_states: int, seed: int):
        self.n_states = n_states
        self.seed = int(seed)
        self._lock = threading.Lock()

    def state_sample(self):
        return np.arange(self.n_states, dtype=float)

    def sample_omegas(self, count, seed, burn_in=0, mode="random"):
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = np.random.default_rng(seed)
        keys = rng.choice(2 ** 62, size=count, replace=False)
        return [BasePoint(int(k), int(burn_in)) for k in keys]

    def state(self, omega):
        return int(self.states(omega, [0])[0])


class IidSequence(_FiniteStateSystem):
    """Two-sided iid sequence over states {0..m-1} with law ``law``."""

    kind = "iid"

    def __init__(self, law: Sequence[float], seed: int = 0):
        law = np.asarray(law, dtype=float)
        if law.ndim != 1 or len(law) < 1 or np.any(law < 0) or abs(law.sum() - 1.0) > 1e-12:
            raise ConfigError("iid law must be a probability vector")
        super().__init__(len(law), seed)
        self.law = law
        self._cdf = np.cumsum(law)
        self._blocks: dict = {}

    def _block(self, key: int, b: int) -> np.ndarray:
        with self._lock:
            arr = self._blocks.get((key, b))
            if arr is None:
                u = np.random.default_rng([self.seed, int(key), _zigzag(b)]).random(BLOCK)
                arr = np.minimum(np.searchsorted(self._cdf, u, side="right"), self.n_states - 1)
                self._blocks[(key, b)] = arr
            return arr

    def states(self, omega, ks):
        idx = np.asarray(ks, dtype=np.int64) + omega.shift
        out = np.empty(len(idx), dtype=np.int64)
        for b in np.unique(idx // BLOCK):
            sel = idx // BLOCK == b
            out[sel] = self._block(omega.origin, int(b))[idx[sel] - b * BLOCK]
        return out


class FiniteMarkov(_FiniteStateSystem):
    """Stationary two-sided Markov chain; the past is generated with the reversed kernel."""

    kind = "markov"

    def __init__(self, kernel, seed: int = 0):
        P = np.asarray(kernel, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or np.any(P < 0) \
                or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigError("Markov kernel must be a square stochastic matrix")
        super().__init__(P.shape[0], seed)
        self.kernel = P
        self.stationary = stationary_law(P)
        pi = self.stationary
        with np.errstate(divide="ignore", invalid="ignore"):
            R = (P.T * pi[None, :]) / pi[:, None]
        R[~np.isfinite(R)] = 0.0
        self.reversed_kernel = R
        self._fwd_cdf = np.cumsum(P, axis=1)
        self._bwd_cdf = np.cumsum(R, axis=1)
        self._paths: dict = {}

    def _path(self, key: int, lo: int, hi: int):
        """Ensure indices lo..hi are generated; returns (array, offset)."""
        with self._lock:
            fwd, bwd = self._paths.get(key, (None, None))
            if fwd is None:
                u0 = np.random.default_rng([self.seed, int(key), 0]).random()
                s0 = min(int(np.searchsorted(np.cumsum(self.stationary), u0, side="right")),
                         self.n_states - 1)
                fwd, bwd = [s0], [s0]
            fwd = self._extend(fwd, hi, self._fwd_cdf, key, 1)
            bwd = self._extend(bwd, -lo, self._bwd_cdf, key, 2)
            self._paths[key] = (fwd, bwd)
            return fwd, bwd

    def _extend(self, path, upto, cdf, key, direction):
        while len(path) <= upto:
            b = (len(path) - 1) // BLOCK
            u = np.random.default_rng([self.seed, int(key), direction, b]).random(BLOCK)
            start = len(path) - 1 - b * BLOCK
            for t in range(start, BLOCK):
                s = path[-1]
                path.append(min(int(np.searchsorted(cdf[s], u[t], side="right")), self.n_states - 1))
        return path

    def states(self, omega, ks):
        idx = np.asarray(ks, dtype=np.int64) + omega.shift
        fwd, bwd = self._path(omega.origin, int(min(idx.min(), 0)), int(max(idx.max(), 0)))
        return np.array([fwd[i] if i >= 0 else bwd[-i] for i in idx], dtype=np.int64)


def stationary_law(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, k])
    pi = np.abs(pi) / np.abs(pi).sum()
    return pi


def advance(base: BaseSystem, omega: BasePoint, k: int) -> BasePoint:
    return base.advance(omega, k)


def sample_omegas(base: BaseSystem, count: int, seed: int, burn_in: int = 0, mode: str = "random"):
    return base.sample_omegas(count, seed, burn_in, mode)


# --------------------------------------------------------------------------
# parameter expressions

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sin": np.sin, "cos": np.cos}
_NAMES = {"pi": math.pi}


class Expr:
    """Closed-form expression in the state variable ``w``.

    Grammar: numbers, ``w``, ``pi``, + - * / **, ``sin``, ``cos`` and
    ``table(v0, v1, ...)`` which picks ``v[int(w)]`` (step on a finite state).
    """

    def __init__(self, source):
        self.source = str(source)
        try:
            self._tree = ast.parse(self.source, mode="eval").body
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.source!r}") from exc
        self._check(self._tree)

    def _check(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return
        if isinstance(node, ast.Name) and (node.id == "w" or node.id in _NAMES):
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
            return
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            if node.func.id in _FUNCS and len(node.args) == 1:
                self._check(node.args[0])
                return
            if node.func.id == "table" and node.args:
                for a in node.args:
                    self._check(a)
                return
        raise ConfigError(f"unsupported construct in expression {self.source!r}")

    def _eval(self, node, w):
        if isinstance(node, ast.Constant):
            return np.full_like(w, float(node.value))
        if isinstance(node, ast.Name):
            return w if node.id == "w" else np.full_like(w, _NAMES[node.id])
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, w), self._eval(node.right, w))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, w))
        if node.func.id == "table":
            vals = np.stack([self._eval(a, w) for a in node.args])
            idx = w.astype(np.int64)
            if np.any(idx < 0) or np.any(idx >= len(node.args)):
                raise ConfigError(f"table() in {self.source!r} indexed out of range")
            return vals[idx, np.arange(len(w))]
        return _FUNCS[node.func.id](self._eval(node.args[0], w))

    def __call__(self, w):
        arr = np.atleast_1d(np.asarray(w, dtype=float))
        out = self._eval(self._tree, arr)
        return float(out[0]) if np.ndim(w) == 0 else out

    def __repr__(self):
        return f"Expr({self.source!r})"


@dataclass
class ParameterProcess:
    """omega -> beta(omega) + eps * delta(omega) with the range constraints."""

    beta: Expr
    delta: Expr
    alpha_lower: float
    alpha_upper: float
    eps0: float = 0.0
    boundary: bool = False  # admit gamma = 0 (doubling map); oracle runs only

    def __post_init__(self):
        if not isinstance(self.beta, Expr):
            self.beta = Expr(self.beta)
        if not isinstance(self.delta, Expr):
            self.delta = Expr(self.delta)
        lower_ok = self.alpha_lower > 0.0 or (self.boundary and self.alpha_lower == 0.0)
        if not (lower_ok and self.alpha_lower <= self.alpha_upper < 1.0):
            raise ConfigError("need 0 < alpha_lower <= alpha_upper < 1 (alpha_lower = 0 only in boundary mode)")
        if self.eps0 < 0:
            raise ConfigError("eps0 must be >= 0")

    @property
    def alpha(self) -> float:
        return self.alpha_upper

    def validate(self, base: BaseSystem, tol: float = 1e-12) -> None:
        w = base.state_sample()
        b, d = self.beta(w), self.delta(w)
        # closed at 1: delta = 1 is the natural "shift every fibre" perturbation
        if np.any(d < 0) or np.any(d > 1):
            raise ConfigError("delta must take values in [0, 1]")
        if b.min() - self.eps0 < self.alpha_lower - tol:
            raise ConfigError(f"alpha_lower={self.alpha_lower} > ess inf beta - eps0 = {b.min() - self.eps0:.6g}")
        if b.max() + self.eps0 > self.alpha_upper + tol:
            raise ConfigError(f"alpha_upper={self.alpha_upper} < ess sup beta + eps0 = {b.max() + self.eps0:.6g}")

    def value(self, state, eps: float = 0.0):
        if abs(eps) > self.eps0 + 1e-15:
            raise ConfigError(f"|eps|={abs(eps)} exceeds eps0={self.eps0}")
        g = self.beta(state) + eps * self.delta(state)
        if np.any(np.asarray(g) < self.alpha_lower - 1e-12) or np.any(np.asarray(g) > self.alpha_upper + 1e-12):
            raise ConfigError(f"parameter {g} outside [{self.alpha_lower}, {self.alpha_upper}]")
        return g

    # regime gates
    @property
    def clt_range(self) -> bool:
        return self.alpha_upper < 0.5

    @property
    def diff_range(self) -> bool:
        return self.alpha_upper < 0.2

    def special_diff_range(self, eta: float) -> bool:
        return 0.0 <= eta <= self.alpha_upper and self.alpha_upper < (1.0 + eta) / 5.0

    @property
    def unperturbed(self) -> bool:
        return self.delta.source.strip() in ("0", "0.0")


def parameter_at(params: ParameterProcess, base: BaseSystem, omega: BasePoint, eps: float = 0.0) -> float:
    return float(params.value(base.state(omega), eps))


def make_base(kind: str, *, angle=None, law=None, kernel=None, seed: int = 0) -> BaseSystem:
    if kind == "rotation":
        return IrrationalRotation(GOLDEN if angle is None else float(angle))
    if kind == "iid":
        if law is None:
            raise ConfigError("iid driver needs base.law")
        return IidSequence(law, seed)
    if kind == "markov":
        if kernel is None:
            raise ConfigError("markov driver needs base.kernel")
        return FiniteMarkov(kernel, seed)
    raise ConfigError(f"unknown base kind {kind!r}")
