"""Declarative experiment configuration (YAML) with regime gates applied at load."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

import numpy as np
import yaml

from .base import BaseSystem, ConfigError, ParameterProcess, make_base
from .grid import C2Function, const_function, cosine, identity_function

KINDS = ("density", "cones", "decay", "entrytime", "clt", "variance", "continuity", "response",
         "diffvar", "special")


@dataclass
class BaseConfig:
    kind: str = "rotation"
    angle: Optional[float] = None
    law: Optional[list] = None
    kernel: Optional[list] = None
    seed: int = 0


@dataclass
class ParamsConfig:
    beta_expr: str = "0.2+0.1*sin(2*pi*w)"
    delta_expr: str = "1"
    alpha_lower: float = 0.1
    alpha_upper: float = 0.3
    eps0: float = 0.0
    boundary: bool = False


@dataclass
class GridConfig:
    N: int = 4096
    p: float = 3.0


@dataclass
class ObservableConfig:
    """``family`` is constant or special.

    constant: ``F`` in {cos, identity, const} (with ``k`` / ``c``).
    special: u = x^gamma_obs, ``g`` in {identity, cos}, bound constant ``K``.
    """

    family: str = "constant"
    F: str = "cos"
    k: float = 1.0
    c: float = 0.0
    gamma_obs: float = 0.3
    g: str = "identity"
    K: float = 1.0


@dataclass
class Knobs:
    n: int = 10_000
    trials: int = 10_000
    n_max: int = 512
    K: int = 512
    eps_grid: list = field(default_factory=lambda: [0.0])
    omega_count: int = 16
    anchors: int = 5
    min_pass: Optional[int] = None
    depth: int = 2000
    fit_lo: Optional[int] = None
    fast_gamma: Optional[float] = None
    slack: float = 0.15
    tolerance: float = 0.25
    cone_a: Optional[float] = None
    cone_b1: Optional[float] = None
    cone_b2: Optional[float] = None


@dataclass
class ExperimentConfig:
    kind: str
    base: BaseConfig = field(default_factory=BaseConfig)
    params: ParamsConfig = field(default_factory=ParamsConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    observable: ObservableConfig = field(default_factory=ObservableConfig)
    knobs: Knobs = field(default_factory=Knobs)
    seed: int = 0
    cache_dir: Optional[str] = None
    out_dir: str = "runs/out"

    # -- construction ------------------------------------------------------
    def make_base(self) -> BaseSystem:
        b = self.base
        return make_base(b.kind, angle=b.angle, law=b.law, kernel=b.kernel, seed=b.seed)

    def make_params(self) -> ParameterProcess:
        p = self.params
        return ParameterProcess(p.beta_expr, p.delta_expr, p.alpha_lower, p.alpha_upper, p.eps0, p.boundary)

    def make_observable(self):
        from .stats import ObservableProcess
        o = self.observable
        if o.family == "constant":
            return ObservableProcess.constant(_named_function(o.F, o.k, o.c))
        u = C2Function(lambda x, e=o.gamma_obs: np.power(x, e), None, None, f"x^{o.gamma_obs}")
        return ObservableProcess.special(u, _named_function(o.g, o.k, o.c), o.gamma_obs, o.K)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"kind": d["kind"], "base": d["base"], "params": d["params"], "grid": d["grid"],
                "observable": d["observable"], "knobs": d["knobs"], "rng": {"seed": d["seed"]},
                "cache": {"dir": d["cache_dir"]}, "out": {"dir": d["out_dir"]}}

    def hash(self) -> str:
        """Digest of everything that determines the numbers (not the output or cache location)."""
        d = self.to_dict()
        d.pop("cache")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _named_function(name: str, k: float, c: float) -> C2Function:
    if name == "cos":
        return cosine(k)
    if name == "identity":
        return identity_function()
    if name in ("const", "zero"):
        return const_function(0.0 if name == "zero" else c)
    raise ConfigError(f"unknown function {name!r} (cos, identity, const, zero)")


def _section(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**raw)


TOP_KEYS = {"kind", "base", "params", "grid", "observable", "knobs", "rng", "cache", "out"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if raw.get("kind") not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}")
    rng = raw.get("rng") or {}
    cache = raw.get("cache") or {}
    out = raw.get("out") or {}
    for name, sec, allowed in (("rng", rng, {"seed"}), ("cache", cache, {"dir"}), ("out", out, {"dir"})):
        if not isinstance(sec, dict) or set(sec) - allowed:
            raise ConfigError(f"{name} accepts only {sorted(allowed)}")
    try:
        cfg = ExperimentConfig(
            kind=raw["kind"],
            base=_section(BaseConfig, raw.get("base"), "base"),
            params=_section(ParamsConfig, raw.get("params"), "params"),
            grid=_section(GridConfig, raw.get("grid"), "grid"),
            observable=_section(ObservableConfig, raw.get("observable"), "observable"),
            knobs=_section(Knobs, raw.get("knobs"), "knobs"),
            seed=int(rng.get("seed", 0)),
            cache_dir=cache.get("dir"),
            out_dir=out.get("dir", "runs/out"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def validate(cfg: ExperimentConfig) -> None:
    """Structural checks plus the regime gates; raises ConfigError before any compute."""
    from .response import RegimeError, check_diff_regime
    from .grid import make_grid

    if cfg.observable.family not in ("constant", "special"):
        raise ConfigError("observable.family must be constant or special")
    if cfg.observable.family == "special" and cfg.observable.gamma_obs < 0:
        raise ConfigError("gamma_obs must be >= 0")
    try:
        make_grid(cfg.grid.N, cfg.grid.p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    base = cfg.make_base()
    params = cfg.make_params()
    params.validate(base)
    obs = cfg.make_observable()
    kn = cfg.knobs
    eps = [float(e) for e in kn.eps_grid]
    if any(abs(e) > params.eps0 + 1e-15 for e in eps):
        raise ConfigError(f"eps_grid leaves [-eps0, eps0] with eps0={params.eps0}")
    if min(kn.n, kn.trials, kn.n_max, kn.K, kn.omega_count, kn.anchors, kn.depth) < 1:
        raise ConfigError("integer knobs must be positive")

    alpha = params.alpha
    special = cfg.observable.family == "special"
    if cfg.kind == "clt":
        if not (alpha < 0.5 or (special and cfg.observable.gamma_obs > 2 * alpha - 1)):
            raise ConfigError(f"clt needs alpha < 1/2 or a special observable with gamma_obs > 2 alpha - 1 "
                              f"(alpha={alpha})")
    if cfg.kind in ("variance", "continuity") and alpha >= 0.5 and not special:
        raise ConfigError("variance experiments need alpha < 1/2 for a generic observable")
    if cfg.kind == "special" and not special:
        raise ConfigError("kind 'special' needs observable.family = special")
    if cfg.kind in ("diffvar", "special"):
        try:
            check_diff_regime(params, obs)
        except RegimeError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg.kind in ("response", "continuity") and not eps:
        raise ConfigError(f"{cfg.kind} needs a non-empty eps_grid")
