"""Experiment configuration documents.

A configuration is a sectioned key-value text file read with
:mod:`configparser`::

    [experiment]
    kind = spine-envelope
    seed = 20240611
    reps = 200
    workers = 1
    out = runs/envelope

    [model]
    kind = lattice

    [params]
    alpha = 8
    depth = 10000
    side_depth = 20
    tail_window = 30000

Unknown sections or keys are rejected.  :func:`dump_config` writes every
field, so ``parse -> dump -> parse`` is the identity.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigInvalid
from .offspring import (
    OffspringLaw,
    finite_atom_law,
    gaussian_boundary_model,
    gaussian_law,
    lattice_boundary_model,
    normalize_to_boundary,
)

__all__ = [
    "EXPERIMENT_KINDS",
    "MODEL_KINDS",
    "ModelConfig",
    "ParamsConfig",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "build_law",
]

EXPERIMENT_KINDS = (
    "model-diagnose",
    "grow",
    "tree-martingales",
    "renewal",
    "conditioned-walk",
    "spine",
    "spine-envelope",
    "phase-scan",
    "verify",
)
MODEL_KINDS = ("lattice", "gaussian", "finite-atom", "gaussian-template")


def _pairs(text: str) -> tuple[tuple[float, float], ...]:
    """Parse ``"v1:p1, v2:p2"``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            a, b = item.split(":")
            out.append((float(a), float(b)))
        except ValueError as exc:
            raise ConfigInvalid(f"bad value:probability pair {item!r}") from exc
    return tuple(out)


def _fmt_pairs(pairs) -> str:
    return ", ".join(f"{_fmt_float(a)}:{_fmt_float(b)}" for a, b in pairs)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigInvalid(f"bad number list {text!r}") from exc


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigInvalid(f"bad boolean {text!r}")


@dataclass(frozen=True)
class ModelConfig:
    """The ``[model]`` section.

    ``atoms`` and ``counts`` are ``value:probability`` lists; ``mean`` and
    ``variance`` parametrize a Gaussian template.
    """

    kind: str = "lattice"
    atoms: tuple = ()
    counts: tuple = ((2.0, 1.0),)
    mean: float = 0.0
    variance: float = 1.0
    boundary_normalize: bool = False


@dataclass(frozen=True)
class ParamsConfig:
    """The ``[params]`` section (all numeric experiment parameters)."""

    depth: int = 12
    alpha: tuple = (2.0,)
    side_depth: int = 20
    tail_window: int = 0
    window: int = 0
    cap: int = 2**25
    side_cap: int = 2**20
    side_mode: str = "pool"
    pool_size: int = 4096
    betas: tuple = (0.5, 1.0, 2.0)
    psi: str = "perturbed:1:1"
    delta: float = 0.3
    n0: int = 100
    steps: int = 100
    u_max: float = 60.0
    renewal_method: str = "auto"
    mc_budget: int = 10**6
    block: int = 16
    retain_trees: bool = False
    profile: str = "full"


_INT = {"depth", "side_depth", "tail_window", "window", "cap", "side_cap", "pool_size", "n0", "steps",
        "mc_budget", "block"}
_FLOAT = {"delta", "u_max"}
_FLOATS = {"alpha", "betas"}
_STR = {"side_mode", "psi", "renewal_method", "profile"}
_BOOL = {"retain_trees"}


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete experiment description."""

    kind: str = "tree-martingales"
    seed: int = 1
    reps: int = 16
    workers: int = 1
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    params: ParamsConfig = field(default_factory=ParamsConfig)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigInvalid(f"unknown experiment kind {self.kind!r}")
        if self.model.kind not in MODEL_KINDS:
            raise ConfigInvalid(f"unknown model kind {self.model.kind!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")
        if self.reps < 1 or self.workers < 1:
            raise ConfigInvalid("reps and workers must be positive")
        p = self.params
        if p.depth < 0 or p.side_depth < 0 or p.tail_window < 0 or p.steps < 1 or p.block < 1:
            raise ConfigInvalid("depth, side_depth, tail_window must be >= 0; steps, block >= 1")
        if any(a < 0 for a in p.alpha):
            raise ConfigInvalid("alpha must be non-negative")
        if any(b <= 0 for b in p.betas):
            raise ConfigInvalid("betas must be positive")
        if p.side_mode not in ("trees", "pool"):
            raise ConfigInvalid("side_mode must be 'trees' or 'pool'")
        if p.renewal_method not in ("auto", "exact-lattice", "wiener-hopf", "monte-carlo"):
            raise ConfigInvalid(f"unknown renewal method {p.renewal_method!r}")
        if p.profile not in ("quick", "full"):
            raise ConfigInvalid("profile must be 'quick' or 'full'")
        if not 0 < p.delta < 1:
            raise ConfigInvalid("delta must lie in (0, 1)")
        m = self.model
        if m.kind == "finite-atom" and not m.atoms:
            raise ConfigInvalid("finite-atom models need atoms")
        if m.kind == "gaussian-template" and m.variance <= 0:
            raise ConfigInvalid("variance must be positive")
        return self

    def canonical(self) -> str:
        return dump_config(self)

    def hash(self) -> str:
        """SHA-256 of the canonical serialization."""
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None}).validate()


def parse_config(text: str) -> ExperimentConfig:
    """Parse a configuration document.

    Raises
    ------
    ConfigInvalid
        On unknown sections or keys, malformed values, or out-of-range values.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(str(exc)) from exc
    extra = set(cp.sections()) - {"experiment", "model", "params"}
    if extra:
        raise ConfigInvalid(f"unknown sections {sorted(extra)}")
    exp_kw, model_kw, params_kw = {}, {}, {}
    if cp.has_section("experiment"):
        for key, val in cp.items("experiment"):
            if key in ("seed", "reps", "workers"):
                try:
                    exp_kw[key] = int(val)
                except ValueError as exc:
                    raise ConfigInvalid(f"{key} must be an integer") from exc
            elif key in ("kind", "out"):
                exp_kw[key] = val.strip()
            else:
                raise ConfigInvalid(f"unknown key {key!r} in [experiment]")
    if cp.has_section("model"):
        for key, val in cp.items("model"):
            if key == "kind":
                model_kw[key] = val.strip()
            elif key in ("atoms", "counts"):
                model_kw[key] = _pairs(val)
            elif key in ("mean", "variance"):
                try:
                    model_kw[key] = float(val)
                except ValueError as exc:
                    raise ConfigInvalid(f"{key} must be a number") from exc
            elif key == "boundary_normalize":
                model_kw[key] = _bool(val)
            else:
                raise ConfigInvalid(f"unknown key {key!r} in [model]")
    if cp.has_section("params"):
        for key, val in cp.items("params"):
            try:
                if key in _INT:
                    params_kw[key] = int(val)
                elif key in _FLOAT:
                    params_kw[key] = float(val)
                elif key in _FLOATS:
                    params_kw[key] = _floats(val)
                elif key in _STR:
                    params_kw[key] = val.strip()
                elif key in _BOOL:
                    params_kw[key] = _bool(val)
                else:
                    raise ConfigInvalid(f"unknown key {key!r} in [params]")
            except ValueError as exc:
                raise ConfigInvalid(f"bad value for {key!r}: {val!r}") from exc
    cfg = ExperimentConfig(**exp_kw, model=ModelConfig(**model_kw), params=ParamsConfig(**params_kw))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize every field in a fixed order."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["experiment"] = {"kind": cfg.kind, "seed": str(cfg.seed), "reps": str(cfg.reps),
                        "workers": str(cfg.workers), "out": cfg.out}
    m = cfg.model
    cp["model"] = {"kind": m.kind, "atoms": _fmt_pairs(m.atoms), "counts": _fmt_pairs(m.counts),
                   "mean": _fmt_float(m.mean), "variance": _fmt_float(m.variance),
                   "boundary_normalize": str(m.boundary_normalize).lower()}
    params = {}
    for f in fields(ParamsConfig):
        v = getattr(cfg.params, f.name)
        if f.name in _FLOATS:
            params[f.name] = ", ".join(_fmt_float(x) for x in v)
        elif f.name in _FLOAT:
            params[f.name] = _fmt_float(v)
        elif f.name in _BOOL:
            params[f.name] = str(v).lower()
        else:
            params[f.name] = str(v)
    cp["params"] = params
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def build_law(model: ModelConfig) -> OffspringLaw:
    """Instantiate the offspring law described by ``[model]``."""
    if model.kind == "lattice":
        return lattice_boundary_model()
    if model.kind == "gaussian":
        return gaussian_boundary_model()
    cv = tuple(int(round(c)) for c, _ in model.counts)
    cp = tuple(p for _, p in model.counts)
    if model.kind == "finite-atom":
        law = finite_atom_law(tuple(a for a, _ in model.atoms), tuple(p for _, p in model.atoms), cv, cp)
    elif model.kind == "gaussian-template":
        law = gaussian_law(model.mean, model.variance, cv, cp)
    else:
        raise ConfigInvalid(f"unknown model kind {model.kind!r}")
    return normalize_to_boundary(law) if model.boundary_normalize else law
