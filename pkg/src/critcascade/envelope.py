"""Iterated-logarithm envelopes and their finite-horizon proxies.

The envelope functions are

    psi_k(t)     = 1 / prod_{i=1}^k log_(i) t,
    psi_k^eps(t) = psi_k(t) (log_(k) t)^(-eps),

where ``log_(i)`` is the ``i``-fold iterated logarithm.  "Almost all n" and
"infinitely many n" cannot be decided from a finite sample; this module
replaces them by explicit proxies:

* a.a.-proxy: no violation of the event for any ``n >= n0``;
* i.o.-proxy: the event holds at least once in every dyadic window
  ``[2^j, 2^(j+1))`` contained in ``[n0, N]``.

Masses are handled on the logarithmic scale throughout so that very small
ball masses do not underflow.
"""

from __future__ import annotations

import ast
import csv
import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import mpmath
import numpy as np

from .errors import DepthTooShallow, DomainError, NonpositiveMass

__all__ = [
    "PsiSpec",
    "IntegralClass",
    "HypothesisCheck",
    "Envelope",
    "EnvelopeReport",
    "LilSummary",
    "iterated_exp",
    "psi_value",
    "integral_test",
    "integral_test_numeric",
    "check_hypotheses",
    "psi_envelope",
    "lil_envelope",
    "lil_statistic",
    "envelope_exceedance",
    "dyadic_windows",
]


def iterated_exp(k: int) -> float:
    """``exp`` applied ``k`` times to 1 (``1`` for ``k = 0``)."""
    t = 1.0
    for _ in range(k):
        t = math.exp(t)
    return t


# ----------------------------------------------------------------------
# User expressions
# ----------------------------------------------------------------------
_ALLOWED_FUNCS = {"log": mpmath.log, "exp": mpmath.exp, "sqrt": mpmath.sqrt}
_ALLOWED_CONSTS = {"pi": mpmath.pi, "e": mpmath.e}


def _compile_expression(expr: str) -> Callable:
    """Compile an arithmetic expression in ``t`` using only log, exp, sqrt, pi, e."""
    tree = ast.parse(expr, mode="eval")
    ok_nodes = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
                ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)
    for node in ast.walk(tree):
        if not isinstance(node, ok_nodes):
            raise ValueError(f"unsupported syntax {type(node).__name__} in {expr!r}")
        if isinstance(node, ast.Name) and node.id not in _ALLOWED_FUNCS | _ALLOWED_CONSTS | {"t": None}:
            raise ValueError(f"unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_FUNCS):
            raise ValueError(f"only log, exp and sqrt may be called in {expr!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ValueError(f"non-numeric constant in {expr!r}")
    code = compile(tree, "<psi>", "eval")
    namespace = {"__builtins__": {}, **_ALLOWED_FUNCS, **_ALLOWED_CONSTS}

    def f(t):
        return eval(code, namespace, {"t": mpmath.mpf(t) if not isinstance(t, mpmath.mpf) else t})

    return f


# ----------------------------------------------------------------------
# Psi family
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class PsiSpec:
    """An envelope function ``psi``.

    Parameters
    ----------
    family : {"iterated", "perturbed", "user"}
    k : int
        Number of iterated logarithms (built-in families), ``k >= 1``.
    eps : float
        Perturbation exponent of the ``perturbed`` family, ``>= 0``.
    delta : float
        Regularity exponent: ``t^(1/2 - delta) psi(t)`` must eventually increase.
    expr : str, optional
        Expression in ``t`` for the ``user`` family (log, exp, sqrt, pi, e).
    t0 : float, optional
        Domain floor.  Defaults to ``exp^k(1)``, the smallest ``t`` at which
        every iterated logarithm up to order ``k`` is at least 1.
    """

    family: str = "iterated"
    k: int = 1
    eps: float = 0.0
    delta: float = 0.25
    expr: str | None = None
    t0: float | None = None
    _func: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in ("iterated", "perturbed", "user"):
            raise ValueError(f"unknown psi family {self.family!r}")
        if self.family == "user":
            if not self.expr:
                raise ValueError("the user family needs an expression")
            object.__setattr__(self, "_func", _compile_expression(self.expr))
            if self.t0 is None:
                object.__setattr__(self, "t0", math.e)
        else:
            if self.k < 1:
                raise ValueError("k must be >= 1")
            if self.eps < 0:
                raise ValueError("eps must be >= 0")
            if self.t0 is None:
                object.__setattr__(self, "t0", iterated_exp(self.k))
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 1/2)")

    def label(self) -> str:
        if self.family == "iterated":
            return f"psi_{self.k}"
        if self.family == "perturbed":
            return f"psi_{self.k}^({self.eps:g})"
        return f"user:{self.expr}"


def _psi_mp(spec: PsiSpec, t):
    """``psi(t)`` in mpmath arithmetic (``t`` may be astronomically large)."""
    t = mpmath.mpf(t)
    if spec.family == "user":
        return mpmath.mpf(spec._func(t))
    prod = mpmath.mpf(1)
    x = t
    for _ in range(spec.k):
        x = mpmath.log(x)
        prod *= x
    if spec.family == "perturbed" and spec.eps:
        prod *= x ** spec.eps
    return 1 / prod


def psi_value(spec: PsiSpec, t):
    """Evaluate ``psi`` at ``t`` (scalar or array).

    Raises
    ------
    DomainError
        If some ``t`` is below ``spec.t0``.
    """
    arr = np.asarray(t, dtype=float)
    if np.any(arr < spec.t0 * (1 - 1e-15)):
        raise DomainError(f"t below the domain floor {spec.t0!r}")
    if spec.family == "user":
        out = np.vectorize(lambda s: float(spec._func(s)), otypes=[float])(arr)
    else:
        x = arr.copy()
        prod = np.ones_like(arr)
        for _ in range(spec.k):
            x = np.log(x)
            prod = prod * x
        if spec.family == "perturbed" and spec.eps:
            prod = prod * x ** spec.eps
        out = 1.0 / prod
    return float(out) if np.ndim(out) == 0 else out


class IntegralClass(str, enum.Enum):
    """Outcome of the integral test for ``int^inf psi(t) / t dt``."""

    CONVERGENT = "convergent"
    DIVERGENT = "divergent"
    INCONCLUSIVE = "inconclusive"


def integral_test(spec: PsiSpec) -> IntegralClass:
    """Classify ``int^inf psi(t) / t dt``.

    Built-in families are classified analytically: substituting
    ``y = log_(k) t`` turns the integral into ``int^inf y^(-1-eps) dy``.
    User functions go through :func:`integral_test_numeric`.
    """
    if spec.family == "iterated":
        return IntegralClass.DIVERGENT
    if spec.family == "perturbed":
        return IntegralClass.CONVERGENT if spec.eps > 0 else IntegralClass.DIVERGENT
    return integral_test_numeric(spec)


def integral_test_numeric(spec: PsiSpec, depth: int = 3, ys=(6.0, 10.0), h: float = 1e-3,
                          divergent_above: float = -1.05, convergent_below: float = -1.15) -> IntegralClass:
    """Numerical classification from the tail density in ``y = log_(depth) t``.

    In the variable ``y`` the integrand becomes
    ``g(y) = psi(t) prod_{i=1}^{depth-1} log_(i) t``.  The local log-log
    slope ``d log g / d log y`` is computed at each point of ``ys`` (by a
    central difference in mpmath arithmetic).  The integral is declared
    divergent when every slope is at least ``divergent_above``, convergent
    when every slope is at most ``convergent_below``, and inconclusive
    otherwise.  The rule is exact for ``y^(-1-eps)`` tails and robust for
    tails that are polynomially or exponentially faster or slower.
    """
    mpmath.mp.prec = max(mpmath.mp.prec, 80)

    def log_g(y):
        y = mpmath.mpf(y)
        inner = [y]
        for _ in range(depth):
            inner.append(mpmath.exp(inner[-1]))
        t = inner[-1]
        # inner = [log_(depth) t, ..., log t, t]
        logs = inner[1:-1]
        val = _psi_mp(spec, t)
        if val <= 0:
            raise DomainError("psi must be positive")
        return mpmath.log(val) + sum(mpmath.log(v) for v in logs)

    slopes = []
    for y in ys:
        lo, hi = y * math.exp(-h), y * math.exp(h)
        slopes.append(float((log_g(hi) - log_g(lo)) / (2 * h)))
    if all(s >= divergent_above for s in slopes):
        return IntegralClass.DIVERGENT
    if all(s <= convergent_below for s in slopes):
        return IntegralClass.CONVERGENT
    return IntegralClass.INCONCLUSIVE


@dataclass(frozen=True)
class HypothesisCheck:
    """Grid check of the regularity hypotheses on ``psi``."""

    decreasing: bool
    increasing_from: float | None
    label: str


def check_hypotheses(spec: PsiSpec, log_t_max: float = 1e6, points: int = 400) -> HypothesisCheck:
    """Check on a grid that ``psi`` decreases and ``t^(1/2-delta) psi(t)`` eventually increases.

    The grid is logarithmic in ``log t`` from ``log t0`` to ``log_t_max``.
    ``increasing_from`` is the smallest grid point beyond which
    ``t^(1/2-delta) psi(t)`` increases at every grid step (None if never).
    """
    lo = math.log(max(spec.t0, 1.0 + 1e-12))
    grid = np.geomspace(max(lo, 1e-6), log_t_max, points)
    vals = np.array([float(mpmath.log(_psi_mp(spec, mpmath.exp(x)))) for x in grid])
    decreasing = bool(np.all(np.diff(vals) <= 1e-14 * np.maximum(1.0, np.abs(vals[1:]))))
    h = (0.5 - spec.delta) * grid + vals
    inc = np.diff(h) > 0
    start = None
    for i in range(len(inc) - 1, -1, -1):
        if not inc[i]:
            break
        start = float(math.exp(grid[i])) if grid[i] < 700 else math.inf
    label = "hypothesis-checked: grid-only" if spec.family == "user" else "built-in"
    return HypothesisCheck(decreasing, start, label)


# ----------------------------------------------------------------------
# Envelopes
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Envelope:
    """A deterministic envelope ``phi`` given by ``log phi(n)``."""

    log_phi: Callable[[np.ndarray], np.ndarray]
    label: str = ""

    def __call__(self, n):
        return np.exp(self.log_phi(np.asarray(n, dtype=float)))


def psi_envelope(spec: PsiSpec) -> Envelope:
    """``phi(n) = exp(-sqrt(n) psi(n))``; ``n`` below ``t0`` gives ``phi = 1``."""

    def log_phi(n):
        n = np.asarray(n, dtype=float)
        out = np.zeros_like(n)
        ok = n >= spec.t0
        out[ok] = -np.sqrt(n[ok]) * psi_value(spec, n[ok])
        return out

    return Envelope(log_phi, f"exp(-sqrt(n) {spec.label()})")


def lil_envelope(sigma2: float, factor: float) -> Envelope:
    """``phi(n) = exp(-factor sqrt(2 sigma2 n log log n))`` (``phi = 1`` for ``n <= e``)."""

    def log_phi(n):
        n = np.asarray(n, dtype=float)
        ll = np.log(np.log(np.maximum(n, math.e)))
        return -factor * np.sqrt(2.0 * sigma2 * n * ll)

    return Envelope(log_phi, f"exp(-{factor:g} sqrt(2 s2 n loglog n))")


# ----------------------------------------------------------------------
# LIL statistic
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LilSummary:
    """Per-path LIL statistics and their quantiles."""

    values: np.ndarray
    quantiles: dict
    N: int
    window: tuple

    @property
    def median(self) -> float:
        return float(np.median(self.values))


def lil_statistic(paths: np.ndarray, sigma2: float, min_depth: int = 10_000) -> LilSummary:
    """``max_{N/2 <= n <= N} S_n / sqrt(2 sigma2 n log log n)`` for each path.

    Parameters
    ----------
    paths : ndarray, shape (reps, N)
        Column ``i`` holds ``S_{i+1}``.
    sigma2 : float
        Step variance.
    min_depth : int
        Smallest admissible ``N``.

    Raises
    ------
    DepthTooShallow
        If ``N < min_depth``.
    """
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    N = paths.shape[1]
    if N < max(min_depth, 32):
        raise DepthTooShallow(f"depth {N} below {max(min_depth, 32)}")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    lo = N // 2
    n = np.arange(lo, N + 1, dtype=float)
    norm = np.sqrt(2.0 * n * np.log(np.log(n)))
    vals = (paths[:, lo - 1:N] / norm[None, :]).max(axis=1) / math.sqrt(sigma2)
    qs = {q: float(np.quantile(vals, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return LilSummary(vals, qs, N, (lo, N))


# ----------------------------------------------------------------------
# Exceedance reports
# ----------------------------------------------------------------------
def dyadic_windows(n0: int, n_max: int) -> list[tuple[int, int]]:
    """Windows ``[2^j, 2^(j+1))`` contained in ``[n0, n_max]`` (half-open upper end)."""
    out = []
    j = 0
    while 2 ** (j + 1) - 1 <= n_max:
        if 2**j >= n0:
            out.append((2**j, 2 ** (j + 1)))
        j += 1
    return out


@dataclass(frozen=True)
class EnvelopeReport:
    """Finite-horizon a.a. and i.o. proxies of an envelope comparison.

    With ``sense="below"`` the a.a. event is ``mass <= phi(n)`` and the i.o.
    event is ``mass >= phi(n)``; ``sense="above"`` swaps both inequalities.

    Attributes
    ----------
    ns : ndarray
    log_phi : ndarray
        ``log phi(n)``.
    neg_log_mass : ndarray, shape (reps, len(ns))
    aa_event, io_event : ndarray of bool, shape (reps, len(ns))
    aa_violations : ndarray of int, shape (reps,)
        Number of ``n >= n0`` where the a.a. event fails.
    window_hits : ndarray of int, shape (reps, n_windows)
        Number of i.o. events in each dyadic window.
    aa_fraction : float
        Fraction of replicas with no a.a. violation beyond ``n0``.
    io_fraction : float
        Fraction of replicas with at least one i.o. event in every window
        (nan when no window fits).
    """

    ns: np.ndarray
    log_phi: np.ndarray
    neg_log_mass: np.ndarray
    aa_event: np.ndarray
    io_event: np.ndarray
    aa_violations: np.ndarray
    window_hits: np.ndarray
    windows: list
    n0: int
    sense: str
    aa_fraction: float
    io_fraction: float
    label: str = ""

    def summary(self) -> dict:
        return {
            "label": self.label,
            "sense": self.sense,
            "n0": self.n0,
            "reps": int(self.neg_log_mass.shape[0]),
            "windows": [list(w) for w in self.windows],
            "aa_fraction": self.aa_fraction,
            "io_fraction": self.io_fraction,
            "aa_violation_total": int(self.aa_violations.sum()),
            "replicas_with_aa_violation": int((self.aa_violations > 0).sum()),
            "replicas_hitting_all_windows": int(np.all(self.window_hits > 0, axis=1).sum()) if self.windows else 0,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        """Rows ``replica, n, log_phi, neg_log_mass, aa_event, io_event``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replica", "n", "log_phi", "neg_log_mass", "aa_event", "io_event"])
            for r in range(self.neg_log_mass.shape[0]):
                for i, n in enumerate(self.ns):
                    w.writerow([r, int(n), repr(float(self.log_phi[i])), repr(float(self.neg_log_mass[r, i])),
                                int(self.aa_event[r, i]), int(self.io_event[r, i])])


def envelope_exceedance(ns, masses=None, phi=None, n0: int = 1, *, log_masses=None,
                        sense: str = "below", windows: str = "dyadic") -> EnvelopeReport:
    """Compare per-replica mass sequences with an envelope.

    Parameters
    ----------
    ns : array of int
        Generations, increasing.
    masses : ndarray, shape (reps, len(ns)), optional
        Positive masses.  Alternatively pass ``log_masses``.
    phi : Envelope or callable
        Envelope; a plain callable returns ``phi(n)`` (``0`` and ``inf`` allowed).
    n0 : int
        Start of the a.a. range and lower end for the i.o. windows.
    sense : {"below", "above"}
    windows : {"dyadic"}

    Raises
    ------
    NonpositiveMass
        If some mass is not strictly positive.
    """
    if windows != "dyadic":
        raise ValueError("only dyadic windows are supported")
    if sense not in ("below", "above"):
        raise ValueError("sense must be 'below' or 'above'")
    ns = np.asarray(ns, dtype=np.int64)
    if masses is not None:
        m = np.atleast_2d(np.asarray(masses, dtype=float))
        if np.any(~(m > 0)):
            raise NonpositiveMass("masses must be strictly positive")
        logm = np.log(m)
    elif log_masses is not None:
        logm = np.atleast_2d(np.asarray(log_masses, dtype=float))
        if np.any(~np.isfinite(logm)):
            raise NonpositiveMass("log masses must be finite")
    else:
        raise ValueError("masses or log_masses is required")
    if logm.shape[1] != len(ns):
        raise ValueError("mass columns do not match ns")
    if isinstance(phi, Envelope):
        lphi = np.asarray(phi.log_phi(ns.astype(float)), dtype=float)
        label = phi.label
    else:
        with np.errstate(divide="ignore"):
            lphi = np.log(np.asarray(phi(ns.astype(float)), dtype=float) * np.ones(len(ns)))
        label = getattr(phi, "__name__", "")
    if sense == "below":
        aa = logm <= lphi[None, :]
        io = logm >= lphi[None, :]
    else:
        aa = logm >= lphi[None, :]
        io = logm <= lphi[None, :]
    beyond = ns >= n0
    viol = (~aa[:, beyond]).sum(axis=1)
    wins = dyadic_windows(n0, int(ns.max()) if len(ns) else 0)
    hits = np.zeros((logm.shape[0], len(wins)), dtype=np.int64)
    for j, (a, b) in enumerate(wins):
        sel = (ns >= a) & (ns < b)
        hits[:, j] = io[:, sel].sum(axis=1)
    aa_frac = float(np.mean(viol == 0))
    io_frac = float(np.mean(np.all(hits > 0, axis=1))) if wins else math.nan
    return EnvelopeReport(ns, lphi, -logm, aa, io, viol, hits, wins, int(n0), sense, aa_frac, io_frac, label)
