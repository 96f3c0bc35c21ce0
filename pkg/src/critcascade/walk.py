"""The associated random walk, its renewal function and the conditioned walk.

The associated walk ``S`` has step law ``E[f(S_1)] = E[sum_i f(V_i) exp(-V_i)]``.
Its renewal function

    R(u) = E[ sum_{j < tau+} 1{S_j >= -u} ],   tau+ = inf{k >= 1 : S_k >= 0},

equals ``sum_k P[H_k >= -u]`` over the strictly descending ladder heights and
is harmonic for the walk killed below zero:
``R(u) = E[R(S_1 + u) 1{S_1 >= -u}]``.  The Doob transform with ``R(. + alpha)``
gives the walk conditioned to stay in ``[-alpha, inf)``.

Three renewal builders are available:

``exact-lattice``
    For lattice walks that only move down by one lattice step (the built-in
    lattice model).  Every descending ladder height is then exactly one span,
    so ``R(k d) = k + 1``.
``wiener-hopf``
    For Gaussian walks.  Spitzer's identity gives the Laplace transform

        int_0^inf exp(-lam u) R(u) du
            = (1/lam) exp( sum_n (1/(2n)) erfcx(lam sigma sqrt(n/2)) ),

    which is inverted numerically with the Euler (binomial averaging)
    algorithm.  Accuracy is around 1e-8.
``monte-carlo``
    Any walk: direct simulation of the defining expectation with a step cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, special

from .errors import (
    DomainError,
    HorizonExceeded,
    MethodMismatch,
    NotBoundaryNormalized,
    StateBelowBarrier,
)
from .offspring import OffspringLaw, boundary_diagnostics

__all__ = [
    "renewal_tilted_normal",
    "WalkLaw",
    "RenewalTable",
    "LadderSummary",
    "Residual",
    "ConditionedPath",
    "MinTailEstimate",
    "associated_walk",
    "ladder_heights",
    "build_renewal",
    "renewal_identity_residual",
    "conditioned_step",
    "conditioned_steps",
    "conditioned_path",
    "conditioned_paths",
    "iter_conditioned",
    "stay_above_probability",
    "stay_above_monte_carlo",
    "min_tail_probability",
    "kernel_mass",
    "kernel_probabilities",
    "BARRIER_TOL",
]

#: Slack used when comparing lattice positions with the barrier.
BARRIER_TOL = 1e-9


# ----------------------------------------------------------------------
# Walk law
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class WalkLaw:
    """Step law of a centered random walk.

    Attributes
    ----------
    family : str
        ``"atoms"`` or ``"gaussian"``.
    atoms, probs : tuple
        Support and weights (atoms family).
    mean, variance : float
        Mean (zero up to rounding) and variance of one step.
    span : float or None
        Lattice span when the atoms lie in ``span * Z``.
    source : str
        Fingerprint of the offspring law the walk was derived from.
    """

    family: str
    atoms: tuple = ()
    probs: tuple = ()
    mean: float = 0.0
    variance: float = 0.0
    span: float | None = None
    source: str = ""

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("walk variance must be positive")
        if abs(self.mean) >= 1e-9:
            raise NotBoundaryNormalized(f"walk mean {self.mean!r} is not zero")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)

    @property
    def is_lattice(self) -> bool:
        return self.span is not None

    @property
    def skip_free_down(self) -> bool:
        """True when the walk lives on a lattice and moves down by at most one span."""
        return self.is_lattice and min(self.atoms) >= -self.span * (1 + 1e-9)

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        """Independent steps with the given array shape."""
        if self.family == "gaussian":
            return self.sigma * rng.standard_normal(shape)
        atoms = np.asarray(self.atoms, dtype=float)
        if len(atoms) == 2:
            return np.where(rng.random(shape) < self.probs[0], atoms[0], atoms[1])
        cdf = np.cumsum(self.probs)
        idx = np.searchsorted(cdf, rng.random(shape) * cdf[-1], side="right")
        return atoms[np.minimum(idx, len(atoms) - 1)]

    def fingerprint(self) -> str:
        if self.family == "gaussian":
            return f"gaussian(0,{self.variance:.12g})"
        return "atoms(" + ";".join(f"{a:.12g}:{p:.12g}" for a, p in zip(self.atoms, self.probs)) + ")"


def associated_walk(law: OffspringLaw, tol: float = 1e-6) -> WalkLaw:
    """Many-to-one walk of a boundary-normalized law.

    Raises
    ------
    NotBoundaryNormalized
        If ``|m0 - 1|`` or ``|m1|`` exceeds ``tol``.
    """
    diag = boundary_diagnostics(law, "quadrature")
    if not diag.is_boundary(tol):
        raise NotBoundaryNormalized(f"m0={diag.m0!r}, m1={diag.m1!r}")
    if law.family == "atoms":
        u = np.asarray(law.atoms, dtype=float)
        w = law.mean_count * np.asarray(law.atom_probs) * np.exp(-u)
        w = w / w.sum()
        mean = float(np.dot(w, u))
        var = float(np.dot(w, u * u) - mean * mean)
        return WalkLaw("atoms", tuple(float(a) for a in u), tuple(float(p) for p in w),
                       mean=mean if abs(mean) > 1e-12 else 0.0, variance=var,
                       span=law.lattice_span, source=law.fingerprint())
    # exp(-u) N(m, s2)(du) is proportional to N(m - s2, s2)(du)
    mean = law.mean - law.variance
    return WalkLaw("gaussian", mean=mean if abs(mean) > 1e-12 else 0.0,
                   variance=law.variance, source=law.fingerprint())


# ----------------------------------------------------------------------
# Excursion simulation helpers
# ----------------------------------------------------------------------
_BLOCK_ELEMS = 1 << 22


def _excursions(walk: WalkLaw, reps: int, rng: np.random.Generator, cap: int, stop, visit=None):
    """Run ``reps`` walks from 0 in growing blocks of steps until ``stop`` fires.

    ``stop(S)`` marks positions ending the excursion; ``visit(ids, S)`` sees
    every position strictly before the stopping one.  Returns the stopping
    positions (nan when the cap was hit) and the number of steps used.
    """
    pos = np.zeros(reps)
    end = np.full(reps, np.nan)
    steps_used = np.zeros(reps, dtype=np.int64)
    active = np.arange(reps)
    t = 0
    block = 16
    while len(active) and t < cap:
        b = int(min(block, cap - t, max(1, _BLOCK_ELEMS // len(active))))
        path = pos[active, None] + np.cumsum(walk.sample((len(active), b), rng), axis=1)
        hits = stop(path)
        anyhit = hits.any(axis=1)
        first = np.where(anyhit, hits.argmax(axis=1), b)
        if visit is not None:
            cols = np.arange(b)
            before = cols[None, :] < first[:, None]
            rows = np.broadcast_to(active[:, None], path.shape)[before]
            visit(rows, path[before])
        done = active[anyhit]
        end[done] = path[anyhit, first[anyhit]]
        steps_used[active] += first + anyhit
        pos[active] = path[:, -1]
        active = active[~anyhit]
        t += b
        block *= 2
    return end, steps_used


@dataclass(frozen=True)
class LadderSummary:
    """First strictly descending ladder heights.

    ``heights`` excludes paths that hit the step cap; ``overflow`` counts them.
    """

    heights: np.ndarray
    mean_abs: float
    se: float
    overflow: int
    cap: int


def ladder_heights(walk: WalkLaw, reps: int, rng: np.random.Generator, cap: int = 10**7,
                   max_overflow_fraction: float = 0.01) -> LadderSummary:
    """Sample the first strictly descending ladder height ``H_1``.

    Raises
    ------
    HorizonExceeded
        If more than ``max_overflow_fraction`` of the paths hit ``cap``
        without going below zero.
    """
    if reps <= 0:
        raise ValueError("reps must be positive")
    end, _ = _excursions(walk, reps, rng, cap, lambda s: s < 0)
    ok = ~np.isnan(end)
    overflow = int(reps - ok.sum())
    if overflow > max_overflow_fraction * reps:
        raise HorizonExceeded(f"{overflow} of {reps} paths did not descend within {cap} steps")
    h = end[ok]
    a = np.abs(h)
    se = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
    return LadderSummary(h, float(a.mean()), se, overflow, cap)


# ----------------------------------------------------------------------
# Renewal table
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class RenewalTable:
    """Tabulated renewal function with a linear extension.

    Evaluation (``table(u)``) returns 0 for ``u < 0``, interpolates on
    ``[0, u_max]`` (step function on lattices, cubic spline for the
    Wiener–Hopf table, linear for Monte Carlo tables), and continues linearly
    with slope ``c0`` beyond ``u_max``.
    """

    u: np.ndarray
    values: np.ndarray
    se: np.ndarray
    step: float
    c0: float
    mean_abs_h1: float
    mean_abs_h1_se: float
    method: str
    interp: str
    walk_fingerprint: str = ""
    c3: float = field(default=float("nan"))
    slope_se: float = 0.0
    _coef: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def u_max(self) -> float:
        return float(self.u[-1])

    @property
    def lattice(self) -> bool:
        return self.interp == "step"

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        out = np.zeros(u.shape)
        h = self.step
        last = len(self.values) - 1
        if self.interp == "step":
            k = np.floor(u / h + BARRIER_TOL)
            pos = k >= 0
            inside = pos & (k <= last)
            out[inside] = self.values[k[inside].astype(np.int64)]
            beyond = k > last
            out[beyond] = self.values[-1] + (k[beyond] - last) * h * self.c0
        else:
            inside = (u >= 0) & (u <= self.u_max)
            x = u[inside]
            if self.interp == "cubic":
                i = np.minimum((x / h).astype(np.int64), last - 1)
                t = x - i * h
                c = self._coef
                out[inside] = ((c[0, i] * t + c[1, i]) * t + c[2, i]) * t + c[3, i]
            else:
                out[inside] = np.interp(x, self.u, self.values)
            beyond = u > self.u_max
            out[beyond] = self.values[-1] + self.c0 * (u[beyond] - self.u_max)
        return float(out[0]) if scalar else out

    def scaled(self, factor: float) -> "RenewalTable":
        """Copy with every value multiplied by ``factor`` (for negative controls)."""
        return _make_table(self.u, self.values * factor, self.se * factor, self.step,
                           self.c0 * factor, self.mean_abs_h1, self.mean_abs_h1_se,
                           self.method, self.interp, self.walk_fingerprint)

    def fitted_slope(self) -> tuple[float, float]:
        """Least-squares slope of the table on ``[u_max / 2, u_max]`` and its SE.

        For Monte Carlo tables the SE comes from the spread of the per-path
        slopes (the fit is linear in the per-path counting curves); it is
        zero for deterministic tables.
        """
        sel = self.u >= 0.5 * self.u_max
        x, y = self.u[sel], self.values[sel]
        xc = x - x.mean()
        slope = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
        return slope, self.slope_se

    def to_csv(self, path) -> None:
        """Write ``u,R,SE`` rows with a commented metadata header."""
        with open(path, "w") as fh:
            fh.write(f"# method={self.method}\n# interp={self.interp}\n")
            fh.write(f"# walk={self.walk_fingerprint}\n# c0={float(self.c0)!r}\n")
            fh.write(f"# mean_abs_h1={float(self.mean_abs_h1)!r}\n# mean_abs_h1_se={float(self.mean_abs_h1_se)!r}\n")
            fh.write(f"# step={float(self.step)!r}\n")
            fh.write("u,R,SE\n")
            for a, b, c in zip(self.u, self.values, self.se):
                fh.write(f"{float(a)!r},{float(b)!r},{float(c)!r}\n")

    @classmethod
    def from_csv(cls, path) -> "RenewalTable":
        meta = {}
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    meta[k.strip()] = v
                elif line.startswith("u,"):
                    continue
                elif line.strip():
                    rows.append([float(x) for x in line.split(",")])
        arr = np.asarray(rows)
        return _make_table(arr[:, 0], arr[:, 1], arr[:, 2], float(meta["step"]), float(meta["c0"]),
                           float(meta["mean_abs_h1"]), float(meta["mean_abs_h1_se"]),
                           meta["method"], meta["interp"], meta.get("walk", ""))


def _fit_c3(table: RenewalTable) -> float:
    """Smallest ``c3`` with ``R(u + x) - R(u) <= c3 (1 + x)`` on the grid, plus a margin."""
    v = table.values
    k = len(v)
    if k > 3000:
        idx = np.unique(np.linspace(0, k - 1, 3000).astype(np.int64))
    else:
        idx = np.arange(k)
    u = table.u[idx]
    vv = v[idx]
    diff = vv[None, :] - vv[:, None]
    dx = u[None, :] - u[:, None]
    ratio = np.where(dx >= 0, diff / (1.0 + np.maximum(dx, 0.0)), -np.inf)
    best = max(float(ratio.max()), table.c0, float(v[0]))
    # the margin covers interpolation between grid points
    return 1.05 * best + 0.05


def _make_table(u, values, se, step, c0, mean_abs, mean_abs_se, method, interp, fingerprint):
    coef = None
    if interp == "cubic":
        coef = interpolate.CubicSpline(u, values, bc_type="not-a-knot").c
    t = RenewalTable(np.asarray(u, float), np.asarray(values, float), np.asarray(se, float),
                     float(step), float(c0), float(mean_abs), float(mean_abs_se), method, interp,
                     fingerprint, _coef=coef)
    object.__setattr__(t, "c3", _fit_c3(t))
    for arr in (t.u, t.values, t.se):
        arr.setflags(write=False)
    return t


def _wh_log_transform(lam: np.ndarray, sigma: float, cutoff: float = 12.0, nmin: int = 64,
                      terms: int = 7) -> np.ndarray:
    """``sum_n erfcx(c sqrt n) / (2n)`` with ``c = lam sigma / sqrt 2`` (complex ``lam``).

    Terms up to ``N`` are summed directly; the remainder uses the asymptotic
    expansion of ``erfcx`` together with Hurwitz zeta tails, which is
    accurate once ``|c| sqrt(N) >= cutoff``.
    """
    c = lam * sigma / math.sqrt(2.0)
    out = np.empty(c.shape, dtype=complex)
    for idx, cc in np.ndenumerate(c):
        n_direct = max(nmin, int(math.ceil((cutoff / abs(cc)) ** 2)))
        n = np.arange(1, n_direct + 1)
        s = np.sum(special.erfcx(cc * np.sqrt(n)) / (2.0 * n))
        # erfcx(z) ~ (1/(z sqrt pi)) sum_j (-1)^j (2j-1)!! / (2 z^2)^j
        tail = 0.0
        dfact = 1.0
        for j in range(terms):
            if j > 0:
                dfact *= 2 * j - 1
            coef = (-1) ** j * dfact / (2.0**j * math.sqrt(math.pi) * cc ** (2 * j + 1))
            tail += coef * special.zeta(j + 1.5, n_direct + 1) / 2.0
        out[idx] = s + tail
    return out


def _wiener_hopf_values(u: np.ndarray, sigma: float, a_param: float = 25.0, n_terms: int = 20,
                        m_avg: int = 12) -> np.ndarray:
    """Renewal function of the ``N(0, sigma^2)`` walk at ``u > 0`` by Euler inversion."""
    k = np.arange(n_terms + m_avg + 1)
    binom = np.array([math.comb(m_avg, j) for j in range(m_avg + 1)]) / 2.0**m_avg
    out = np.empty(len(u))
    for i, t in enumerate(u):
        lam = (a_param + 2j * math.pi * k) / (2.0 * t)
        vals = (np.exp(_wh_log_transform(lam, sigma)) / lam).real
        terms = vals * (-1.0) ** k
        terms[0] = vals[0] / 2.0
        partial = np.cumsum(terms) * math.exp(a_param / 2.0) / t
        out[i] = float(np.dot(binom, partial[n_terms:]))
    return out


def build_renewal(walk: WalkLaw, u_max: float | None = None, grid: float | None = None,
                  method: str | None = None, reps: int = 20_000,
                  rng: np.random.Generator | None = None, cap: int = 10**6,
                  ladder_reps: int | None = None) -> RenewalTable:
    """Tabulate the renewal function of ``walk``.

    Parameters
    ----------
    walk : WalkLaw
    u_max : float
        Table range; defaults to ``50 sigma``.
    grid : float
        Grid step; forced to the span for lattice walks, defaults to
        ``sigma / 50`` otherwise.
    method : {"exact-lattice", "wiener-hopf", "monte-carlo"}
        Default: ``exact-lattice`` for downward skip-free lattice walks,
        ``wiener-hopf`` for Gaussian walks, ``monte-carlo`` otherwise.
    reps, rng, cap : Monte Carlo settings (paths, generator, step cap).
    ladder_reps : int
        Paths used to estimate ``E|H_1|`` (slope of the extension) for
        Monte Carlo tables; defaults to ``reps``.

    Raises
    ------
    MethodMismatch
        If the method does not apply to the walk.
    """
    sigma = walk.sigma
    if u_max is None:
        u_max = 50.0 * sigma
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    if method is None:
        if walk.skip_free_down:
            method = "exact-lattice"
        elif walk.family == "gaussian":
            method = "wiener-hopf"
        else:
            method = "monte-carlo"
    if walk.is_lattice:
        grid = walk.span
    elif grid is None:
        grid = sigma / 50.0
    n_pts = int(math.floor(u_max / grid + BARRIER_TOL)) + 1
    u = np.arange(n_pts) * grid
    fp = walk.fingerprint()

    if method == "exact-lattice":
        if not walk.skip_free_down:
            raise MethodMismatch("exact-lattice needs a lattice walk that steps down by one span")
        values = np.arange(n_pts, dtype=float) + 1.0
        return _make_table(u, values, np.zeros(n_pts), grid, 1.0 / walk.span, walk.span, 0.0,
                           method, "step", fp)

    if method == "wiener-hopf":
        if walk.family != "gaussian":
            raise MethodMismatch("wiener-hopf inversion is implemented for Gaussian walks")
        values = np.empty(n_pts)
        values[0] = 1.0
        # beyond about 14 sigma the computed values coincide with the linear
        # asymptote to the accuracy of the inversion, so the tail is filled
        # by the line through the last computed points.
        direct = u <= min(u_max, 14.0 * sigma)
        direct[0] = False
        values[direct] = _wiener_hopf_values(u[direct], sigma)
        mean_abs = sigma / math.sqrt(2.0)  # E|H_1| of a symmetric continuous walk
        c0 = 1.0 / mean_abs
        last = np.flatnonzero(direct)[-1] if direct.any() else 0
        rest = np.arange(n_pts) > last
        values[rest] = values[last] + c0 * (u[rest] - u[last])
        return _make_table(u, values, np.zeros(n_pts), grid, c0, mean_abs, 0.0, method, "cubic", fp)

    if method != "monte-carlo":
        raise MethodMismatch(f"unknown renewal method {method!r}")
    if rng is None:
        raise ValueError("monte-carlo renewal needs an rng")
    nb = n_pts
    chunk = max(1, min(reps, (1 << 23) // nb))
    total = np.zeros(nb)
    total_sq = np.zeros(nb)
    upper = u >= 0.5 * u[-1]
    xc = u[upper] - u[upper].mean()
    slopes = np.empty(reps)
    for start in range(0, reps, chunk):
        size = min(chunk, reps - start)
        counts = np.zeros((size, nb), dtype=np.int64)

        def visit(rows, s, counts=counts):
            neg = s < 0
            depth = -s[neg]
            if walk.is_lattice:
                b = np.rint(depth / grid).astype(np.int64)
            else:
                b = np.ceil(depth / grid).astype(np.int64)
            keep = b < nb
            np.add.at(counts, (rows[neg][keep], b[keep]), 1)

        _excursions(walk, size, rng, cap, lambda s: s >= 0, visit)
        per_path = 1.0 + np.cumsum(counts, axis=1)
        slopes[start:start + size] = per_path[:, upper] @ xc / np.dot(xc, xc)
        total += per_path.sum(axis=0)
        total_sq += (per_path**2).sum(axis=0)
    values = total / reps
    var = np.maximum(total_sq / reps - values**2, 0.0) * reps / max(reps - 1, 1)
    se = np.sqrt(var / reps)
    values[0], se[0] = 1.0, 0.0
    lad = ladder_heights(walk, ladder_reps or reps, rng, cap=cap)
    c0 = 1.0 / lad.mean_abs
    interp = "step" if walk.is_lattice else "linear"
    table = _make_table(u, values, se, grid, c0, lad.mean_abs, lad.se, method, interp, fp)
    object.__setattr__(table, "slope_se", float(slopes.std(ddof=1) / math.sqrt(reps)))
    return table


# ----------------------------------------------------------------------
# Harmonicity
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Residual:
    """Estimate of ``R(u) - E[R(S_1 + u) 1{S_1 >= -u}]`` and its standard error."""

    value: float
    se: float
    method: str


def renewal_identity_residual(renewal: RenewalTable, walk: WalkLaw, u: float, reps: int = 0,
                              rng: np.random.Generator | None = None,
                              method: str = "auto") -> Residual:
    """Harmonicity residual of the table at ``u >= 0``.

    ``method="auto"`` sums over the atoms exactly for atom walks and uses
    ``reps`` Monte Carlo steps for Gaussian walks; ``"quadrature"`` integrates
    Gaussian steps with adaptive quadrature.
    """
    if u < 0:
        raise DomainError("u must be non-negative")
    if method == "auto":
        method = "exact" if walk.family == "atoms" else "monte-carlo"
    if method == "exact":
        if walk.family != "atoms":
            raise ValueError("exact residual needs an atom walk")
        s = np.asarray(walk.atoms)
        keep = s + u >= -BARRIER_TOL
        val = float(np.dot(np.asarray(walk.probs)[keep], renewal(s[keep] + u)))
        return Residual(renewal(u) - val, 0.0, method)
    if method == "quadrature":
        from scipy import integrate

        sig = walk.sigma

        def f(y):
            return renewal(y + u) * math.exp(-0.5 * (y / sig) ** 2) / (sig * math.sqrt(2 * math.pi))

        val = integrate.quad(f, -u, u + 12 * sig, limit=400, epsabs=1e-13, epsrel=1e-12)[0]
        val += integrate.quad(f, u + 12 * sig, np.inf, limit=200)[0]
        return Residual(renewal(u) - val, 0.0, method)
    if reps <= 1 or rng is None:
        raise ValueError("monte-carlo residual needs reps > 1 and an rng")
    s = walk.sample(reps, rng)
    vals = np.where(s >= -u, renewal(s + u), 0.0)
    se = float(vals.std(ddof=1) / math.sqrt(reps))
    if renewal.method == "monte-carlo":
        se = math.hypot(se, float(np.interp(u, renewal.u, renewal.se)))
    return Residual(float(renewal(u) - vals.mean()), se, "monte-carlo")


# ----------------------------------------------------------------------
# Conditioned walk
# ----------------------------------------------------------------------
def _check_states(x: np.ndarray, alpha: float) -> None:
    if np.any(x < -alpha - BARRIER_TOL):
        raise StateBelowBarrier(f"state {float(x.min())!r} below barrier {-alpha!r}")


def kernel_probabilities(state: float, walk: WalkLaw, renewal: RenewalTable,
                         alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Next states and transition probabilities of the conditioned kernel (atom walks).

    The probabilities are ``p_i R(x + s_i + alpha) / sum_j p_j R(x + s_j + alpha)``
    over the atoms ``s_i`` with ``x + s_i >= -alpha``; these are the weights
    :func:`conditioned_steps` samples from.
    """
    if walk.family != "atoms":
        raise ValueError("kernel probabilities need an atom walk")
    x = np.array([float(state)])
    _check_states(x, alpha)
    y, w = _atom_kernel_weights(x, walk, renewal, alpha)
    keep = w[0] > 0
    return y[0][keep], w[0][keep] / w[0].sum()


def _atom_kernel_weights(x: np.ndarray, walk: WalkLaw, renewal: RenewalTable, alpha: float):
    s = np.asarray(walk.atoms)
    y = x[:, None] + s[None, :]
    w = np.where(y >= -alpha - BARRIER_TOL, renewal(np.maximum(y + alpha, 0.0)) * np.asarray(walk.probs), 0.0)
    return y, w


def conditioned_steps(states, walk: WalkLaw, renewal: RenewalTable, alpha: float,
                      rng: np.random.Generator, max_rounds: int = 10_000) -> np.ndarray:
    """One conditioned step from each entry of ``states`` (vectorized).

    Atom walks sample the renormalized atom weights ``p_i R(x + s_i + alpha)``
    exactly.  Gaussian walks draw the increment with
    :func:`renewal_tilted_normal`, an exact rejection sampler.
    """
    x = np.asarray(states, dtype=float)
    _check_states(x, alpha)
    if walk.family == "atoms":
        y, w = _atom_kernel_weights(x, walk, renewal, alpha)
        cdf = np.cumsum(w, axis=1)
        pick = (cdf < rng.random(len(x))[:, None] * cdf[:, -1:]).sum(axis=1)
        return y[np.arange(len(x)), np.minimum(pick, y.shape[1] - 1)]
    return x + renewal_tilted_normal(x + alpha, 0.0, walk.sigma, renewal, rng, max_rounds)


def renewal_tilted_normal(level, shift: float, sd: float, renewal: RenewalTable,
                          rng: np.random.Generator, max_rounds: int = 10_000) -> np.ndarray:
    """Sample ``u`` with density proportional to ``R(level + u) 1{level + u >= 0}``
    times the ``N(shift, sd^2)`` density, one draw per entry of ``level``.

    Writing ``u = shift + z``, the table's ``c3`` bound gives ``R(level + u) <=
    A + c3 z^+`` with ``A = R(level) + c3 (1 + shift^+)``.  Proposals come from
    the mixture whose density is proportional to ``phi(z) (A + c3 z^+)``: a
    normal component of weight ``A`` and a Rayleigh component of weight
    ``c3 sd / sqrt(2 pi)``.  Accepting with probability ``R(level + u) / (A +
    c3 z^+)`` leaves exactly the target density.
    """
    level = np.asarray(level, dtype=float)
    c3 = renewal.c3
    A = renewal(np.maximum(level, 0.0)) + c3 * (1.0 + max(shift, 0.0))
    p_ray = c3 * sd / math.sqrt(2.0 * math.pi)
    p_ray = p_ray / (A + p_ray)
    out = np.empty(len(level))
    todo = np.arange(len(level))
    for _ in range(max_rounds):
        if not len(todo):
            return out
        k = len(todo)
        ray = rng.random(k) < p_ray[todo]
        z = np.where(ray, sd * np.sqrt(-2.0 * np.log1p(-rng.random(k))), sd * rng.standard_normal(k))
        u = shift + z
        arg = level[todo] + u
        acc = np.where(arg >= 0, renewal(np.maximum(arg, 0.0)), 0.0) / (A[todo] + c3 * np.maximum(z, 0.0))
        ok = rng.random(k) < acc
        out[todo[ok]] = u[ok]
        todo = todo[~ok]
    from .errors import RejectionBudgetExceeded

    raise RejectionBudgetExceeded(f"{len(todo)} tilted normal draws still rejected after {max_rounds} rounds")


def kernel_mass(state: float, walk: WalkLaw, renewal: RenewalTable, alpha: float,
                n_nodes: int = 256, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray, float]:
    """Quadrature of the unnormalized kernel density at ``state``.

    Composite Gauss–Legendre on ``[max(-alpha, x - 8 sigma), x + 8 sigma]``,
    doubling the node count until two successive masses agree to ``tol``
    relative.  Returns the nodes, the density values and the mass.
    """
    sig = walk.sigma
    lo = max(-alpha, state - 8 * sig)
    hi = state + 8 * sig
    prev = None
    n = n_nodes
    while True:
        pieces = max(1, n // 16)
        xg, wg = np.polynomial.legendre.leggauss(16)
        edges = np.linspace(lo, hi, pieces + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        nodes = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
        weights = (half[:, None] * wg[None, :]).ravel()
        dens = renewal(nodes + alpha) * np.exp(-0.5 * ((nodes - state) / sig) ** 2) / (sig * math.sqrt(2 * math.pi))
        mass = float(np.dot(weights, dens))
        if prev is not None and abs(mass - prev) <= tol * mass:
            return nodes, dens, mass
        if n > 1 << 16:
            return nodes, dens, mass
        prev = mass
        n *= 2


def conditioned_step(state: float, walk: WalkLaw, renewal: RenewalTable, alpha: float,
                     rng: np.random.Generator, method: str = "auto") -> float:
    """One step of the walk conditioned to stay in ``[-alpha, inf)``.

    ``method="quadrature"`` (Gaussian walks only) inverts the kernel CDF
    computed by :func:`kernel_mass`; ``"auto"`` uses the exact atom sampler
    or the rejection sampler of :func:`conditioned_steps`.

    Raises
    ------
    StateBelowBarrier
    """
    if state < -alpha - BARRIER_TOL:
        raise StateBelowBarrier(f"state {state!r} below barrier {-alpha!r}")
    if method == "quadrature" and walk.family == "gaussian":
        sig = walk.sigma
        lo = max(-alpha, state - 8 * sig)
        hi = state + 8 * sig
        _, _, mass = kernel_mass(state, walk, renewal, alpha)
        grid = np.linspace(lo, hi, 8193)
        dens = renewal(grid + alpha) * np.exp(-0.5 * ((grid - state) / sig) ** 2)
        cdf = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))))
        return float(np.interp(rng.random() * cdf[-1], cdf, grid))
    return float(conditioned_steps(np.array([state]), walk, renewal, alpha, rng)[0])


@dataclass(frozen=True)
class ConditionedPath:
    """A path ``S_1..S_n`` of the conditioned walk."""

    alpha: float
    start: float
    values: np.ndarray
    method: str
    walk_fingerprint: str = ""


def iter_conditioned(walk: WalkLaw, renewal: RenewalTable, alpha: float, start, n: int,
                     rng: np.random.Generator):
    """Yield the state arrays after steps ``1..n`` for many conditioned walks."""
    x = np.array(start, dtype=float, copy=True)
    for _ in range(n):
        x = conditioned_steps(x, walk, renewal, alpha, rng)
        yield x


def conditioned_paths(walk: WalkLaw, renewal: RenewalTable, alpha: float, n: int, reps: int,
                      rng: np.random.Generator, start: float = 0.0) -> np.ndarray:
    """``reps`` independent conditioned paths, array of shape ``(reps, n)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty((reps, n))
    for k, x in enumerate(iter_conditioned(walk, renewal, alpha, np.full(reps, float(start)), n, rng)):
        out[:, k] = x
    return out


def conditioned_path(walk: WalkLaw, renewal: RenewalTable, alpha: float, n: int,
                     rng: np.random.Generator, start: float = 0.0) -> ConditionedPath:
    """Single conditioned path of ``n`` steps from ``start``."""
    vals = conditioned_paths(walk, renewal, alpha, n, 1, rng, start)[0]
    method = "exact-atoms" if walk.family == "atoms" else "rejection"
    return ConditionedPath(alpha, float(start), vals, method, walk.fingerprint())


# ----------------------------------------------------------------------
# Staying above a level
# ----------------------------------------------------------------------
def stay_above_probability(renewal: RenewalTable, alpha: float, y: float, x: float) -> float:
    """``P[min_{n>=1} S_n >= x | S_0 = y]`` for the walk conditioned above ``-alpha``.

    Equal to ``R(y - x) / R(alpha + y)``.  The weak inequality is the
    convention that makes the formula exact on lattices.

    Raises
    ------
    DomainError
        Unless ``y >= x >= -alpha``.
    """
    if not (y >= x - BARRIER_TOL and x >= -alpha - BARRIER_TOL):
        raise DomainError(f"need y >= x >= -alpha, got y={y}, x={x}, alpha={alpha}")
    return float(renewal(max(y - x, 0.0)) / renewal(alpha + y))


def _closure(renewal, alpha, s, level):
    """Vectorized ``R(s - level) / R(alpha + s)`` (0 where ``s < level``)."""
    num = np.where(s >= level - BARRIER_TOL, renewal(np.maximum(s - level, 0.0)), 0.0)
    return num / renewal(alpha + s)


def stay_above_monte_carlo(walk: WalkLaw, renewal: RenewalTable, alpha: float, y: float, x: float,
                           horizon: int, reps: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo of ``P[min_{n>=1} S_n >= x | S_0 = y]`` with a tail closure.

    Paths are simulated for ``horizon`` steps; those that stayed at or above
    ``x`` contribute the closed-form probability of staying above from
    their final state.  Returns the estimate and its standard error.
    """
    ok = np.ones(reps, dtype=bool)
    s = np.full(reps, float(y))
    for s in iter_conditioned(walk, renewal, alpha, s, horizon, rng):
        ok &= s >= x - BARRIER_TOL
    vals = np.where(ok, _closure(renewal, alpha, s, x), 0.0)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(reps))


@dataclass(frozen=True)
class MinTailEstimate:
    """Estimates of ``P[min_{k>=n} S_k <= x]`` for several ``n``."""

    ns: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    x: float
    alpha: float
    horizon: int

    def loglog_slope(self) -> float:
        """Least-squares slope of ``log estimate`` against ``log n``."""
        return float(np.polyfit(np.log(self.ns), np.log(self.estimate), 1)[0])


def min_tail_probability(walk: WalkLaw, renewal: RenewalTable, alpha: float, x: float, n,
                         horizon: int, reps: int, rng: np.random.Generator,
                         start: float = 0.0) -> MinTailEstimate:
    """Estimate ``P[min_{k>=n} S_k <= x]`` for the conditioned walk.

    All ``n`` share one simulation to ``horizon``.  For each path the
    estimator is ``1`` when ``min_{n<=k<=horizon} S_k <= x`` and otherwise
    the closed-form probability of dipping to ``x`` after the horizon.  It is
    therefore nonincreasing in ``n`` path by path.  On a lattice, ``> x``
    means ``>=`` the next lattice point above ``x``.
    """
    ns = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if np.any(ns < 0) or horizon < ns.max():
        raise ValueError("need 0 <= n <= horizon")
    if x < -alpha - BARRIER_TOL:
        z = np.zeros(len(ns))
        return MinTailEstimate(ns, z, z.copy(), x, alpha, horizon)
    if walk.is_lattice:
        level = (math.floor(x / walk.span + BARRIER_TOL) + 1) * walk.span
    else:
        level = x
    hit = np.zeros((len(ns), reps), dtype=bool)
    s = np.full(reps, float(start))
    if np.any(ns == 0):
        hit[ns == 0] |= s <= x + (BARRIER_TOL if walk.is_lattice else 0.0)
    for k, s in enumerate(iter_conditioned(walk, renewal, alpha, s, horizon, rng), start=1):
        below = s <= x + (BARRIER_TOL if walk.is_lattice else 0.0)
        if below.any():
            hit[ns <= k] |= below
    tail = 1.0 - _closure(renewal, alpha, s, level)
    vals = np.where(hit, 1.0, tail[None, :])
    est = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / math.sqrt(reps)
    return MinTailEstimate(ns, est, se, x, alpha, horizon)
