"""Offspring displacement laws of a branching random walk.

A law describes the point process of children displacements of one particle:
a random number of children ``N`` drawn from a finite count distribution and,
given ``N``, independent displacements from a common per-child law.  Two
per-child families are supported: finitely many atoms, and a Gaussian.

The boundary (critical) case asks for

    E[sum_i exp(-V_i)] = 1   and   E[sum_i V_i exp(-V_i)] = 0,

and :func:`boundary_diagnostics` measures these together with the variance
of the associated walk and two integrability moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import reduce

import numpy as np
from scipy import integrate

from .errors import MethodUnsupported, NoBoundarySolution, NonSupercritical

__all__ = [
    "OffspringLaw",
    "BoundaryDiagnostics",
    "lattice_boundary_model",
    "gaussian_boundary_model",
    "finite_atom_law",
    "gaussian_law",
    "normalize_to_boundary",
    "boundary_diagnostics",
    "sample_offspring",
    "sample_children",
    "extinction_probability",
    "partition_rate",
    "LATTICE_SPAN",
    "LATTICE_Q",
    "GAUSSIAN_MEAN",
]

#: Span ``d = arccosh 2 = log(2 + sqrt 3)`` of the built-in lattice model.
LATTICE_SPAN = math.log(2.0 + math.sqrt(3.0))
#: Probability ``q = (2 - sqrt 3) / 4`` of the downward atom ``-d``.
LATTICE_Q = (2.0 - math.sqrt(3.0)) / 4.0
#: Mean and variance ``2 log 2`` of the built-in Gaussian model.
GAUSSIAN_MEAN = 2.0 * math.log(2.0)

_PROB_TOL = 1e-9
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)


def _lattice_span(atoms: tuple[float, ...], tol: float = 1e-9) -> float | None:
    """Largest ``a > 0`` with every atom in ``a * Z``, or None if nonlattice."""
    nonzero = [x for x in atoms if abs(x) > tol]
    if not nonzero:
        return None
    ref = abs(nonzero[0])
    fracs = []
    for x in nonzero:
        fr = Fraction(x / ref).limit_denominator(10_000)
        if abs(float(fr) * ref - x) > tol * max(1.0, abs(x)):
            return None
        fracs.append(fr)
    lcm = reduce(lambda p, q: p * q // math.gcd(p, q), (f.denominator for f in fracs), 1)
    nums = [abs(f.numerator * (lcm // f.denominator)) for f in fracs]
    g = reduce(math.gcd, nums)
    return ref * g / lcm


@dataclass(frozen=True)
class OffspringLaw:
    """Immutable description of the children point process.

    Parameters
    ----------
    kind : str
        ``"finite-atom"``, ``"gaussian-binary"`` or ``"user-template"``.
    count_values, count_probs : tuple
        Finite distribution of the number of children.
    family : str
        Per-child displacement family, ``"atoms"`` or ``"gaussian"``.
    atoms, atom_probs : tuple
        Support and weights of the per-child law (atoms family).
    mean, variance : float
        Parameters of the per-child law (gaussian family).
    iid_children : bool
        Children displacements are iid given the count.  Always true for the
        two families implemented here; kept as an explicit flag.
    boundary_normalized : bool
        Set by the constructors once the boundary conditions were verified.
    name : str
        Free-form label used in fingerprints and outputs.
    """

    kind: str
    count_values: tuple[int, ...]
    count_probs: tuple[float, ...]
    family: str
    atoms: tuple[float, ...] = ()
    atom_probs: tuple[float, ...] = ()
    mean: float = 0.0
    variance: float = 0.0
    iid_children: bool = True
    boundary_normalized: bool = False
    name: str = ""
    lattice_span: float | None = field(init=False, default=None)

    def __post_init__(self):
        if self.kind not in ("finite-atom", "gaussian-binary", "user-template"):
            raise ValueError(f"unknown law kind {self.kind!r}")
        if self.family not in ("atoms", "gaussian"):
            raise ValueError(f"unknown displacement family {self.family!r}")
        if len(self.count_values) != len(self.count_probs) or not self.count_values:
            raise ValueError("count distribution must be a non-empty value/probability list")
        if any(int(c) != c or c < 0 for c in self.count_values):
            raise ValueError("child counts must be non-negative integers")
        _check_probs(self.count_probs, "count")
        if self.family == "atoms":
            if len(self.atoms) != len(self.atom_probs) or not self.atoms:
                raise ValueError("atoms family needs matching atoms and probabilities")
            _check_probs(self.atom_probs, "atom")
            if not all(math.isfinite(a) for a in self.atoms):
                raise ValueError("atoms must be finite")
            object.__setattr__(self, "lattice_span", _lattice_span(tuple(self.atoms)))
        else:
            if not (self.variance > 0 and math.isfinite(self.mean)):
                raise ValueError("gaussian family needs a finite mean and positive variance")

    # ------------------------------------------------------------------
    @property
    def mean_count(self) -> float:
        """Expected number of children."""
        return float(np.dot(self.count_values, self.count_probs))

    @property
    def is_supercritical(self) -> bool:
        return self.mean_count > 1.0

    @property
    def is_lattice(self) -> bool:
        return self.lattice_span is not None

    @property
    def max_count(self) -> int:
        return int(max(c for c, p in zip(self.count_values, self.count_probs) if p > 0))

    def child_expectation(self, f) -> float:
        """``E[f(U)]`` for one child displacement ``U``.

        Exact for atoms; 64-node Gauss–Hermite quadrature for the Gaussian.
        """
        if self.family == "atoms":
            u = np.asarray(self.atoms, dtype=float)
            return float(np.dot(np.asarray(self.atom_probs), f(u)))
        sd = math.sqrt(self.variance)
        u = self.mean + math.sqrt(2.0) * sd * _GH_NODES
        return float(np.dot(_GH_WEIGHTS, f(u)) / math.sqrt(math.pi))

    def affine(self, theta: float, shift: float) -> "OffspringLaw":
        """Law of ``theta * U + shift`` with the same count distribution."""
        if self.family == "atoms":
            return replace(
                self,
                atoms=tuple(float(theta * a + shift) for a in self.atoms),
                boundary_normalized=False,
            )
        return replace(
            self,
            mean=float(theta * self.mean + shift),
            variance=float(theta * theta * self.variance),
            boundary_normalized=False,
        )

    def fingerprint(self) -> str:
        """Short stable text identifying the law (used in output headers)."""
        if self.family == "atoms":
            disp = ";".join(f"{a:.12g}:{p:.12g}" for a, p in zip(self.atoms, self.atom_probs))
        else:
            disp = f"N({self.mean:.12g},{self.variance:.12g})"
        cnt = ";".join(f"{c}:{p:.12g}" for c, p in zip(self.count_values, self.count_probs))
        return f"{self.kind}|count={cnt}|disp={disp}"


def _check_probs(probs, what):
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"{what} probabilities must lie in [0, 1]")
    if abs(p.sum() - 1.0) > _PROB_TOL:
        raise ValueError(f"{what} probabilities must sum to 1 (got {p.sum()!r})")


@dataclass(frozen=True)
class BoundaryDiagnostics:
    """Boundary-case moments of a law.

    ``m0``, ``m1`` and ``sigma2`` are the zeroth, first and second tilted
    moments ``E[sum V^j exp(-V)]``; ``abs_moment3eps`` uses ``|V|^(3+eps)``;
    ``L_moment`` is ``E[L (log+ L)^p]`` with ``L = sum (1 + V+) exp(-V)``.
    The ``*_se`` fields are zero unless ``method == "monte-carlo"``.
    """

    m0: float
    m1: float
    sigma2: float
    abs_moment3eps: float
    L_moment: float
    eps: float
    p: float
    method: str
    m0_se: float = 0.0
    m1_se: float = 0.0
    sigma2_se: float = 0.0
    abs_moment3eps_se: float = 0.0
    L_moment_se: float = 0.0
    budget: int = 0

    def is_boundary(self, tol: float = 1e-6) -> bool:
        return abs(self.m0 - 1.0) < tol and abs(self.m1) < tol


# ----------------------------------------------------------------------
# Constructors
# ----------------------------------------------------------------------
def finite_atom_law(atoms, probs, count_values=(2,), count_probs=(1.0,), *,
                    kind="finite-atom", name="") -> OffspringLaw:
    """Law with iid atom displacements and a finite count distribution."""
    return OffspringLaw(
        kind=kind,
        count_values=tuple(int(c) for c in count_values),
        count_probs=tuple(float(p) for p in count_probs),
        family="atoms",
        atoms=tuple(float(a) for a in atoms),
        atom_probs=tuple(float(p) for p in probs),
        name=name,
    )


def gaussian_law(mean, variance, count_values=(2,), count_probs=(1.0,), *,
                 kind=None, name="") -> OffspringLaw:
    """Law with iid Gaussian displacements and a finite count distribution."""
    if kind is None:
        binary = tuple(count_values) == (2,)
        kind = "gaussian-binary" if binary else "user-template"
    return OffspringLaw(
        kind=kind,
        count_values=tuple(int(c) for c in count_values),
        count_probs=tuple(float(p) for p in count_probs),
        family="gaussian",
        mean=float(mean),
        variance=float(variance),
        name=name,
    )


def lattice_boundary_model() -> OffspringLaw:
    """Binary lattice model: each child moves ``+d`` w.p. ``1-q``, ``-d`` w.p. ``q``.

    ``d = log(2 + sqrt 3)`` and ``q = (2 - sqrt 3)/4`` solve the two boundary
    equations exactly, and the associated walk is the simple symmetric walk
    on ``d Z``.
    """
    law = finite_atom_law(
        (-LATTICE_SPAN, LATTICE_SPAN), (LATTICE_Q, 1.0 - LATTICE_Q), name="lattice"
    )
    return replace(law, boundary_normalized=True)


def gaussian_boundary_model() -> OffspringLaw:
    """Binary model with iid ``Normal(2 log 2, 2 log 2)`` displacements."""
    law = gaussian_law(GAUSSIAN_MEAN, GAUSSIAN_MEAN, name="gaussian")
    return replace(law, boundary_normalized=True)


# ----------------------------------------------------------------------
# Moments
# ----------------------------------------------------------------------
def _first_moments(law: OffspringLaw) -> tuple[float, float, float]:
    nb = law.mean_count
    m0 = nb * law.child_expectation(lambda u: np.exp(-u))
    m1 = nb * law.child_expectation(lambda u: u * np.exp(-u))
    m2 = nb * law.child_expectation(lambda u: u * u * np.exp(-u))
    return m0, m1, m2


def partition_rate(law: OffspringLaw, beta: float) -> float:
    """``rho(beta) = E[sum_i exp(-beta V_i)]``."""
    return law.mean_count * law.child_expectation(lambda u: np.exp(-beta * u))


def _abs_moment(law: OffspringLaw, eps: float) -> float:
    nb = law.mean_count
    if law.family == "atoms":
        return nb * law.child_expectation(lambda u: np.abs(u) ** (3 + eps) * np.exp(-u))
    # exp(-u) times the N(m, s2) density is exp(-m + s2/2) times the N(m - s2, s2)
    # density; the kink of |u|^(3+eps) at 0 is handled by splitting the range.
    m, s2 = law.mean, law.variance
    mt, sd = m - s2, math.sqrt(s2)
    scale = math.exp(-m + s2 / 2.0)

    def dens(u):
        return abs(u) ** (3 + eps) * math.exp(-0.5 * ((u - mt) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))

    left = integrate.quad(dens, -np.inf, 0.0, epsabs=0, epsrel=1e-12, limit=200)[0]
    right = integrate.quad(dens, 0.0, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]
    return nb * scale * (left + right)


def _L_moment(law: OffspringLaw, p: float) -> float:
    """``E[L (log+ L)^p]`` with ``L = sum_i (1 + V_i^+) exp(-V_i)``."""

    def g(total):
        lg = np.log(np.maximum(total, 1.0))
        return total * lg**p

    out = 0.0
    for c, pc in zip(law.count_values, law.count_probs):
        if pc == 0 or c == 0:
            continue
        if law.family == "atoms":
            # distribution of the sum of c iid per-child terms, atoms merged by value
            u = np.asarray(law.atoms)
            terms = (1.0 + np.maximum(u, 0.0)) * np.exp(-u)
            dist = {0.0: 1.0}
            for _ in range(c):
                new: dict[float, float] = {}
                for v, pv in dist.items():
                    for t, pt in zip(terms, law.atom_probs):
                        key = round(v + float(t), 12)
                        new[key] = new.get(key, 0.0) + pv * pt
                dist = new
            vals = np.fromiter(dist.keys(), float)
            probs = np.fromiter(dist.values(), float)
            out += pc * float(np.dot(probs, g(vals)))
        else:
            if c > 3:
                raise MethodUnsupported("Gaussian L-moment quadrature supports at most 3 children")
            sd = math.sqrt(law.variance)
            nodes = law.mean + math.sqrt(2.0) * sd * _GH_NODES
            w = _GH_WEIGHTS / math.sqrt(math.pi)
            t = (1.0 + np.maximum(nodes, 0.0)) * np.exp(-nodes)
            grids = np.meshgrid(*([t] * c), indexing="ij")
            wgrid = reduce(np.multiply.outer, [w] * c) if c > 1 else w
            total = sum(grids)
            out += pc * float(np.sum(wgrid * g(total)))
    return out


def boundary_diagnostics(law: OffspringLaw, method: str = "quadrature", budget: int = 0,
                         rng: np.random.Generator | None = None, *, eps: float = 0.5,
                         p: float = 2.5) -> BoundaryDiagnostics:
    """Compute the boundary-case moments of ``law``.

    Parameters
    ----------
    law : OffspringLaw
    method : {"quadrature", "closed-form", "monte-carlo"}
        ``closed-form`` is available for atom laws only (finite sums);
        ``quadrature`` uses finite sums for atoms and Gauss–Hermite
        quadrature (plus adaptive quadrature for the non-smooth
        ``|V|^(3+eps)`` integrand) for Gaussian children.
    budget : int
        Number of offspring realizations for ``monte-carlo``.
    rng : numpy.random.Generator
        Required for ``monte-carlo``.
    eps, p : float
        Exponents of the two integrability moments.
    """
    if method == "closed-form":
        if law.family != "atoms":
            raise MethodUnsupported("closed-form diagnostics exist only for finite-atom laws")
        method_used = "closed-form"
    elif method == "quadrature":
        method_used = "quadrature"
    elif method == "monte-carlo":
        if budget <= 0:
            raise ValueError("monte-carlo diagnostics need budget > 0")
        if rng is None:
            raise ValueError("monte-carlo diagnostics need an rng")
        return _mc_diagnostics(law, budget, rng, eps, p)
    else:
        raise MethodUnsupported(f"unknown method {method!r}")
    m0, m1, m2 = _first_moments(law)
    return BoundaryDiagnostics(
        m0=m0, m1=m1, sigma2=m2,
        abs_moment3eps=_abs_moment(law, eps),
        L_moment=_L_moment(law, p),
        eps=eps, p=p, method=method_used,
    )


def _mc_diagnostics(law, budget, rng, eps, p) -> BoundaryDiagnostics:
    counts, disp = sample_children(law, budget, rng)
    owner = np.repeat(np.arange(budget), counts)
    ew = np.exp(-disp)

    def per_parent(vals):
        return np.bincount(owner, weights=vals, minlength=budget)

    samples = {
        "m0": per_parent(ew),
        "m1": per_parent(disp * ew),
        "sigma2": per_parent(disp * disp * ew),
        "abs_moment3eps": per_parent(np.abs(disp) ** (3 + eps) * ew),
    }
    total = per_parent((1.0 + np.maximum(disp, 0.0)) * ew)
    samples["L_moment"] = total * np.log(np.maximum(total, 1.0)) ** p
    est = {k: float(v.mean()) for k, v in samples.items()}
    se = {k + "_se": float(v.std(ddof=1) / math.sqrt(budget)) for k, v in samples.items()}
    return BoundaryDiagnostics(eps=eps, p=p, method="monte-carlo", budget=budget, **est, **se)


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------
def normalize_to_boundary(template: OffspringLaw, tol: float = 1e-10,
                          max_iter: int = 200) -> OffspringLaw:
    """Find ``V = theta U + a`` (``theta > 0``) meeting the boundary equations.

    Damped Newton iteration on ``(log theta, a)`` with a forward-difference
    Jacobian.  Working with ``log theta`` keeps the solution in the branch
    ``theta > 0``.

    Raises
    ------
    NonSupercritical
        If the mean child count is at most one.
    NoBoundarySolution
        If the iteration does not reach ``max(|m0-1|, |m1|) <= tol``.
    """
    if not template.is_supercritical:
        raise NonSupercritical(f"mean child count {template.mean_count} <= 1")

    def resid(x):
        law = template.affine(math.exp(x[0]), x[1])
        m0, m1, _ = _first_moments(law)
        return np.array([m0 - 1.0, m1])

    m0_start = _first_moments(template)[0]
    x = np.array([0.0, math.log(m0_start)])
    if np.max(np.abs(resid(np.zeros(2)))) <= tol:
        return replace(template, boundary_normalized=True)
    try:
        with np.errstate(over="raise", invalid="raise"):
            f = resid(x)
            for _ in range(max_iter):
                norm = float(np.max(np.abs(f)))
                if norm <= tol:
                    law = template.affine(math.exp(x[0]), x[1])
                    kind = law.kind
                    if law.family == "atoms":
                        kind = "finite-atom"
                    elif tuple(law.count_values) == (2,):
                        kind = "gaussian-binary"
                    return replace(law, kind=kind, boundary_normalized=True)
                jac = np.empty((2, 2))
                for j in range(2):
                    h = 1e-7 * max(1.0, abs(x[j]))
                    xp = x.copy()
                    xp[j] += h
                    jac[:, j] = (resid(xp) - f) / h
                step = np.linalg.solve(jac, -f)
                lam = 1.0
                while lam > 1e-6:
                    xn = x + lam * step
                    try:
                        fn = resid(xn)
                    except FloatingPointError:
                        # an overshooting trial step; backtrack
                        lam *= 0.5
                        continue
                    if np.max(np.abs(fn)) < norm:
                        break
                    lam *= 0.5
                else:
                    raise NoBoundarySolution("Newton step cannot reduce the residual")
                x, f = xn, fn
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise NoBoundarySolution(f"normalization diverged: {exc}") from exc
    raise NoBoundarySolution(f"no convergence within {max_iter} iterations")


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------
def _sample_counts(law: OffspringLaw, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(law.count_values) == 1:
        return np.full(n, law.count_values[0], dtype=np.int64)
    cdf = np.cumsum(law.count_probs)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return np.asarray(law.count_values, dtype=np.int64)[np.minimum(idx, len(cdf) - 1)]


def _sample_displacements(law: OffspringLaw, n: int, rng: np.random.Generator) -> np.ndarray:
    if law.family == "gaussian":
        return law.mean + math.sqrt(law.variance) * rng.standard_normal(n)
    atoms = np.asarray(law.atoms, dtype=float)
    if len(atoms) == 1:
        return np.full(n, atoms[0])
    if len(atoms) == 2:
        return np.where(rng.random(n) < law.atom_probs[0], atoms[0], atoms[1])
    cdf = np.cumsum(law.atom_probs)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return atoms[np.minimum(idx, len(atoms) - 1)]


def sample_children(law: OffspringLaw, n_parents: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Children of ``n_parents`` independent particles.

    Returns
    -------
    counts : ndarray of int64, shape (n_parents,)
    displacements : ndarray, shape (counts.sum(),)
        Children listed parent by parent, in parent order.
    """
    counts = _sample_counts(law, n_parents, rng)
    disp = _sample_displacements(law, int(counts.sum()), rng)
    return counts, disp


def sample_offspring(law: OffspringLaw, rng: np.random.Generator) -> list[float]:
    """Displacements of the children of a single particle."""
    _, disp = sample_children(law, 1, rng)
    return disp.tolist()


def extinction_probability(law: OffspringLaw, tol: float = 1e-14) -> float:
    """Smallest fixed point in ``[0, 1]`` of the count generating function."""
    c = np.asarray(law.count_values, dtype=float)
    pc = np.asarray(law.count_probs, dtype=float)
    s = 0.0
    for _ in range(100_000):
        s_new = float(np.dot(pc, s**c))
        if abs(s_new - s) < tol:
            return s_new
        s = s_new
    return s
