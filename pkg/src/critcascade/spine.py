"""Spinal decomposition under the truncated change of measure.

Under the measure tilted by the truncated derivative martingale the process
contains a distinguished ray, the spine ``w_0, w_1, ...``.  A spine particle
at position ``v`` reproduces according to the size-biased point process: its
children ``(V_1..V_N)`` have law

    P[N = c] prod_j p(du_j) * sum_i R(alpha + v + u_i) exp(-u_i) 1{v + u_i >= -alpha} / R(alpha + v),

and the next spine particle is child ``i`` with probability proportional to
the ``i``-th term.  For iid children this is sampled exactly in two stages:
the count is size-biased (``c P[N = c] / E[N]``), the spine slot is uniform,
the spine displacement has density proportional to
``R(alpha + v + u) exp(-u) 1{u >= -(alpha + v)}`` with respect to ``p``, and
the other children are plain draws from ``p``.  The normalizing constant of
the spine displacement is ``R(alpha + v) / E[N]`` by harmonicity of ``R``.

Every non-spine child starts an ordinary branching random walk.  Sibling
subtrees are summarized by ``D_{x,m}``, the derivative martingale of the
subtree after ``m`` generations (relative to the sibling), and

    Dhat_k = c8 sum_{siblings x of w_{k+1}} exp(-(V(x) - V(w_k))) D_{x,m}.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .brw import BrwTree, NodeId, _freeze, lattice_occupation_statistics
from .cascade import c8_constant
from .errors import (
    BarrierViolated,
    CapExceeded,
    RejectionBudgetExceeded,
    WindowOutOfRange,
)
from .offspring import OffspringLaw, _sample_counts, _sample_displacements, boundary_diagnostics
from .walk import BARRIER_TOL, RenewalTable, associated_walk, conditioned_paths, renewal_tilted_normal

__all__ = [
    "SpineRealization",
    "SpineBatch",
    "SidePool",
    "spine_step",
    "spine_steps",
    "spine_child_normalizer",
    "sample_spine",
    "sample_spines",
    "spine_positions",
    "spine_ball_mass",
    "spine_log_masses",
    "spine_marginal_check",
    "dhat_bounds_check",
    "grow_spine_tree",
    "side_derivative_sums",
    "SpineTree",
    "spine_tree_ball_mass",
    "MarginalCheck",
    "DhatReport",
    "SpineStepBatch",
]


# ----------------------------------------------------------------------
# One spine step
# ----------------------------------------------------------------------
def _size_biased_counts(law: OffspringLaw, n: int, rng: np.random.Generator) -> np.ndarray:
    c = np.asarray(law.count_values, dtype=np.int64)
    p = np.asarray(law.count_probs, dtype=float) * c
    if len(c) == 1:
        return np.full(n, c[0], dtype=np.int64)
    cdf = np.cumsum(p / p.sum())
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return c[np.minimum(idx, len(c) - 1)]


def _tilted_displacements(law: OffspringLaw, renewal: RenewalTable, alpha: float, v: np.ndarray,
                          rng: np.random.Generator, max_rounds: int) -> np.ndarray:
    """Spine displacements from ``R(alpha + v + u) exp(-u) 1{u >= -(alpha+v)} p(du)``."""
    level = alpha + v
    if law.family == "atoms":
        u = np.asarray(law.atoms)
        w = np.asarray(law.atom_probs) * np.exp(-u)
        arg = level[:, None] + u[None, :]
        weights = np.where(arg >= -BARRIER_TOL, renewal(np.maximum(arg, 0.0)) * w[None, :], 0.0)
        cdf = np.cumsum(weights, axis=1)
        pick = (cdf < rng.random(len(v))[:, None] * cdf[:, -1:]).sum(axis=1)
        return u[np.minimum(pick, len(u) - 1)]
    # exp(-u) N(m, s2)(du) is proportional to N(m - s2, s2)(du)
    return renewal_tilted_normal(level, law.mean - law.variance, math.sqrt(law.variance), renewal, rng, max_rounds)


@dataclass(frozen=True)
class SpineStepBatch:
    """Children of a batch of spine particles.

    ``spine_disp[i]`` is the displacement of the new spine particle of
    replica ``i``; ``sib_counts[i]`` siblings follow in ``sib_disp`` in
    replica order; ``slot[i]`` is the spine's position among its
    ``sib_counts[i] + 1`` children.
    """

    spine_disp: np.ndarray
    sib_counts: np.ndarray
    sib_disp: np.ndarray
    slot: np.ndarray


def spine_steps(law: OffspringLaw, renewal: RenewalTable, alpha: float, v, rng: np.random.Generator,
                selection: str = "size-biased", max_rounds: int = 10_000) -> SpineStepBatch:
    """Vectorized spine reproduction for spine particles at positions ``v``.

    ``selection="uniform"`` is a deliberately wrong variant (plain offspring
    law, spine chosen uniformly, no barrier) used as a negative control.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if selection == "size-biased":
        if np.any(v < -alpha - BARRIER_TOL):
            raise BarrierViolated(f"spine position {float(v.min())!r} below {-alpha!r}")
        counts = _size_biased_counts(law, len(v), rng)
        spine = _tilted_displacements(law, renewal, alpha, v, rng, max_rounds)
    elif selection == "uniform":
        counts = _sample_counts(law, len(v), rng)
        if np.any(counts == 0):
            raise ValueError("uniform selection needs at least one child")
        spine = _sample_displacements(law, len(v), rng)
    else:
        raise ValueError(f"unknown selection {selection!r}")
    slot = (rng.random(len(v)) * counts).astype(np.int64)
    sib_counts = counts - 1
    sib = _sample_displacements(law, int(sib_counts.sum()), rng)
    return SpineStepBatch(spine, sib_counts, sib, slot)


def spine_step(law: OffspringLaw, renewal: RenewalTable, alpha: float, v: float,
               rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Children displacements of a spine particle at ``v`` and the spine's index.

    Raises
    ------
    BarrierViolated
        If ``v < -alpha``.
    RejectionBudgetExceeded
        If the Gaussian rejection sampler does not accept in time.
    """
    b = spine_steps(law, renewal, alpha, [v], rng)
    k = int(b.slot[0])
    children = np.insert(b.sib_disp, k, b.spine_disp[0])
    return children, k


def spine_child_normalizer(law: OffspringLaw, renewal: RenewalTable, alpha: float, v: float) -> float:
    """``int R(alpha + v + u) exp(-u) 1{u >= -(alpha+v)} p(du)`` by atom sum or quadrature.

    Equals ``R(alpha + v) / E[N]`` when the table is harmonic.
    """
    level = alpha + v
    if law.family == "atoms":
        u = np.asarray(law.atoms)
        keep = level + u >= -BARRIER_TOL
        return float(np.dot(np.asarray(law.atom_probs)[keep] * np.exp(-u[keep]),
                            renewal(np.maximum(level + u[keep], 0.0))))
    from scipy import integrate

    m, s2 = law.mean, law.variance
    sd = math.sqrt(s2)
    mt = m - s2
    scale = math.exp(-m + s2 / 2.0)

    def f(u):
        return renewal(level + u) * math.exp(-0.5 * ((u - mt) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))

    lo = -level
    split = max(lo, mt + 12 * sd)
    val = integrate.quad(f, lo, split, limit=400, epsabs=1e-14, epsrel=1e-12)[0]
    val += integrate.quad(f, split, np.inf, limit=200, epsabs=1e-14)[0]
    return scale * val


# ----------------------------------------------------------------------
# Side subtrees
# ----------------------------------------------------------------------
def side_derivative_sums(law: OffspringLaw, m: int, n_roots: int, rng: np.random.Generator,
                         cap: int = 2**20, block_particles: int = 1 << 22) -> tuple[np.ndarray, np.ndarray]:
    """``D_m`` of ``n_roots`` independent trees, keeping only the current generation.

    Returns the values and a flag per tree telling whether its population
    exceeded ``cap``; such a tree stops growing and reports ``D`` at its last
    generation within the cap.
    """
    out = np.zeros(n_roots)
    hit = np.zeros(n_roots, dtype=bool)
    if (law.family == "atoms" and law.is_lattice and m > 0 and law.max_count**m <= cap
            and m * math.log2(max(2, law.max_count)) <= 62):
        # site occupation counts have the same joint law as the full trees
        # and the cap cannot be reached
        stats_ = lattice_occupation_statistics(law, m, n_roots, rng)
        return stats_["D"][:, m].copy(), hit
    per_tree = max(1.0, law.mean_count) ** m
    block = max(1, int(block_particles // per_tree))
    for start in range(0, n_roots, block):
        size = min(block, n_roots - start)
        pos = np.zeros(size)
        root = np.arange(size)
        for _ in range(m):
            counts = _sample_counts(law, len(pos), rng)
            per_root = np.bincount(root, weights=counts, minlength=size)
            over = per_root > cap
            if over.any():
                # freeze offending trees at their current generation
                frozen = over[root]
                v = pos[frozen]
                hit[start:start + size] |= over
                out[start:start + size] += np.bincount(root[frozen], weights=v * np.exp(-v), minlength=size)
                keep = ~frozen
                pos, root, counts = pos[keep], root[keep], counts[keep]
            d = _sample_displacements(law, int(counts.sum()), rng)
            parent = np.repeat(np.arange(len(pos)), counts)
            pos = pos[parent] + d
            root = root[parent]
        out[start:start + size] += np.bincount(root, weights=pos * np.exp(-pos), minlength=size)
    return out, hit


@dataclass(frozen=True)
class SidePool:
    """Independent draws of ``D_m`` for resampling sibling contributions.

    Sibling subtrees are iid given their displacements and independent of
    the spine, so drawing ``D_{x,m}`` from a large pool of independent
    trees reproduces the law of each single contribution.
    """

    values: np.ndarray
    cap_hit: np.ndarray
    m: int

    @classmethod
    def build(cls, law: OffspringLaw, m: int, size: int, rng: np.random.Generator,
              cap: int = 2**20) -> "SidePool":
        vals, hit = side_derivative_sums(law, m, size, rng, cap)
        return cls(_freeze(vals), _freeze(hit), m)

    def draw(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.values), n)
        return self.values[idx], self.cap_hit[idx]


# ----------------------------------------------------------------------
# Spines
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SpineRealization:
    """One spine with summarized sibling subtrees.

    Attributes
    ----------
    alpha : float
    positions : ndarray, shape (n + 1,)
        ``V(w_0) = 0, ..., V(w_n)``.
    siblings : list of ndarray
        ``siblings[k]`` holds the displacements ``V(x) - V(w_k)`` of the
        non-spine children of ``w_k``.
    side_D : list of ndarray
        ``D_{x,m}`` of every sibling subtree.
    dhat : ndarray, shape (n,)
        ``Dhat_k`` for ``k = 0..n-1`` (clipped at zero).
    side_cap_hit : ndarray of bool, shape (n,)
        Whether some sibling subtree of step ``k`` hit the cap.
    m : int
    clipped : int
        Number of ``Dhat_k`` that were negative before clipping.
    side_mode : str
    """

    alpha: float
    positions: np.ndarray
    siblings: list
    side_D: list
    dhat: np.ndarray
    side_cap_hit: np.ndarray
    m: int
    clipped: int
    side_mode: str
    c8: float

    @property
    def depth(self) -> int:
        return len(self.positions) - 1


def _law_c8(law: OffspringLaw) -> float:
    return c8_constant(boundary_diagnostics(law, "quadrature").sigma2)


def sample_spine(law: OffspringLaw, renewal: RenewalTable, alpha: float, n: int, m: int,
                 cap: int = 2**20, rng: np.random.Generator | None = None, *,
                 side_mode: str = "trees", pool: SidePool | None = None) -> SpineRealization:
    """Evolve a spine for ``n`` steps and summarize its sibling subtrees.

    Parameters
    ----------
    side_mode : {"trees", "pool"}
        ``trees`` grows an independent subtree of depth ``m`` for every
        sibling; ``pool`` draws ``D_{x,m}`` from ``pool``.
    """
    if rng is None:
        raise ValueError("an explicit random generator is required")
    if n < 0 or m < 0:
        raise ValueError("n and m must be non-negative")
    if m == 0:
        warnings.warn("side depth m = 0 gives D_{x,0} = 0, so every Dhat_k is 0", stacklevel=2)
    c8 = _law_c8(law)
    pos = np.zeros(n + 1)
    sibs, sideD = [], []
    dhat = np.zeros(n)
    cap_hit = np.zeros(n, dtype=bool)
    clipped = 0
    for k in range(n):
        b = spine_steps(law, renewal, alpha, pos[k:k + 1], rng)
        pos[k + 1] = pos[k] + b.spine_disp[0]
        u = b.sib_disp
        if side_mode == "pool":
            if pool is None or pool.m != m:
                raise ValueError("pool mode needs a SidePool with matching m")
            dvals, hit = pool.draw(len(u), rng)
        elif side_mode == "trees":
            dvals, hit = side_derivative_sums(law, m, len(u), rng, cap)
        else:
            raise ValueError(f"unknown side mode {side_mode!r}")
        raw = c8 * float(np.dot(np.exp(-u), dvals))
        if raw < 0:
            clipped += 1
        dhat[k] = max(raw, 0.0)
        cap_hit[k] = bool(np.any(hit))
        sibs.append(_freeze(np.array(u)))
        sideD.append(_freeze(np.array(dvals)))
    return SpineRealization(float(alpha), _freeze(pos), sibs, sideD, _freeze(dhat),
                            _freeze(cap_hit), int(m), clipped, side_mode, c8)


@dataclass(frozen=True)
class SpineBatch:
    """Many spines simulated in lockstep (sibling details summarized away).

    ``positions`` has shape ``(reps, n + 1)``; ``dhat`` and ``side_cap_hit``
    have shape ``(reps, n)``.
    """

    alpha: float
    positions: np.ndarray
    dhat: np.ndarray
    side_cap_hit: np.ndarray
    m: int
    clipped: int
    c8: float


def sample_spines(law: OffspringLaw, renewal: RenewalTable, alpha: float, n: int, m: int, reps: int,
                  rng: np.random.Generator, pool: SidePool, selection: str = "size-biased") -> SpineBatch:
    """``reps`` independent spines of length ``n`` with pooled side contributions."""
    if pool.m != m:
        raise ValueError("pool side depth differs from m")
    c8 = _law_c8(law)
    pos = np.zeros((reps, n + 1))
    dhat = np.zeros((reps, n))
    cap_hit = np.zeros((reps, n), dtype=bool)
    clipped = 0
    owner_cache = {}
    for k in range(n):
        b = spine_steps(law, renewal, alpha, pos[:, k], rng, selection=selection)
        pos[:, k + 1] = pos[:, k] + b.spine_disp
        dvals, hit = pool.draw(len(b.sib_disp), rng)
        key = tuple(b.sib_counts) if len(law.count_values) > 1 else None
        if key is None:
            owner = owner_cache.get("fixed")
            if owner is None:
                owner = np.repeat(np.arange(reps), b.sib_counts)
                owner_cache["fixed"] = owner
        else:
            owner = np.repeat(np.arange(reps), b.sib_counts)
        raw = c8 * np.bincount(owner, weights=np.exp(-b.sib_disp) * dvals, minlength=reps)
        clipped += int((raw < 0).sum())
        dhat[:, k] = np.maximum(raw, 0.0)
        cap_hit[:, k] = np.bincount(owner, weights=hit.astype(float), minlength=reps) > 0
    return SpineBatch(float(alpha), pos, dhat, cap_hit, int(m), clipped, c8)


def spine_positions(law: OffspringLaw, renewal: RenewalTable, alpha: float, n: int, reps: int,
                    rng: np.random.Generator, selection: str = "size-biased") -> np.ndarray:
    """Spine positions only, shape ``(reps, n + 1)``."""
    pos = np.zeros((reps, n + 1))
    for k in range(n):
        b = spine_steps(law, renewal, alpha, pos[:, k], rng, selection=selection)
        pos[:, k + 1] = pos[:, k] + b.spine_disp
    return pos


# ----------------------------------------------------------------------
# Ball masses along the spine
# ----------------------------------------------------------------------
def spine_ball_mass(spine: SpineRealization, n: int, K: int) -> tuple[float, float]:
    """``sum_{k=n}^{n+K} exp(-V(w_k)) Dhat_k`` and a tail-control proxy.

    The proxy is ``exp(-min_{k > n+K} V(w_k))`` over the simulated part of
    the spine beyond the window (nan when nothing is left).

    Raises
    ------
    WindowOutOfRange
        If ``n + K`` is not below the spine depth.
    """
    if n < 0 or K < 0 or n + K >= spine.depth:
        raise WindowOutOfRange(f"window [{n}, {n + K}] needs spine depth > {n + K}")
    v = spine.positions[n:n + K + 1]
    partial = float(np.sum(np.exp(-v) * spine.dhat[n:n + K + 1]))
    rest = spine.positions[n + K + 1:]
    proxy = float(np.exp(-rest.min())) if len(rest) else math.nan
    return partial, proxy


def spine_log_masses(positions: np.ndarray, dhat: np.ndarray) -> np.ndarray:
    """``log sum_{k>=n} exp(-V(w_k)) Dhat_k`` for every ``n`` (last axis is ``k``).

    Sums run to the end of the simulated spine; ``-inf`` marks a zero sum.
    """
    positions = np.asarray(positions)
    terms = np.log(np.where(dhat > 0, dhat, 1.0)) - positions[..., : dhat.shape[-1]]
    terms = np.where(dhat > 0, terms, -np.inf)
    rev = np.flip(terms, axis=-1)
    acc = np.logaddexp.accumulate(rev, axis=-1)
    return np.flip(acc, axis=-1)


# ----------------------------------------------------------------------
# Checks
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class MarginalCheck:
    """Two-sample comparison of spine positions with conditioned-walk positions."""

    statistic: float
    pvalue: float
    n: int
    reps: int
    selection: str


def spine_marginal_check(law: OffspringLaw, renewal: RenewalTable, alpha: float, n: int, reps: int,
                         rng: np.random.Generator, selection: str = "size-biased") -> MarginalCheck:
    """Kolmogorov–Smirnov comparison of ``V(w_n)`` with ``S_n`` of the conditioned walk."""
    if reps < 1000:
        raise ValueError("reps must be at least 1000")
    spine = spine_positions(law, renewal, alpha, n, reps, rng, selection)[:, -1]
    walk = associated_walk(law)
    cw = conditioned_paths(walk, renewal, alpha, n, reps, rng)[:, -1]
    res = stats.ks_2samp(spine, cw)
    return MarginalCheck(float(res.statistic), float(res.pvalue), n, reps, selection)


@dataclass(frozen=True)
class DhatReport:
    """Finite-horizon summary of the upper and lower bounds on ``Dhat``."""

    delta: float
    n0_grid: np.ndarray
    violation_fraction: np.ndarray
    probes: np.ndarray
    satisfaction: np.ndarray
    eta_95: float
    n_blocks: int


def dhat_bounds_check(dhat: np.ndarray, delta: float = 0.6, probes=None, n0_grid=None) -> DhatReport:
    """Upper bound ``Dhat_n <= exp(n^delta)`` and block lower bound checks.

    Parameters
    ----------
    dhat : ndarray, shape (reps, N)
        ``Dhat_k`` of each spine, ``N >= 1000``.
    delta : float
    probes : sequence of float
        Candidate ``eta`` values; for each, the fraction of spines with
        ``max_{n^3 <= j < (n+1)^3} Dhat_j >= eta`` in every complete block.
    n0_grid : sequence of int
        Thresholds for the upper-bound violation fractions.
    """
    dhat = np.atleast_2d(np.asarray(dhat, dtype=float))
    reps, N = dhat.shape
    if N < 1000:
        raise ValueError("spines must have depth at least 1000")
    if probes is None:
        probes = np.logspace(-6, 0, 25)
    if n0_grid is None:
        n0_grid = np.array([10, 30, 100, 300])
    probes = np.asarray(probes, dtype=float)
    n0_grid = np.asarray(n0_grid, dtype=np.int64)
    k = np.arange(N)
    with np.errstate(over="ignore"):
        bound = np.exp(k.astype(float) ** delta)
    viol = dhat > bound[None, :]
    # last violation index per spine (-1 if none)
    last = np.where(viol.any(axis=1), N - 1 - np.argmax(viol[:, ::-1], axis=1), -1)
    vfrac = np.array([(last >= n0).mean() for n0 in n0_grid])
    blocks = []
    b = 1
    while (b + 1) ** 3 <= N:
        blocks.append(dhat[:, b**3:(b + 1) ** 3].max(axis=1))
        b += 1
    bm = np.min(np.stack(blocks, axis=1), axis=1)
    sat = np.array([(bm >= p).mean() for p in probes])
    good = probes[sat >= 0.95]
    eta = float(good.max()) if len(good) else 0.0
    return DhatReport(delta, n0_grid, vfrac, probes, sat, eta, len(blocks))


# ----------------------------------------------------------------------
# A full tree containing the spine
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SpineTree:
    """A full tree grown under the spine measure, with the spine marked."""

    tree: BrwTree
    spine: list = field(default_factory=list)


def grow_spine_tree(law: OffspringLaw, renewal: RenewalTable, alpha: float, depth: int,
                    rng: np.random.Generator) -> SpineTree:
    """Grow ``depth`` generations where one particle per generation is the spine.

    Non-spine particles reproduce with the plain law; the spine particle
    reproduces with the size-biased law.  Children are stored parent by
    parent so every descendant set is a contiguous slice.
    """
    pos = [np.zeros(1)]
    disp = [np.zeros(1)]
    par = [np.full(1, -1, dtype=np.int64)]
    pmin = [np.zeros(1)]
    roots = [np.zeros(1, dtype=np.int64)]
    offsets = []
    spine = [NodeId(0, 0)]
    for g in range(depth):
        npar = len(pos[-1])
        s = spine[-1].index
        counts = _sample_counts(law, npar, rng)
        b = spine_steps(law, renewal, alpha, pos[-1][s:s + 1], rng)
        counts[s] = b.sib_counts[0] + 1
        d = _sample_displacements(law, int(counts.sum()), rng)
        off = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        lo = off[s]
        kids = np.insert(b.sib_disp, int(b.slot[0]), b.spine_disp[0])
        d[lo:lo + len(kids)] = kids
        parent = np.repeat(np.arange(npar, dtype=np.int64), counts)
        v = pos[-1][parent] + d
        pos.append(v)
        disp.append(d)
        par.append(parent)
        pmin.append(np.minimum(pmin[-1][parent], v))
        roots.append(roots[-1][parent])
        offsets.append(off)
        spine.append(NodeId(g + 1, int(lo + b.slot[0])))
    offsets.append(np.zeros(len(pos[-1]) + 1, dtype=np.int64))
    tree = BrwTree(
        positions=[_freeze(a) for a in pos], displacements=[_freeze(a) for a in disp],
        parents=[_freeze(a) for a in par], prefix_min=[_freeze(a) for a in pmin],
        roots=[_freeze(a) for a in roots], child_offsets=[_freeze(a) for a in offsets],
        depth=depth, extinct=False, n_roots=1, law_fingerprint=law.fingerprint(), law=law,
    )
    return SpineTree(tree, spine)


def spine_tree_ball_mass(stree: SpineTree, j: int, alpha: float, renewal: RenewalTable,
                         functional: str = "derivative", sigma2: float | None = None) -> float:
    """Ball mass of ``B(w_j)`` in a spine tree, assembled from spine-sibling subtrees.

    Every leaf ``y`` below ``w_j`` is either the spine leaf or descends from a
    sibling ``x`` of some ``w_{k+1}``, ``k >= j``.

    ``functional="derivative"`` returns
    ``c8 sum_k exp(-V(w_k)) sum_x exp(-(V(x) - V(w_k))) D_{x, depth-k-1}``,
    the spine-side estimate with plain derivative sums of the subtrees.
    ``functional="truncated"`` groups the summands of
    ``(c8 / c0) sum_y R(V(y) + alpha) exp(-V(y)) 1{prefix-min V(y) >= -alpha}``
    by sibling subtree (plus the spine leaf); it must coincide with the
    direct estimate of :func:`critcascade.cascade.ball_mass_estimate`.
    """
    tree = stree.tree
    n = tree.depth
    if not 0 <= j < n:
        raise WindowOutOfRange(f"need 0 <= j < {n}")
    if sigma2 is None:
        sigma2 = boundary_diagnostics(tree.law, "quadrature").sigma2
    c8 = c8_constant(sigma2)
    spine_idx = np.array([s.index for s in stree.spine])
    leaves = np.arange(len(tree.positions[n]))
    anc = leaves.copy()
    # off[y] = generation where the ancestral line of y leaves the spine (n + 1 for the spine leaf)
    off = np.where(anc != spine_idx[n], n, n + 1)
    branch_pos = np.where(anc != spine_idx[n], tree.positions[n][anc], 0.0)
    for g in range(n, 1, -1):
        anc = tree.parents[g][anc]
        leaving = anc != spine_idx[g - 1]
        off = np.where(leaving, g - 1, off)
        branch_pos = np.where(leaving, tree.positions[g - 1][anc], branch_pos)
    below = off >= j + 1
    v = tree.positions[n]
    if functional == "derivative":
        terms = np.where(below & (off <= n), (v - branch_pos) * np.exp(-v), 0.0)
        return c8 * float(np.sum(terms))
    if functional == "truncated":
        alive = tree.prefix_min[n] >= -alpha
        r = renewal(np.where(alive, v + alpha, 0.0))
        terms = np.where(below & alive, r * np.exp(-v), 0.0)
        groups = np.where(off <= n, off, n + 1)
        per_branch = np.bincount(groups, weights=terms, minlength=n + 2)
        return c8 / renewal.c0 * float(per_branch.sum())
    raise ValueError(f"unknown functional {functional!r}")
