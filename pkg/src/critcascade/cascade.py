"""Martingales and finite-level cascade measures of a branching random walk.

All sums over a generation are carried out hierarchically: generation ``n``
values are added into their parents with ``numpy.bincount`` (sequential in
flat-index order), then into grandparents, and so on.  With this order the
mass of a ball is *bit-for-bit* the sum of the masses of its children, and
the root value is the additive martingale.

Functions taking a tree return a float for a single-root tree and an array
(one value per root) for a forest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .brw import BrwTree, NodeId, min_position
from .errors import DepthOutOfRange, InsufficientDepth, RenewalDomainExceeded
from .offspring import boundary_diagnostics, partition_rate
from .walk import RenewalTable

__all__ = [
    "MartingaleTrace",
    "BallMassEstimate",
    "aggregate",
    "additive_martingale",
    "derivative_martingale",
    "truncated_martingale",
    "partition_function",
    "ball_mass_finite",
    "ball_mass_estimate",
    "martingale_trace",
    "forest_martingales",
    "c8_constant",
]


def aggregate(tree: BrwTree, values: np.ndarray, n: int, g: int) -> np.ndarray:
    """Sum generation-``n`` ``values`` up to generation ``g <= n`` (one value per node)."""
    tree.check_generation(n)
    if g > n:
        raise DepthOutOfRange("cannot aggregate downwards")
    acc = np.asarray(values, dtype=float)
    for level in range(n, g, -1):
        acc = np.bincount(tree.parents[level], weights=acc, minlength=len(tree.positions[level - 1]))
    return acc


def _root_value(tree: BrwTree, values: np.ndarray, n: int):
    out = aggregate(tree, values, n, 0)
    return float(out[0]) if tree.n_roots == 1 else out


def additive_martingale(tree: BrwTree, n: int):
    """``W_n = sum_{|x|=n} exp(-V(x))`` (0 for an empty generation)."""
    tree.check_generation(n)
    return _root_value(tree, np.exp(-tree.positions[n]), n)


def derivative_martingale(tree: BrwTree, n: int):
    """``D_n = sum_{|x|=n} V(x) exp(-V(x))``."""
    tree.check_generation(n)
    v = tree.positions[n]
    return _root_value(tree, v * np.exp(-v), n)


def _truncated_terms(tree: BrwTree, n: int, alpha: float, renewal: RenewalTable) -> np.ndarray:
    v = tree.positions[n]
    alive = tree.prefix_min[n] >= -alpha
    r = renewal(np.where(alive, v + alpha, 0.0))
    if not np.all(np.isfinite(r)):
        raise RenewalDomainExceeded("renewal table returned a non-finite value")
    return np.where(alive, r * np.exp(-v), 0.0)


def truncated_martingale(tree: BrwTree, n: int, alpha: float, renewal: RenewalTable):
    """``D_n^(alpha) = sum R(V(x) + alpha) exp(-V(x)) 1{prefix-min V >= -alpha}``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    tree.check_generation(n)
    return _root_value(tree, _truncated_terms(tree, n, alpha, renewal), n)


def partition_function(tree: BrwTree, beta: float, n: int, law=None) -> tuple:
    """``Z_{beta,n} = sum exp(-beta V(x))`` and the suggested normalization.

    The suggested normalization is ``rho(beta)^(-n)`` for ``beta < 1``,
    ``sqrt(n)`` for ``beta = 1`` and ``n^(3 beta / 2)`` for ``beta > 1``, where
    ``rho(beta) = E[sum exp(-beta V)]``.  It is returned, never applied.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    tree.check_generation(n)
    law = law if law is not None else tree.law
    if beta == 1.0:
        z = additive_martingale(tree, n)
        return z, math.sqrt(n)
    z = _root_value(tree, np.exp(-beta * tree.positions[n]), n)
    if beta < 1.0:
        if law is None:
            raise ValueError("the law is needed for rho(beta)")
        return z, partition_rate(law, beta) ** (-n)
    return z, float(n) ** (1.5 * beta)


def ball_mass_finite(tree: BrwTree, node: NodeId, n: int) -> float:
    """``mu_n(B(x)) = sum over descendants y of x with |y| = n of exp(-V(y))``."""
    tree.check_node(node)
    if not node.generation <= n <= tree.depth:
        raise DepthOutOfRange(f"need {node.generation} <= n <= {tree.depth}")
    return float(aggregate(tree, np.exp(-tree.positions[n]), n, node.generation)[node.index])


def c8_constant(sigma2: float) -> float:
    """``c8 = sqrt(2 / (pi sigma^2))``."""
    return math.sqrt(2.0 / (math.pi * sigma2))


@dataclass(frozen=True)
class BallMassEstimate:
    """Finite-depth estimate of the limiting measures of a ball ``B(x)``.

    ``mu_alpha`` approximates ``mu^(alpha)(B(x))`` with side depth ``m``;
    ``mu`` converts it with ``c8 / c0`` and is None when the whole tree did
    not stay above ``-alpha``.  ``rel_change`` is the largest relative
    difference between the side-depth-``m`` value and those at side depths
    ``m-1``, ``m-2``, ``m-3`` (nan when undefined).
    """

    node: NodeId
    alpha: float
    m: int
    mu_alpha: float
    mu: float | None
    valid: bool
    rel_change: float
    c0: float
    c8: float


def ball_mass_estimate(tree: BrwTree, node: NodeId, alpha: float, m: int,
                       renewal: RenewalTable, sigma2: float | None = None) -> BallMassEstimate:
    """Estimate ``mu^(alpha)(B(x))`` and ``mu(B(x))`` from ``m`` further generations.

    ``mu^(alpha)(B(x))`` is approximated by the descendants of ``x`` at
    generation ``|x| + m``:
    ``sum_y R(V(y) + alpha) exp(-V(y)) 1{prefix-min V(y) >= -alpha}``, which
    equals ``1{prefix-min V(x) >= -alpha} exp(-V(x)) D^(alpha)_{x,m}``.

    On the event that no particle of the tree went below ``-alpha`` the
    truncated and plain derivative limits satisfy ``D^(alpha)_x = c0 D_x``,
    while ``mu(B(x)) = c8 exp(-V(x)) D_x``; hence ``mu = (c8 / c0) mu^(alpha)``.

    Raises
    ------
    InsufficientDepth
        If the tree is not grown ``m`` generations below ``x``.
    """
    tree.check_node(node)
    if m < 0 or node.generation + m > tree.depth:
        raise InsufficientDepth(f"need {m} generations below generation {node.generation}")
    if sigma2 is None:
        if tree.law is None:
            raise ValueError("sigma2 is needed when the tree carries no law")
        sigma2 = boundary_diagnostics(tree.law, "quadrature").sigma2
    c0 = renewal.c0
    c8 = c8_constant(sigma2)
    vals = []
    for mm in range(max(0, m - 3), m + 1):
        level = node.generation + mm
        terms = _truncated_terms(tree, level, alpha, renewal)
        vals.append(float(aggregate(tree, terms, level, node.generation)[node.index]))
    mu_alpha = vals[-1]
    if len(vals) > 1 and mu_alpha > 0:
        rel = max(abs(mu_alpha - v) for v in vals[:-1]) / mu_alpha
    elif len(vals) > 1:
        rel = 0.0 if all(v == 0 for v in vals) else math.inf
    else:
        rel = math.nan
    valid = min_position(tree) > -alpha
    mu = (c8 / c0) * mu_alpha if valid else None
    return BallMassEstimate(node, float(alpha), int(m), mu_alpha, mu, bool(valid), float(rel), c0, c8)


@dataclass(frozen=True)
class MartingaleTrace:
    """Martingale values of one tree for ``n = 0..depth``."""

    W: np.ndarray
    D: np.ndarray
    D_alpha: np.ndarray
    alpha: float
    sqrtn_W: np.ndarray


def martingale_trace(tree: BrwTree, alpha: float, renewal: RenewalTable) -> MartingaleTrace:
    """All martingales of a single tree at every grown generation."""
    if tree.n_roots != 1:
        raise ValueError("martingale_trace expects a single tree")
    ns = range(tree.depth + 1)
    w = np.array([additive_martingale(tree, n) for n in ns])
    d = np.array([derivative_martingale(tree, n) for n in ns])
    da = np.array([truncated_martingale(tree, n, alpha, renewal) for n in ns])
    return MartingaleTrace(w, d, da, float(alpha), np.sqrt(np.arange(tree.depth + 1)) * w)


def forest_martingales(forest: BrwTree, n: int, alphas=(), renewal: RenewalTable | None = None,
                       betas=()) -> dict:
    """Per-root ``W_n``, ``D_n``, ``D_n^(alpha)`` and ``Z_{beta,n}`` of a forest.

    Uses a single flat ``bincount`` over generation ``n``, which is faster
    than the hierarchical order and equally deterministic.
    """
    forest.check_generation(n)
    v = forest.positions[n]
    ew = np.exp(-v)
    out = {
        "W": forest.root_sum(n, ew),
        "D": forest.root_sum(n, v * ew),
        "N": np.bincount(forest.roots[n], minlength=forest.n_roots),
        "D_alpha": {},
        "Z": {},
    }
    for a in alphas:
        out["D_alpha"][a] = forest.root_sum(n, _truncated_terms(forest, n, a, renewal))
    for b in betas:
        out["Z"][b] = forest.root_sum(n, np.exp(-b * v))
    return out
