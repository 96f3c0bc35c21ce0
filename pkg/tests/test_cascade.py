import math

import numpy as np
import pytest

from critcascade.brw import NodeId, ancestral_path, grow_forest, grow_tree
from critcascade.cascade import (
    additive_martingale,
    aggregate,
    ball_mass_estimate,
    ball_mass_finite,
    c8_constant,
    derivative_martingale,
    forest_martingales,
    martingale_trace,
    partition_function,
    truncated_martingale,
)
from critcascade.errors import InsufficientDepth
from critcascade.offspring import finite_atom_law, partition_rate


def _brute(tree, n, f):
    """Sum of f(node) over generation n by explicit iteration."""
    return sum(f(NodeId(n, i)) for i in range(len(tree.positions[n])))


def test_deterministic_tree_values():
    # every child moves by log 2: W_n = 1 and D_n = n log 2 exactly
    law = finite_atom_law((math.log(2),), (1.0,))
    tree = grow_tree(law, 6, rng=np.random.default_rng(0))
    for n in range(7):
        assert additive_martingale(tree, n) == pytest.approx(1.0, rel=1e-14)
        assert derivative_martingale(tree, n) == pytest.approx(n * math.log(2), rel=1e-14)


def test_martingales_match_brute_force(gaussian):
    law, _, R = gaussian
    tree = grow_tree(law, 7, rng=np.random.default_rng(1))
    n, alpha = 7, 1.5
    w = _brute(tree, n, lambda x: math.exp(-tree.positions[n][x.index]))
    d = _brute(tree, n, lambda x: tree.positions[n][x.index] * math.exp(-tree.positions[n][x.index]))

    def trunc(x):
        path = np.concatenate(([0.0], ancestral_path(tree, x)))
        v = path[-1]
        return R(v + alpha) * math.exp(-v) if path.min() >= -alpha else 0.0

    assert additive_martingale(tree, n) == pytest.approx(w, rel=1e-12)
    assert derivative_martingale(tree, n) == pytest.approx(d, rel=1e-12, abs=1e-12)
    assert truncated_martingale(tree, n, alpha, R) == pytest.approx(_brute(tree, n, trunc), rel=1e-12)


def test_ball_masses_are_exactly_additive(gaussian):
    tree = grow_tree(gaussian[0], 8, rng=np.random.default_rng(2))
    n = 8
    for g in range(n):
        masses = aggregate(tree, np.exp(-tree.positions[n]), n, g)
        for i in range(len(masses)):
            kids = tree.children(NodeId(g, i))
            assert masses[i] == sum(ball_mass_finite(tree, c, n) for c in kids)
    assert ball_mass_finite(tree, NodeId(0, 0), n) == additive_martingale(tree, n)


def test_c8_value():
    assert c8_constant(2.0) == pytest.approx(1 / math.sqrt(math.pi))


def test_partition_normalizations(lattice):
    law = lattice[0]
    tree = grow_tree(law, 10, rng=np.random.default_rng(3))
    z, norm = partition_function(tree, 1.0, 10)
    assert z == additive_martingale(tree, 10) and norm == math.sqrt(10)
    z, norm = partition_function(tree, 2.0, 10)
    assert norm == pytest.approx(10**3)
    _, norm = partition_function(tree, 0.5, 10, law)
    assert norm == pytest.approx(partition_rate(law, 0.5) ** -10)


def test_subcritical_partition_mean(gaussian):
    # E[Z_{beta,n}] rho(beta)^(-n) = 1
    law = gaussian[0]
    forest = grow_forest(law, 6, 20_000, np.random.default_rng(4))
    z = forest_martingales(forest, 6, betas=(0.5,))["Z"][0.5] * partition_rate(law, 0.5) ** -6
    assert abs(z.mean() - 1) < 4 * z.std(ddof=1) / math.sqrt(len(z))


def test_truncated_martingale_mean_is_renewal(gaussian):
    law, _, R = gaussian
    forest = grow_forest(law, 6, 20_000, np.random.default_rng(5))
    for a in (1.0, 4.0):
        v = forest_martingales(forest, 6, (a,), R)["D_alpha"][a]
        assert abs(v.mean() - R(a)) < 4 * v.std(ddof=1) / math.sqrt(len(v))
        assert np.all(v >= 0)


def test_ball_mass_estimate_conversion(lattice):
    law, walk, R = lattice
    tree = grow_tree(law, 12, rng=np.random.default_rng(6))
    est = ball_mass_estimate(tree, NodeId(3, 2), 40.0, 9, R, walk.variance)
    assert est.valid
    assert est.mu == pytest.approx(est.c8 / est.c0 * est.mu_alpha)
    with pytest.raises(InsufficientDepth):
        ball_mass_estimate(tree, NodeId(3, 2), 40.0, 10, R, walk.variance)
    tight = ball_mass_estimate(tree, NodeId(3, 2), 0.0, 9, R, walk.variance)
    assert not tight.valid and tight.mu is None


def test_trace_sqrt_n(lattice):
    law, _, R = lattice
    tr = martingale_trace(grow_tree(law, 6, rng=np.random.default_rng(7)), 2.0, R)
    np.testing.assert_allclose(tr.sqrtn_W, np.sqrt(np.arange(7)) * tr.W)
    assert tr.W[0] == 1.0 and tr.D[0] == 0.0 and tr.D_alpha[0] == R(2.0)
