"""Small worked examples for each module, checked against exact or statistical oracles."""

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from critcascade.brw import NodeId, grow_forest, grow_tree, lattice_occupation_statistics, min_position
from critcascade.cascade import additive_martingale, ball_mass_estimate
from critcascade.offspring import (
    GAUSSIAN_MEAN,
    LATTICE_Q,
    LATTICE_SPAN,
    finite_atom_law,
    normalize_to_boundary,
    sample_children,
    sample_offspring,
)
from critcascade.rng import stream_state
from critcascade.walk import (
    conditioned_paths,
    kernel_probabilities,
    min_tail_probability,
    renewal_identity_residual,
    stay_above_probability,
)

D = LATTICE_SPAN


# ----------------------------------------------------------------------
# Offspring laws
# ----------------------------------------------------------------------
def test_lattice_children_chi_square(lattice, rng):
    law = lattice[0]
    for _ in range(20):
        kids = sample_offspring(law, rng)
        assert len(kids) == 2
        assert np.allclose(np.abs(kids), D, rtol=0, atol=1e-12)
    n = 10**5
    _, disp = sample_children(law, n, rng)
    down = (disp.reshape(n, 2) < 0).sum(axis=1)
    observed = np.bincount(down, minlength=3)
    expected = n * stats.binom.pmf(np.arange(3), 2, LATTICE_Q)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_gaussian_children_mean(gaussian, rng):
    n = 10**6
    _, disp = sample_children(gaussian[0], n // 2, rng)
    assert abs(disp.mean() - GAUSSIAN_MEAN) < 3 * math.sqrt(GAUSSIAN_MEAN / n)


def test_zero_children_gives_empty_list(rng):
    law = finite_atom_law((-1.0, 1.0), (0.5, 0.5), (0,), (1.0,))
    assert sample_offspring(law, rng) == []


def test_extinction_frequency_matches_iterated_generating_function(rng):
    law = finite_atom_law((-D, D), (LATTICE_Q, 1 - LATTICE_Q), (0, 2), (1 / 3, 2 / 3))
    depth, roots = 15, 20_000
    forest = grow_forest(law, depth, roots, rng)
    died = np.bincount(forest.roots[depth], minlength=roots) == 0
    s = 0.0
    for _ in range(depth):
        s = 1 / 3 + 2 / 3 * s * s
    se = math.sqrt(s * (1 - s) / roots)
    assert abs(died.mean() - s) < 3 * se


def test_normalization_is_idempotent(lattice):
    law = lattice[0]
    again = normalize_to_boundary(law)
    assert np.allclose(again.atoms, law.atoms, rtol=0, atol=1e-9)
    assert np.allclose(again.atom_probs, law.atom_probs, rtol=0, atol=1e-12)


# ----------------------------------------------------------------------
# Trees
# ----------------------------------------------------------------------
def test_depth_zero_tree_is_the_root(lattice, rng):
    tree = grow_tree(lattice[0], 0, rng=rng)
    assert tree.populations == (1,)
    assert tree.positions[0].tolist() == [0.0]


def test_lattice_depth_twenty_population(lattice, rng):
    tree = grow_tree(lattice[0], 20, cap=2**21, rng=rng)
    assert tree.populations[-1] == 2**20
    running = np.minimum.accumulate([p.min() for p in tree.positions])
    assert np.all(np.diff(running) <= 0)
    assert running[-1] == min_position(tree)


def test_additive_martingale_at_three_by_enumeration(lattice, rng):
    # every sign pattern on the 14 edges of the binary tree of depth 3
    signs = np.array(list(itertools.product((-1, 1), repeat=14)))
    downs = (signs < 0).sum(axis=1)
    prob = LATTICE_Q**downs * (1 - LATTICE_Q) ** (14 - downs)
    gen1 = signs[:, :2]
    gen2 = np.repeat(gen1, 2, axis=1) + signs[:, 2:6]
    gen3 = np.repeat(gen2, 2, axis=1) + signs[:, 6:14]
    w3 = np.exp(-D * gen3).sum(axis=1)
    assert math.isclose(float(prob.sum()), 1.0, rel_tol=1e-12)
    assert math.isclose(float(prob @ w3), 1.0, rel_tol=1e-12)
    support = np.unique(np.round(w3, 9))
    for _ in range(200):
        w = additive_martingale(grow_tree(lattice[0], 3, rng=rng), 3)
        assert np.min(np.abs(support - w)) < 1e-9


def test_barrier_survival_tail_decays(lattice, rng):
    law, _, R = lattice
    # barriers on lattice sites, so that each level excludes one more site
    alphas = tuple(k * D for k in range(1, 5))
    occ = lattice_occupation_statistics(law, 30, 50_000, rng, alphas=alphas, renewal=R)
    freq = np.array([occ["stayed_above"][a].mean() for a in alphas])
    assert np.all(np.diff(freq) > 0)
    slope = np.polyfit(alphas, np.log(1 - freq), 1)[0]
    assert slope <= -0.5


# ----------------------------------------------------------------------
# Martingales and ball masses
# ----------------------------------------------------------------------
def test_additive_martingale_increments_are_unpredictable(lattice, rng):
    # Given generation 5, W_6 - W_5 has mean 0 and variance v * sum exp(-2 V(x))
    # with v = Var(sum over the two children of exp(-displacement)).
    m1 = LATTICE_Q * math.exp(D) + (1 - LATTICE_Q) * math.exp(-D)
    m2 = LATTICE_Q * math.exp(2 * D) + (1 - LATTICE_Q) * math.exp(-2 * D)
    v = 2 * (m2 - m1 * m1)
    occ = lattice_occupation_statistics(lattice[0], 6, 10**5, rng, betas=(2.0,))
    w5, w6, z2 = occ["W"][:, 5], occ["W"][:, 6], occ["Z"][2.0][:, 5]
    high = w5 > np.median(w5)
    for sel in (np.ones_like(high), high, ~high):
        t = (w6 - w5)[sel].sum() / math.sqrt(v * z2[sel].sum())
        assert abs(t) < 3


def test_seneta_heyde_medians_are_tight(lattice, rng):
    occ = lattice_occupation_statistics(lattice[0], 20, 10**5, rng)
    ratio = np.median(math.sqrt(20) * occ["W"][:, 20]) / np.median(math.sqrt(10) * occ["W"][:, 10])
    assert 0.75 <= ratio <= 1.33
    # rank correlation: D_n has tails too heavy for a stable Pearson coefficient
    assert stats.spearmanr(occ["D"][:, 15], occ["D"][:, 20]).statistic > 0.9


def test_ball_mass_estimate_single_term_and_additivity(lattice, rng):
    law, _, R = lattice
    alpha = 3.0
    tree = grow_tree(law, 8, rng=rng)
    for i in range(len(tree.positions[2])):
        node = NodeId(2, i)
        v, pmin = tree.positions[2][i], tree.prefix_min[2][i]
        single = ball_mass_estimate(tree, node, alpha, 0, R)
        expected = float(R(v + alpha)) * math.exp(-v) if pmin >= -alpha else 0.0
        assert single.mu_alpha == pytest.approx(expected, rel=1e-12, abs=0)
        parent = ball_mass_estimate(tree, node, alpha, 5, R).mu_alpha
        kids = sum(ball_mass_estimate(tree, c, alpha, 4, R).mu_alpha for c in tree.children(node))
        assert kids == pytest.approx(parent, rel=1e-12, abs=1e-300)


# ----------------------------------------------------------------------
# Associated walk and conditioned walk
# ----------------------------------------------------------------------
def test_lattice_harmonicity_residual_is_exact(lattice):
    _, walk, R = lattice
    for k in range(0, 30):
        assert renewal_identity_residual(R, walk, k * D).value == pytest.approx(0.0, abs=1e-12)


def test_corrupted_renewal_table_is_detected(lattice):
    _, walk, R = lattice
    bad = replace(R, values=np.concatenate([[1.0], 1.1 * R.values[1:]]))
    res = renewal_identity_residual(bad, walk, 0.0).value
    assert res == pytest.approx(1.0 - 0.5 * 1.1 * 2.0, abs=1e-12)


def test_gaussian_residual_at_zero(gaussian, rng):
    _, walk, R = gaussian
    res = renewal_identity_residual(R, walk, 0.0, reps=10**6, rng=rng)
    assert abs(res.value) < 3 * res.se


def test_lattice_kernel_small_states(lattice):
    _, walk, R = lattice
    y, p = kernel_probabilities(0.0, walk, R, 0.0)
    assert np.allclose(y, [D]) and np.allclose(p, [1.0])
    y, p = kernel_probabilities(D, walk, R, 0.0)
    order = np.argsort(y)
    assert np.allclose(y[order], [0.0, 2 * D], atol=1e-12)
    assert np.allclose(p[order], [0.25, 0.75], atol=1e-12)


@pytest.mark.parametrize("alpha_steps", [0, 1, 2])
def test_conditioned_path_law_by_enumeration(lattice, alpha_steps):
    _, walk, R = lattice
    alpha = alpha_steps * D
    for k in (2, 3, 4):
        for steps in itertools.product((-1, 1), repeat=k):
            path = D * np.cumsum(steps)
            if path.min() < -alpha - 1e-9:
                continue
            kernel = 1.0
            x = 0.0
            for s in path:
                y, p = kernel_probabilities(x, walk, R, alpha)
                hit = np.isclose(y, s, atol=1e-9)
                kernel *= float(p[hit].sum())
                x = s
            direct = 0.5**k * float(R(path[-1] + alpha)) / float(R(alpha))
            assert kernel == pytest.approx(direct, rel=1e-12)


def test_conditioned_walk_is_transient(lattice, rng):
    _, walk, R = lattice
    paths = conditioned_paths(walk, R, 0.0, 512, 2000, rng)
    medians = [np.median(paths[:, n - 1:2 * n].min(axis=1)) for n in (16, 64, 256)]
    assert medians[0] < medians[1] < medians[2]


def test_stay_above_trivial_level(gaussian):
    R = gaussian[2]
    for y in (0.0, 1.5, 7.0):
        assert stay_above_probability(R, 5.0, y, -5.0) == pytest.approx(1.0, abs=1e-12)


def test_min_tail_below_barrier_is_zero(lattice, rng):
    _, walk, R = lattice
    est = min_tail_probability(walk, R, 2.0, -3.0, [4, 16], 16, 100, rng)
    assert np.all(est.estimate == 0.0)


# ----------------------------------------------------------------------
# Streams
# ----------------------------------------------------------------------
def test_stream_states_do_not_collide():
    states = {stream_state(7, r, p) for r in range(5000) for p in (0, 1, 6)}
    assert len(states) == 5000 * 3
    high = {stream_state(7, r, 0) for r in (10**6 - 1, 10**6, 2**40, 2**63)}
    assert len(high) == 4
