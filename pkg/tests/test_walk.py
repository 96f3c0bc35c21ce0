import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from critcascade.errors import DomainError, MethodMismatch, NotBoundaryNormalized, StateBelowBarrier
from critcascade.offspring import gaussian_law
from critcascade.walk import (
    RenewalTable,
    associated_walk,
    build_renewal,
    conditioned_paths,
    conditioned_step,
    conditioned_steps,
    kernel_probabilities,
    ladder_heights,
    min_tail_probability,
    renewal_identity_residual,
    renewal_tilted_normal,
    stay_above_monte_carlo,
    stay_above_probability,
)


# ----------------------------------------------------------------------
# associated walk
# ----------------------------------------------------------------------
def test_lattice_walk_is_simple_symmetric(lattice):
    _, walk, _ = lattice
    assert walk.is_lattice and walk.skip_free_down
    np.testing.assert_allclose(sorted(walk.atoms), [-walk.span, walk.span])
    np.testing.assert_allclose(walk.probs, [0.5, 0.5], atol=1e-12)


def test_gaussian_walk_is_centered_normal(gaussian):
    _, walk, _ = gaussian
    assert walk.mean == pytest.approx(0.0, abs=1e-12)
    assert walk.variance == pytest.approx(2 * math.log(2))


def test_unnormalized_law_has_no_walk():
    with pytest.raises(NotBoundaryNormalized):
        associated_walk(gaussian_law(0.0, 1.0))


# ----------------------------------------------------------------------
# renewal function
# ----------------------------------------------------------------------
def test_lattice_renewal_exact(lattice):
    _, walk, R = lattice
    d = walk.span
    assert all(R(k * d) == k + 1 for k in range(300))
    assert R(-1e-3) == 0.0
    assert R(0.5 * d) == 1.0
    assert R.c0 == pytest.approx(1 / d)


def test_gaussian_renewal_basic_constants(gaussian):
    _, walk, R = gaussian
    assert R(0.0) == pytest.approx(1.0, abs=1e-9)
    # E|H_1| = sigma / sqrt 2 for a symmetric continuous walk
    assert R.c0 == pytest.approx(math.sqrt(2) / walk.sigma)
    assert np.all(np.diff(R(np.linspace(0, 50, 2001))) >= -1e-9)


@pytest.mark.parametrize("u", [0.0, 0.5, 2.0, 7.0, 25.0])
def test_gaussian_renewal_is_harmonic_by_quadrature(gaussian, u):
    _, walk, R = gaussian
    res = renewal_identity_residual(R, walk, u, method="quadrature")
    assert abs(res.value) < 1e-6


def test_wiener_hopf_matches_monte_carlo(gaussian):
    _, walk, R = gaussian
    mc = build_renewal(walk, u_max=8.0, grid=0.5, method="monte-carlo", reps=20_000,
                       rng=np.random.default_rng(4))
    for u in (0.5, 2.0, 5.0, 8.0):
        i = int(round(u / 0.5))
        assert abs(mc.values[i] - R(u)) < 4 * mc.se[i] + 1e-9


def test_ladder_height_mean_matches_spitzer(gaussian):
    _, walk, _ = gaussian
    lad = ladder_heights(walk, 20_000, np.random.default_rng(5))
    assert abs(lad.mean_abs - walk.sigma / math.sqrt(2)) < 4 * lad.se
    assert np.all(lad.heights < 0)


def test_c3_bound_holds(gaussian, lattice):
    rng = np.random.default_rng(6)
    for _, _, R in (gaussian, lattice):
        u = rng.uniform(0, 300, 20_000)
        x = rng.exponential(5.0, 20_000)
        assert np.all(R(u + x) - R(u) <= R.c3 * (1 + x))


def test_exact_lattice_rejected_for_gaussian(gaussian):
    with pytest.raises(MethodMismatch):
        build_renewal(gaussian[1], u_max=5.0, method="exact-lattice")


def test_renewal_csv_round_trip(gaussian, tmp_path):
    R = build_renewal(gaussian[1], u_max=10.0)
    R.to_csv(tmp_path / "r.csv")
    back = RenewalTable.from_csv(tmp_path / "r.csv")
    u = np.linspace(0, 15, 301)
    np.testing.assert_allclose(back(u), R(u), rtol=1e-12)


# ----------------------------------------------------------------------
# conditioned walk
# ----------------------------------------------------------------------
@settings(max_examples=40, deadline=None)
@given(k=st.integers(0, 200), a=st.integers(0, 10))
def test_lattice_kernel_is_h_transform(lattice, k, a):
    _, walk, R = lattice
    d = walk.span
    x = (k - a) * d if k >= a else -a * d
    ys, p = kernel_probabilities(x, walk, R, a * d)
    assert p.sum() == pytest.approx(1.0, abs=1e-14)
    # h(j) = j + a + 1 with j = x / d; up-probability (j + a + 2) / (2 (j + a + 1))
    j = round(x / d)
    up = p[np.argmax(ys)]
    assert up == pytest.approx((j + a + 2) / (2 * (j + a + 1)), abs=1e-13)


def _kernel_cdf_oracle(R, walk, x, alpha, grid):
    sig = walk.sigma

    def dens(y):
        return R(y + alpha) * math.exp(-0.5 * ((y - x) / sig) ** 2) / (sig * math.sqrt(2 * math.pi))

    lo, hi = -alpha, x + 12 * sig
    mass = integrate.quad(dens, lo, hi, limit=400)[0]
    vals = [integrate.quad(dens, lo, g, limit=400)[0] / mass for g in grid]
    mean = integrate.quad(lambda y: y * dens(y), lo, hi, limit=400)[0] / mass
    return np.array(vals), mean


@pytest.mark.parametrize("x,alpha", [(5.0, 0.0), (0.0, 0.0), (0.3, 2.0), (-1.5, 2.0)])
def test_gaussian_conditioned_step_matches_quadrature(gaussian, x, alpha):
    _, walk, R = gaussian
    ys = conditioned_steps(np.full(100_000, x), walk, R, alpha, np.random.default_rng(7))
    grid = np.quantile(ys, [0.1, 0.3, 0.5, 0.7, 0.9])
    cdf, mean = _kernel_cdf_oracle(R, walk, x, alpha, grid)
    se = ys.std() / math.sqrt(len(ys))
    assert abs(ys.mean() - mean) < 4 * se
    emp = np.array([(ys <= g).mean() for g in grid])
    assert np.max(np.abs(emp - cdf)) < 0.006


def test_tilted_normal_with_shift(gaussian):
    # density of u proportional to R(level + u) N(shift, sd^2)
    _, _, R = gaussian
    level, shift, sd = 1.0, 0.7, 0.9
    u = renewal_tilted_normal(np.full(100_000, level), shift, sd, R, np.random.default_rng(8))

    def dens(v):
        return R(level + v) * stats.norm.pdf(v, shift, sd)

    mass = integrate.quad(dens, -level, shift + 12 * sd)[0]
    mean = integrate.quad(lambda v: v * dens(v), -level, shift + 12 * sd)[0] / mass
    assert u.min() >= -level
    assert abs(u.mean() - mean) < 4 * u.std() / math.sqrt(len(u))


def test_quadrature_and_rejection_samplers_agree(gaussian):
    _, walk, R = gaussian
    rng = np.random.default_rng(10)
    a = np.array([conditioned_step(0.5, walk, R, 1.0, rng, method="quadrature") for _ in range(3000)])
    b = conditioned_steps(np.full(3000, 0.5), walk, R, 1.0, rng)
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_conditioned_paths_respect_barrier(gaussian, lattice):
    for _, walk, R in (gaussian, lattice):
        p = conditioned_paths(walk, R, 2.0, 200, 200, np.random.default_rng(11))
        assert p.shape == (200, 200) and p.min() >= -2.0 - 1e-9


def test_state_below_barrier(gaussian):
    _, walk, R = gaussian
    with pytest.raises(StateBelowBarrier):
        conditioned_steps(np.array([-3.0]), walk, R, 2.0, np.random.default_rng(0))


# ----------------------------------------------------------------------
# staying above a level
# ----------------------------------------------------------------------
def test_stay_above_lattice_closed_form(lattice):
    _, walk, R = lattice
    d = walk.span
    assert stay_above_probability(R, 0.0, 3 * d, d) == pytest.approx(3 / 4)
    assert stay_above_probability(R, 2 * d, 0.0, -d) == pytest.approx(2 / 3)
    with pytest.raises(DomainError):
        stay_above_probability(R, 0.0, 1.0, 2.0)


def test_stay_above_monte_carlo_gaussian(gaussian):
    _, walk, R = gaussian
    est, se = stay_above_monte_carlo(walk, R, 1.0, 2.0, 0.5, 100, 20_000, np.random.default_rng(12))
    assert abs(est - stay_above_probability(R, 1.0, 2.0, 0.5)) < 4 * se


def test_min_tail_nonincreasing(lattice):
    _, walk, R = lattice
    est = min_tail_probability(walk, R, 0.0, walk.span, [4, 16, 64, 256], 256, 2000,
                               np.random.default_rng(13))
    assert np.all(np.diff(est.estimate) <= 1e-12)
    assert -1.0 < est.loglog_slope() < 0.0
