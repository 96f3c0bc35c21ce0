import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critcascade.errors import MethodUnsupported, NoBoundarySolution, NonSupercritical
from critcascade.offspring import (
    boundary_diagnostics,
    extinction_probability,
    finite_atom_law,
    gaussian_boundary_model,
    gaussian_law,
    lattice_boundary_model,
    normalize_to_boundary,
    partition_rate,
    sample_children,
)


def _lattice_moments_mp():
    """Tilted moments of the lattice model in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    d = mpmath.log(2 + mpmath.sqrt(3))
    q = (2 - mpmath.sqrt(3)) / 4
    m = [2 * (q * (-d) ** j * mpmath.e**d + (1 - q) * d**j * mpmath.e ** (-d)) for j in range(3)]
    return [float(x) for x in m], float(d)


def test_lattice_model_matches_high_precision_moments():
    (m0, m1, m2), d = _lattice_moments_mp()
    law = lattice_boundary_model()
    assert law.lattice_span == pytest.approx(d, rel=1e-15)
    for method in ("closed-form", "quadrature"):
        diag = boundary_diagnostics(law, method)
        assert abs(diag.m0 - m0) < 1e-12 and abs(diag.m1 - m1) < 1e-12
        assert diag.sigma2 == pytest.approx(m2, rel=1e-12)
        assert diag.is_boundary(1e-12)
    # the walk is simple symmetric on dZ, so its variance is d^2
    assert m2 == pytest.approx(d * d, rel=1e-12)


def test_gaussian_model_moments_from_normal_mgf():
    # for N(m, s2) displacements, E[exp(-V)] = exp(-m + s2/2) and
    # E[V exp(-V)] = (m - s2) exp(-m + s2/2); with two children and
    # m = s2 = 2 log 2 these are 1 and 0, and sigma2 = s2
    law = gaussian_boundary_model()
    s2 = 2 * math.log(2)
    assert law.mean == pytest.approx(s2) and law.variance == pytest.approx(s2)
    diag = boundary_diagnostics(law, "quadrature")
    assert abs(diag.m0 - 1) < 1e-10 and abs(diag.m1) < 1e-10
    assert diag.sigma2 == pytest.approx(s2, rel=1e-8)


def test_closed_form_rejected_for_gaussian():
    with pytest.raises(MethodUnsupported):
        boundary_diagnostics(gaussian_boundary_model(), "closed-form")


def test_monte_carlo_diagnostics_within_three_se():
    law = lattice_boundary_model()
    mc = boundary_diagnostics(law, "monte-carlo", 200_000, np.random.default_rng(3))
    assert abs(mc.m0 - 1) < 3 * mc.m0_se
    assert abs(mc.m1) < 3 * mc.m1_se


@pytest.mark.parametrize("mean,var", [(0.0, 1.0), (3.0, 0.5), (-1.0, 4.0)])
def test_gaussian_template_normalizes_to_analytic_solution(mean, var):
    # V = theta U + a is N(a + theta mean, theta^2 var); the boundary equations
    # force variance = mean = 2 log 2 for binary branching
    law = normalize_to_boundary(gaussian_law(mean, var))
    assert law.boundary_normalized
    assert law.variance == pytest.approx(2 * math.log(2), rel=1e-7)
    assert law.mean == pytest.approx(2 * math.log(2), rel=1e-7)


def test_symmetric_unit_template_has_no_boundary_solution():
    # with atoms +-1 at probability 1/2 the equations reduce to
    # theta tanh(theta) = log(2 cosh theta), whose right side is always larger
    th = np.linspace(1e-3, 15, 4000)
    assert np.all(np.log(2 * np.cosh(th)) > th * np.tanh(th))
    with pytest.raises(NoBoundarySolution):
        normalize_to_boundary(finite_atom_law((-1.0, 1.0), (0.5, 0.5)))


def test_asymmetric_template_recovers_lattice_model():
    law = normalize_to_boundary(finite_atom_law((-1.0, 1.0), (0.1, 0.9)))
    diag = boundary_diagnostics(law, "closed-form")
    assert diag.is_boundary(1e-9)


def test_subcritical_template_rejected():
    with pytest.raises(NonSupercritical):
        normalize_to_boundary(gaussian_law(0.0, 1.0, count_values=(0, 1), count_probs=(0.5, 0.5)))


def test_extinction_probability_quadratic_oracle():
    # s = 1/4 + 3/4 s^2 has roots 1/3 and 1
    law = gaussian_law(0.0, 1.0, count_values=(0, 2), count_probs=(0.25, 0.75))
    assert extinction_probability(law) == pytest.approx(1 / 3, abs=1e-10)
    assert extinction_probability(gaussian_boundary_model()) == 0.0


def test_partition_rate_at_one_is_one():
    for law in (lattice_boundary_model(), gaussian_boundary_model()):
        assert partition_rate(law, 1.0) == pytest.approx(1.0, abs=1e-9)


def test_sample_children_shapes_and_means(rng):
    law = gaussian_law(0.5, 2.0, count_values=(1, 3), count_probs=(0.5, 0.5))
    counts, disp = sample_children(law, 100_000, rng)
    assert counts.shape == (100_000,) and len(disp) == counts.sum()
    assert counts.mean() == pytest.approx(2.0, abs=0.02)
    assert disp.mean() == pytest.approx(0.5, abs=0.02)
    assert disp.var() == pytest.approx(2.0, rel=0.02)


@settings(max_examples=25, deadline=None)
@given(p=st.floats(0.02, 0.45), a=st.floats(0.2, 3.0))
def test_normalized_atom_laws_satisfy_boundary(p, a):
    # any two-atom binary template with unequal weights normalizes
    law = normalize_to_boundary(finite_atom_law((-a, a), (p, 1 - p)))
    diag = boundary_diagnostics(law, "closed-form")
    assert abs(diag.m0 - 1) < 1e-8 and abs(diag.m1) < 1e-8


def test_invalid_laws_rejected():
    with pytest.raises(ValueError):
        finite_atom_law((0.0, 1.0), (0.7, 0.7))
    with pytest.raises(ValueError):
        gaussian_law(0.0, -1.0)
