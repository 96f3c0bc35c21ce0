import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from critcascade.envelope import (
    IntegralClass,
    PsiSpec,
    check_hypotheses,
    dyadic_windows,
    envelope_exceedance,
    integral_test,
    integral_test_numeric,
    iterated_exp,
    lil_envelope,
    lil_statistic,
    psi_envelope,
    psi_value,
)
from critcascade.errors import DepthTooShallow, DomainError, NonpositiveMass


def _psi_oracle(k, eps, t):
    """Iterated-log envelope evaluated in 40-digit arithmetic."""
    mpmath.mp.dps = 40
    x = mpmath.mpf(t)
    prod = mpmath.mpf(1)
    for _ in range(k):
        x = mpmath.log(x)
        prod *= x
    return float(1 / (prod * x**eps))


@pytest.mark.parametrize("k,eps,t", [(1, 0.0, 100.0), (2, 0.0, 1e6), (3, 0.0, 1e30), (1, 1.0, 50.0),
                                     (2, 0.25, 1e4), (3, 1.0, 1e100)])
def test_psi_matches_high_precision(k, eps, t):
    spec = PsiSpec("perturbed" if eps else "iterated", k, eps)
    assert psi_value(spec, t) == pytest.approx(_psi_oracle(k, eps, t), rel=1e-13)


def test_psi_two_at_e_to_the_e():
    # log(e^e) = e and log log(e^e) = 1
    spec = PsiSpec("iterated", 2)
    assert spec.t0 == pytest.approx(math.exp(math.e))
    assert psi_value(spec, math.exp(math.e)) == pytest.approx(1 / math.e, rel=1e-14)


def test_domain_floor():
    assert iterated_exp(1) == pytest.approx(math.e)
    assert iterated_exp(3) == pytest.approx(math.exp(math.exp(math.e)))
    with pytest.raises(DomainError):
        psi_value(PsiSpec("iterated", 2), 10.0)
    psi_value(PsiSpec("iterated", 2), 16.0)


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("eps", [0.0, 0.25, 1.0])
def test_numeric_integral_test_agrees_with_analytic(k, eps):
    spec = PsiSpec("perturbed", k, eps)
    expected = IntegralClass.CONVERGENT if eps > 0 else IntegralClass.DIVERGENT
    assert integral_test(spec) == expected
    assert integral_test_numeric(spec) == expected


def test_user_expressions():
    assert integral_test(PsiSpec("user", expr="1/log(t)**2")) == IntegralClass.CONVERGENT
    assert integral_test(PsiSpec("user", expr="1/log(t)")) == IntegralClass.DIVERGENT
    assert psi_value(PsiSpec("user", expr="1/log(t)", t0=3.0), 100.0) == pytest.approx(1 / math.log(100))
    hc = check_hypotheses(PsiSpec("user", expr="1/log(t)", t0=3.0))
    assert hc.label == "hypothesis-checked: grid-only" and hc.decreasing


@pytest.mark.parametrize("expr", ["__import__('os')", "t.real", "open('x')", "lambda: 1", "'a'"])
def test_user_expressions_are_sandboxed(expr):
    with pytest.raises(ValueError):
        PsiSpec("user", expr=expr)


def test_builtin_hypotheses():
    hc = check_hypotheses(PsiSpec("perturbed", 1, 1.0))
    assert hc.decreasing and hc.increasing_from is not None and hc.label == "built-in"


def test_invalid_specs():
    with pytest.raises(ValueError):
        PsiSpec("iterated", 0)
    with pytest.raises(ValueError):
        PsiSpec("perturbed", 1, -0.5)
    with pytest.raises(ValueError):
        PsiSpec("iterated", 1, delta=0.7)


def test_envelopes():
    env = lil_envelope(2.0, 1.5)
    n = np.array([100.0, 10_000.0])
    np.testing.assert_allclose(env.log_phi(n), -1.5 * np.sqrt(4.0 * n * np.log(np.log(n))))
    pe = psi_envelope(PsiSpec("iterated", 1))
    assert pe.log_phi(np.array([1.0]))[0] == 0.0
    assert pe.log_phi(np.array([100.0]))[0] == pytest.approx(-10 / math.log(100))


def test_lil_statistic_on_deterministic_paths():
    N = 10_000
    n = np.arange(1, N + 1, dtype=float)
    base = np.sqrt(2 * n * np.log(np.log(np.maximum(n, 3.0))))
    paths = np.stack([0.7 * base, 1.1 * base])
    s = lil_statistic(paths, 1.0)
    np.testing.assert_allclose(s.values, [0.7, 1.1], rtol=1e-12)
    s4 = lil_statistic(paths, 4.0)
    assert np.array_equal(s4.values, s.values / 2.0)
    with pytest.raises(DepthTooShallow):
        lil_statistic(paths[:, :5000], 1.0)


def test_dyadic_windows():
    assert dyadic_windows(100, 1000) == [(128, 256), (256, 512)]
    assert dyadic_windows(1, 7) == [(1, 2), (2, 4), (4, 8)]
    assert dyadic_windows(16, 20) == []


def test_exceedance_known_answers():
    ns = np.arange(1, 65)
    phi = lambda n: np.full(len(n), 0.5)  # noqa: E731
    m = np.full((3, 64), 0.25)
    m[1, 40] = 1.0  # one violation beyond n0 = 8
    m[2, 5] = 1.0   # violation before n0
    rep = envelope_exceedance(ns, m, phi, n0=8)
    assert rep.aa_fraction == pytest.approx(2 / 3)
    assert list(rep.aa_violations) == [0, 1, 0]
    assert rep.windows == [(8, 16), (16, 32), (32, 64)]
    assert rep.io_fraction == 0.0
    up = envelope_exceedance(ns, m, phi, n0=8, sense="above")
    assert up.aa_fraction == 0.0


def test_exceedance_rejects_bad_masses():
    with pytest.raises(NonpositiveMass):
        envelope_exceedance(np.arange(1, 4), np.array([[1.0, 0.0, 1.0]]), lambda n: n, n0=1)
    with pytest.raises(NonpositiveMass):
        envelope_exceedance(np.arange(1, 4), phi=lambda n: n, log_masses=np.array([[0.0, -np.inf, 0.0]]))


def test_report_serialization(tmp_path):
    ns = np.arange(1, 33)
    rep = envelope_exceedance(ns, np.full((2, 32), 0.1), lil_envelope(1.0, 1.0), n0=4)
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["reps"] == 2 and summary["n0"] == 4
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 64


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 31), elements=st.floats(-50, 5)), st.floats(-30, 0), st.integers(1, 20))
def test_below_and_above_are_mirror_images(logm, level, n0):
    ns = np.arange(1, 32)
    phi = lambda n: np.full(len(n), math.exp(level))  # noqa: E731
    below = envelope_exceedance(ns, phi=phi, n0=n0, log_masses=logm)
    above = envelope_exceedance(ns, phi=phi, n0=n0, log_masses=logm, sense="above")
    assert np.array_equal(below.aa_event, above.io_event)
    assert np.array_equal(below.io_event, above.aa_event)
    assert np.all(below.aa_event | below.io_event)
