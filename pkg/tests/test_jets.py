import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from univode.errors import InvalidCombinationError, ResolutionError, UnsupportedOrderError
from univode.jets import (
    ClosedFormFunction,
    Interval,
    OscillationTerm,
    PlateauTerm,
    PolynomialTerm,
    cancel_oscillation,
    immersion_estimate,
    inf_norm,
    jet3,
    jet_norm,
    norm_extremum,
    plateau_derivatives,
    sup_norm,
    tangent_jet,
)

sympy = pytest.importorskip("sympy")

I01 = Interval(0.0, 1.0)


def _sympy_derivs(expr, var, t, n):
    return [float(sympy.diff(expr, var, k).subs(var, t).evalf(30)) for k in range(n + 1)]


def test_interval_validation():
    with pytest.raises(ValueError):
        Interval(1.0, 1.0)
    with pytest.raises(ValueError):
        Interval(0.0, math.inf)
    assert Interval(-2, 2).length == 4


@pytest.mark.parametrize("eps", [0.5, 0.3, 0.1])
@pytest.mark.parametrize("t", [0.0, 0.123, 0.77])
def test_oscillation_derivatives_match_sympy(eps, t):
    x = sympy.Symbol("x")
    e = sympy.Rational(str(eps))
    ref = _sympy_derivs(e * sympy.cos(x / e**2), x, sympy.Rational(str(t)), 4)
    f = ClosedFormFunction.oscillation_only(eps, I01)
    got = [f.derivative(t, k) for k in range(5)]
    bulk = f.derivatives(np.array([t]), 4)[0]
    scale = eps ** (1 - 2 * np.arange(5))
    np.testing.assert_allclose(np.array(got) / scale, np.array(ref) / scale, atol=1e-12)
    np.testing.assert_allclose(bulk / scale, np.array(got) / scale, atol=1e-13)
    np.testing.assert_allclose(np.array(f.scalar_derivatives(t, 4)) / scale, np.array(got) / scale, atol=1e-13)


def test_polynomial_derivatives():
    p = PolynomialTerm([1.0, -2.0, 0.5, 3.0])
    t = np.linspace(-1, 2, 7)
    np.testing.assert_allclose(p.derivative(t, 1), -2 + t + 9 * t**2)
    np.testing.assert_allclose(p.derivative(t, 3), 18.0)
    np.testing.assert_array_equal(p.derivative(t, 4), 0.0)
    assert p.degree == 3
    assert PolynomialTerm([2.0, 0.0]).degree == 0


@pytest.mark.parametrize("d", [0, 1])
def test_plateau_derivatives_match_sympy(d):
    beta, center, gamma, w = 0.4, 0.5, 3.0, 1.7
    x = sympy.Symbol("x")
    s = x - sympy.Rational(1, 2)
    b = sympy.Rational(2, 5)
    psi = sympy.exp(-sympy.Rational(3, 2) * b**2 * s**2 / (b**2 - s**2))
    expr = w * (sympy.diff(psi, x) if d else psi)
    term = PlateauTerm(w, beta, center, gamma, d)
    for t in (0.2, 0.5, 0.61, 0.85):
        ref = _sympy_derivs(expr, x, sympy.Rational(str(t)), 4)
        got = [float(term.derivative(np.array(t), k)) for k in range(5)]
        np.testing.assert_allclose(got, ref, rtol=1e-11, atol=1e-11)


def test_plateau_vanishes_off_support():
    t = np.array([-1.0, 0.1, 0.1 + 1e-12, 0.9, 2.0])
    ders = plateau_derivatives(t, 0.4, 0.5, 2.0, 4)
    for k in range(5):
        assert np.all(ders[k][[0, 1, 3, 4]] == 0.0)


def test_plateau_support_must_fit_interval():
    with pytest.raises(ValueError):
        ClosedFormFunction(I01, plateaus=(PlateauTerm(1.0, 0.3, 0.9, 1.0),))
    with pytest.raises(ValueError):
        PlateauTerm(1.0, 0.0, 0.5, 1.0)


@settings(max_examples=40, deadline=None)
@given(beta=st.floats(0.05, 2.0), t0=st.floats(-5, 5), gamma=st.floats(0.1, 50.0))
def test_plateau_center_jet(beta, t0, gamma):
    psi = plateau_derivatives(np.array([t0]), beta, t0, gamma, 4)
    assert [float(p[0]) for p in psi[:3]] == pytest.approx([1.0, 0.0, -gamma], abs=1e-12 * max(1, gamma))
    assert float(psi[3][0]) == pytest.approx(0.0, abs=1e-9 * max(1, gamma) / beta)


def test_unsupported_order():
    f = ClosedFormFunction.polynomial([0, 1], I01)
    with pytest.raises(UnsupportedOrderError):
        f.derivative(0.5, 5)
    assert f.derivative(0.5, 6, extended=True) == 0.0


def test_jet_helpers():
    f = ClosedFormFunction.polynomial([1, 2, 3, 4], I01)
    assert jet3(f, 1.0).as_array().tolist() == [10.0, 20.0, 30.0]
    assert tangent_jet(f, 0.0).as_array().tolist() == [2.0, 6.0, 24.0]
    assert jet_norm(f, 0.0) == pytest.approx(math.sqrt(1 + 4 + 36))
    np.testing.assert_array_equal(f.jet(np.array([0.0, 1.0]), 1, 3), [[2, 6, 24], [20, 30, 24]])


@pytest.mark.parametrize("eps", [0.5, 0.3, 0.1, 0.05])
def test_oscillation_norm_extrema(eps):
    f = ClosedFormFunction.oscillation_only(eps, I01)
    # |jet|^2 = (eps^2 + eps^-6) cos^2 + eps^-2 sin^2, and t/eps^2 sweeps past pi/2
    assert inf_norm(f) == pytest.approx(1 / eps, rel=1e-12)
    assert sup_norm(f) == pytest.approx(math.sqrt(eps**2 + eps**-6), rel=1e-12)


def test_norm_extremum_on_polynomial():
    f = ClosedFormFunction.polynomial([0, 0, 1], Interval(-1.0, 1.0))
    # |jet|^2 = t^4 + 4 t^2 + 4
    est = norm_extremum(f, "min")
    assert est.value == pytest.approx(2.0) and est.t == pytest.approx(0.0, abs=1e-7)
    assert sup_norm(f) == pytest.approx(3.0)
    assert immersion_estimate(f).value == pytest.approx(2.0)
    with pytest.raises(ResolutionError):
        norm_extremum(f, "max", per_period=2)


def test_cancel_oscillation_is_exact():
    eps = 0.2
    f = ClosedFormFunction(I01, PolynomialTerm([1, -1, 2, 0.5]), OscillationTerm(eps))
    g = cancel_oscillation(f, eps)
    t = np.linspace(0, 1, 11)
    expected = f.poly.derivative(t, 0) + eps**4 * f.poly.derivative(t, 2)
    np.testing.assert_allclose(g(t), expected, rtol=1e-15)
    with pytest.raises(InvalidCombinationError):
        cancel_oscillation(f, 0.3)


def test_json_round_trip():
    f = ClosedFormFunction(I01, PolynomialTerm([0.1, 1]), OscillationTerm(0.3),
                           (PlateauTerm(0.01, 0.1, 0.4, 2.0, 1),))
    g = ClosedFormFunction.from_json(f.to_json(), I01)
    assert g == f
    t = np.linspace(0, 1, 33)
    np.testing.assert_array_equal(f.derivatives(t, 4), g.derivatives(t, 4))


def test_derivatives_are_consistent_with_finite_differences():
    f = ClosedFormFunction(I01, PolynomialTerm([0.2, -1, 0.5, 3]), OscillationTerm(0.4),
                           (PlateauTerm(0.7, 0.3, 0.5, 2.0), PlateauTerm(-0.4, 0.3, 0.5, 1.0, 1)))
    rng = np.random.default_rng(7)
    t = rng.uniform(0.01, 0.99, 100)
    h = 1e-4
    for k in range(4):
        fd = (f.derivative(t + h, k) - f.derivative(t - h, k)) / (2 * h)
        exact = f.derivative(t, k + 1)
        # central difference error ~ h^2 f^(k+3) / 6
        bound = h**2 * np.max(np.abs(f.derivative(np.linspace(0, 1, 4001), k + 3, extended=True))) / 6
        assert np.max(np.abs(fd - exact)) <= 2 * bound + 1e-9 * np.max(np.abs(exact))


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(0.15, 0.6), c=st.floats(-2, 2), t=st.floats(0.0, 1.0))
def test_jet_norm_between_inf_and_sup(eps, c, t):
    f = ClosedFormFunction(I01, PolynomialTerm([0, c, 1]), OscillationTerm(eps))
    v = float(jet_norm(f, t))
    assert inf_norm(f) * (1 - 1e-9) <= v <= sup_norm(f) * (1 + 1e-9)


def test_cancel_oscillation_on_linear_polynomial():
    f = ClosedFormFunction(I01, PolynomialTerm([0, 1]), OscillationTerm(0.5))
    g = cancel_oscillation(f, 0.5)
    t = np.linspace(0, 1, 7)
    np.testing.assert_allclose(g(t), t, atol=1e-15)
