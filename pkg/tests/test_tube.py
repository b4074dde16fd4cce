import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from univode.curve import circle_curve, curve_derivatives
from univode.errors import DisjointnessError, GeometryError
from univode.jets import ClosedFormFunction, Interval, OscillationTerm, PolynomialTerm
from univode.tube import (
    FieldSpec,
    TubeSpec,
    bump_factor,
    build_field,
    estimate_tube_radius,
    estimate_tube_radius_details,
    eval_F,
    verify_disjointness,
)

I01 = Interval(0.0, 1.0)


def _linear(eps):
    return ClosedFormFunction(I01, PolynomialTerm([0, 1]), OscillationTerm(eps))


@pytest.fixture(scope="module")
def tube():
    return TubeSpec.build(_linear(0.2))


def _normal_offsets(g, t, radius, rng):
    p, d1 = curve_derivatives(g, t, 1)
    w = rng.normal(size=p.shape)
    w -= (np.sum(w * d1, -1) / np.sum(d1 * d1, -1))[:, None] * d1
    w /= np.linalg.norm(w, axis=-1)[:, None]
    return p, w * (radius * rng.uniform(0, 1, len(t)))[:, None]


def test_circle_radius():
    r = 0.25
    c = circle_curve(r, Interval(0, 3.0))
    est = estimate_tube_radius_details(c)
    assert est.kappa_max == pytest.approx(1 / r, rel=1e-12)
    assert est.radius == pytest.approx(0.9 * r, rel=1e-12)
    assert estimate_tube_radius(circle_curve(2.0, Interval(0, 3.0))) == pytest.approx(1 / 3)


def test_line_radius_is_capped():
    line = ClosedFormFunction.polynomial([0, 1, 0.5], I01)  # Gamma = (t + t^2/2, 1 + t, 1): a parabola
    assert estimate_tube_radius(ClosedFormFunction.polynomial([0, 0, 0.5], I01)) == pytest.approx(1 / 3)
    assert estimate_tube_radius(line) == pytest.approx(1 / 3)


def test_self_meeting_curve_rejected():
    f = ClosedFormFunction.polynomial([0, 0, -1, 0, 1], Interval(-1.5, 1.5))
    with pytest.raises(GeometryError):
        estimate_tube_radius(f)


def test_round_trip(tube):
    rng = np.random.default_rng(1)
    t = rng.uniform(0, 1, 500)
    p, v = _normal_offsets(tube.g, t, 0.9 * tube.epsilon_tube, rng)
    pr = tube.project_many(p + v)
    assert np.all(pr.inside)
    np.testing.assert_allclose(pr.t_star, t, atol=1e-12)
    # an ulp of t moves the foot point by up to max_speed * 1e-16
    scale = np.max(np.abs(p))
    np.testing.assert_allclose(pr.v, v, atol=1e-14 * tube.max_speed)
    np.testing.assert_allclose(tube.can(pr.t_star, pr.v), p + v, atol=1e-15 * scale)


def test_hinted_projection_agrees(tube):
    rng = np.random.default_rng(2)
    t = rng.uniform(0.05, 0.95, 50)
    p, v = _normal_offsets(tube.g, t, 0.5 * tube.epsilon_tube, rng)
    for k in range(len(t)):
        res = tube.locate_from_hint(p[k] + v[k], t[k] + 1e-4)
        assert res is not None
        assert res[0] == pytest.approx(t[k], abs=1e-12)
        assert res[1] == pytest.approx(np.linalg.norm(v[k]), abs=1e-12)


def test_on_curve_exactness(tube):
    t = np.linspace(0, 1, 1000)
    F = tube.eval_many(curve_derivatives(tube.g, t, 0)[0])
    g3 = tube.g.derivative(t, 3)
    assert np.max(np.abs(F - g3)) <= 1e-10 * np.max(np.abs(g3))
    assert np.max(np.abs(F - g3) / (1 + np.abs(g3))) < 1e-8


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.02, 0.98), frac=st.floats(0.0, 0.99), seed=st.integers(0, 1000))
def test_radial_profile(tube, t, frac, seed):
    rng = np.random.default_rng(seed)
    p, v = _normal_offsets(tube.g, np.array([t]), 1.0, rng)
    v = v / np.linalg.norm(v) * frac * tube.epsilon_tube
    F = eval_F(FieldSpec(I01, [tube]), p[0] + v[0])
    expected = tube.g.derivative(t, 3) * bump_factor(frac * tube.epsilon_tube, tube.epsilon_tube)
    assert F == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_bump_factor():
    assert bump_factor(0.0, 0.1) == 1.0
    assert bump_factor(0.1, 0.1) == 0.0
    r, e = 0.05, 0.1
    assert bump_factor(r, e) == pytest.approx(math.exp(1 / e**2 - 1 / (e**2 - r**2)), rel=1e-12)
    vals = [bump_factor(x, 0.1) for x in np.linspace(0, 0.1, 11)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_zero_outside(tube):
    far = curve_derivatives(tube.g, np.array([0.5]), 0)[0] + np.array([0, 0, 10.0])
    assert tube.eval_many(far)[0] == 0.0
    rng = np.random.default_rng(3)
    p, v = _normal_offsets(tube.g, rng.uniform(0.05, 0.95, 200), 1.0, rng)
    v = v / np.linalg.norm(v, axis=-1)[:, None] * tube.epsilon_tube * rng.uniform(1.0, 1.5, (200, 1))
    pr = tube.project_many(p + v)
    F = tube.eval_many(p + v)
    assert np.all(F[pr.v_norm >= tube.epsilon_tube] == 0.0)


def test_json_round_trip(tube):
    f = FieldSpec(I01, [tube], {"tol": 1.5})
    g = FieldSpec.loads(f.dumps())
    assert g.dumps() == f.dumps()
    x = curve_derivatives(tube.g, np.linspace(0, 1, 50), 0)[0] + 1e-3
    np.testing.assert_array_equal(f.eval_many(x), g.eval_many(x))
    with pytest.raises(ValueError):
        FieldSpec.from_json({"interval": [0, 1]})


def test_tube_radius_validation():
    with pytest.raises(GeometryError):
        TubeSpec(_linear(0.3), 0.5, 100)


def test_disjointness_and_debug():
    fs = build_field([_linear(0.7), ClosedFormFunction(I01, PolynomialTerm([0, 1]), OscillationTerm(0.15))], I01)
    rep = verify_disjointness(fs)
    assert rep.ok and rep.min_slack > 0
    # an artificial overlap: the same tube twice
    twice = FieldSpec(I01, [fs.tubes[0], fs.tubes[0]])
    assert not verify_disjointness(twice).ok
    x = curve_derivatives(fs.tubes[0].g, np.array([0.5]), 0)[0]
    with pytest.raises(DisjointnessError):
        eval_F(twice, x[0])
    assert eval_F(twice, x[0], debug=False) == pytest.approx(2 * fs.tubes[0].g.derivative(0.5, 3))


def test_field_decays_along_normal_rays(tube):
    rng = np.random.default_rng(4)
    t = rng.uniform(0.05, 0.95, 20)
    p, w = _normal_offsets(tube.g, t, 1.0, rng)
    w /= np.linalg.norm(w, axis=-1)[:, None]
    r = np.linspace(0, 1.2, 61) * tube.epsilon_tube
    for k in range(len(t)):
        F = np.abs(tube.eval_many(p[k] + r[:, None] * w[k]))
        assert np.all(np.diff(F) <= 1e-12 * F[0])
        assert F[-1] == 0.0
