"""Polynomial fitting of targets and the separated family ``f_n = P_n + c_eps_n``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Chebyshev, Polynomial
from scipy.optimize import linprog

from .errors import ApproximationError, ChainDepthError
from .jets import (
    ClosedFormFunction,
    Interval,
    OscillationTerm,
    PolynomialTerm,
    immersion_estimate,
    inf_norm,
    sup_norm,
)

DEGREE_CAP = 64
DENSE_CHECK = 10_001


@dataclass(frozen=True)
class TargetFunction:
    """A continuous target on ``interval``: samples (piecewise linear) or a closed form."""

    interval: Interval
    t: np.ndarray | None = None
    values: np.ndarray | None = None
    closed_form: ClosedFormFunction | None = None
    name: str = "target"

    def __post_init__(self):
        if self.closed_form is None:
            t = np.asarray(self.t, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or t.shape != v.shape or len(t) < 2:
                raise ValueError("target needs at least 2 samples of matching shape")
            if np.any(np.diff(t) <= 0):
                raise ValueError("target samples must be strictly increasing in t")
            if not (math.isclose(t[0], self.interval.a) and math.isclose(t[-1], self.interval.b)):
                raise ValueError("target samples must span the whole interval")
            object.__setattr__(self, "t", t)
            object.__setattr__(self, "values", v)

    @classmethod
    def from_samples(cls, t, values, name: str = "samples") -> "TargetFunction":
        t = np.asarray(t, dtype=float)
        return cls(Interval(float(t[0]), float(t[-1])), t, np.asarray(values, dtype=float), name=name)

    @classmethod
    def from_callable(cls, func: Callable, interval: Interval, n: int = DENSE_CHECK, name: str = "target"):
        t = np.linspace(interval.a, interval.b, n)
        return cls(interval, t, np.asarray(func(t), dtype=float), name=name)

    @classmethod
    def from_closed_form(cls, f: ClosedFormFunction, name: str = "closed-form") -> "TargetFunction":
        return cls(f.interval, closed_form=f, name=name)

    def __call__(self, t):
        if self.closed_form is not None:
            return self.closed_form(t)
        return np.interp(t, self.t, self.values)

    def check_grid(self) -> np.ndarray:
        grid = np.linspace(self.interval.a, self.interval.b, DENSE_CHECK)
        if self.t is not None:
            grid = np.union1d(grid, self.t)
        return grid


def _to_power_basis(cheb: Chebyshev) -> np.ndarray:
    return cheb.convert(kind=Polynomial).coef


def max_error(coeffs: np.ndarray, h: TargetFunction) -> float:
    grid = h.check_grid()
    return float(np.max(np.abs(np.polynomial.polynomial.polyval(grid, coeffs) - h(grid))))


def _min_curvature_fit(h: TargetFunction, tol: float, deg: int, n_nodes: int = 600):
    """Degree-``deg`` polynomial minimizing ``max |P''|`` subject to ``|P - h| <= tol``.

    Solved as a linear program in the Chebyshev basis on Chebyshev plus uniform nodes.
    Returns power-basis coefficients or ``None`` if infeasible.
    """
    a, b = h.interval.a, h.interval.b
    x = np.union1d(np.cos(np.linspace(0, np.pi, n_nodes)), np.linspace(-1, 1, 2 * n_nodes + 1))
    n_nodes = len(x)
    t = 0.5 * (a + b) + 0.5 * (b - a) * x
    vander = np.polynomial.chebyshev.chebvander(x, deg)
    d2 = np.zeros_like(vander)
    for k in range(deg + 1):
        e = np.zeros(deg + 1)
        e[k] = 1.0
        d2[:, k] = np.polynomial.chebyshev.chebval(x, np.polynomial.chebyshev.chebder(e, 2))
    d2 *= (2.0 / (b - a)) ** 2
    hv = h(t)
    ones = np.ones((n_nodes, 1))
    zeros = np.zeros((n_nodes, 1))
    a_ub = np.block([[vander, zeros], [-vander, zeros], [d2, -ones], [-d2, -ones]])
    b_ub = np.concatenate([hv + tol, tol - hv, np.zeros(2 * n_nodes)])
    cost = np.zeros(deg + 2)
    cost[-1] = 1.0
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=[(None, None)] * (deg + 1) + [(0, None)],
                  method="highs")
    if res.status != 0:
        return None
    return _to_power_basis(Chebyshev(res.x[:-1], domain=[a, b]))


def _degree_ladder(cap: int) -> list[int]:
    # doubling with an intermediate 3/2 step: 1, 2, 3, 4, 6, 8, 12, 16, ...
    out, d = [1], 2
    while d <= cap:
        out.append(d)
        if d + d // 2 <= cap and d >= 2:
            out.append(d + d // 2)
        d *= 2
    return out


def _fit_plain(h: TargetFunction, tol: float, degree_cap: int):
    a, b = h.interval.a, h.interval.b
    best = (math.inf, None)
    for deg in _degree_ladder(degree_cap):
        candidates = [_to_power_basis(Chebyshev.interpolate(h, deg, domain=[a, b]))]
        if h.closed_form is None:
            nodes = np.linspace(a, b, max(4 * deg, 64))
            candidates.append(_to_power_basis(Chebyshev.fit(nodes, h(nodes), deg, domain=[a, b])))
        for coeffs in candidates:
            err = max_error(coeffs, h)
            if err < best[0]:
                best = (err, coeffs)
        if best[0] <= tol:
            break
    return best


def fit_polynomial(h: TargetFunction, tol: float, degree_cap: int = DEGREE_CAP,
                   smooth: bool = False) -> PolynomialTerm:
    """Non-constant polynomial within ``tol`` of ``h`` in sup norm.

    Chebyshev interpolation on a doubling degree ladder; each degree also tries a
    least-squares fit on uniform nodes, which does better on kinks.

    With ``smooth=True`` minimum-curvature fits (one linear program per
    degree) compete too and the admissible fit with the smallest jet sup
    norm wins. Interpolants of kinks have second derivatives in the
    hundreds, which shrinks every downstream oscillation scale. The same
    fits are the fallback when the ladder misses ``tol`` (they are
    constrained to ``tol`` directly, so they reach near-minimax accuracy).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    a, b = h.interval.a, h.interval.b
    err, coeffs = _fit_plain(h, tol, degree_cap)
    if smooth or err > tol:
        best_norm = math.inf if coeffs is None or err > tol else _jet_sup(coeffs, h.interval)
        for deg in _degree_ladder(min(degree_cap, 24))[1:]:
            c_s = _min_curvature_fit(h, 0.95 * tol, deg)
            if c_s is None:
                continue
            e_true = max_error(c_s, h)
            if e_true <= tol:
                n = _jet_sup(c_s, h.interval)
                # only trade fit accuracy for a clearly smaller jet norm
                if n < 0.75 * best_norm:
                    best_norm, err, coeffs = n, e_true, c_s
    if err > tol:
        raise ApproximationError(f"degree cap {degree_cap} reached with error {err:.3g} > {tol:.3g}",
                                 achieved_error=err)
    coeffs = np.array(coeffs, dtype=float)
    scale = max(1.0, float(np.max(np.abs(coeffs))))
    coeffs[np.abs(coeffs) < 1e-15 * scale] = 0.0
    if np.all(coeffs[1:] == 0.0):
        # the chain construction needs a non-constant polynomial
        slope = 0.5 * (tol - err) / (b - a)
        coeffs = np.array([coeffs[0] - slope * a, slope])
    return PolynomialTerm(coeffs)


def _jet_sup(coeffs, interval: Interval) -> float:
    return sup_norm(ClosedFormFunction(interval, PolynomialTerm(coeffs)))


@dataclass(frozen=True)
class ChainEntry:
    poly: PolynomialTerm
    epsilon: float
    f: ClosedFormFunction


@dataclass
class ApproximantChain:
    entries: list[ChainEntry]
    margins: list[float] = field(default_factory=list)
    immersion: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "entries": [
                {"poly": list(e.poly.coefficients), "epsilon": e.epsilon,
                 "immersion_margin": m}
                for e, m in zip(self.entries, self.immersion)
            ],
            "margins": self.margins,
        }


def poly_function(p: PolynomialTerm, interval: Interval) -> ClosedFormFunction:
    return ClosedFormFunction(interval, p)


def approximant(p: PolynomialTerm, epsilon: float, interval: Interval) -> ClosedFormFunction:
    return ClosedFormFunction(interval, p, OscillationTerm(epsilon))


def chain_epsilons(poly_sups: Sequence[float], margin_factor: float = 1.25,
                   cap: float = math.inf) -> list[float]:
    """Epsilons with ``1/eps_n = margin_factor * (separation bound)``, each at most ``cap``.

    The bound for entry ``n`` depends on ``eps_{n-1}``, so capping an entry
    tightens every later one.
    """
    eps: list[float] = []
    for n, s in enumerate(poly_sups):
        if n == 0:
            lhs = 1.0 + s
        else:
            e = eps[-1]
            lhs = 1.0 + poly_sups[n - 1] + math.sqrt(e**-6 + e**2) + s
        eps.append(min(cap, 1.0 / (margin_factor * lhs)))
    return eps


def select_epsilon_chain(
    polys: Sequence[PolynomialTerm],
    interval: Interval,
    margin_factor: float = 1.25,
    floor: float = 1e-4,
    max_depth: int = 3,
    cap: float = math.inf,
) -> ApproximantChain:
    if not polys:
        raise ValueError("need at least one polynomial")
    for p in polys:
        if p.degree < 1:
            raise ValueError("chain polynomials must be non-constant")
    if len(polys) > max_depth:
        raise ChainDepthError(f"chain depth {len(polys)} exceeds cap {max_depth}", max_feasible=max_depth)
    sups = [sup_norm(poly_function(p, interval)) for p in polys]
    eps = chain_epsilons(sups, margin_factor, cap)
    for n, e in enumerate(eps):
        if e < floor:
            raise ChainDepthError(f"epsilon_{n + 1} = {e:.3g} below floor {floor:g}", max_feasible=n)
    entries = [ChainEntry(p, e, approximant(p, e, interval)) for p, e in zip(polys, eps)]
    fs = [en.f for en in entries]
    margins = [inf_norm(fs[n + 1]) - sup_norm(fs[n]) - 1.0 for n in range(len(fs) - 1)]
    return ApproximantChain(entries, margins, [immersion_margin(f) for f in fs])


def feasible_epsilon(p: PolynomialTerm, interval: Interval, amplitude_cap: float,
                     margin_factor: float = 1.25) -> float:
    """Largest epsilon no larger than ``amplitude_cap`` that satisfies the base chain condition."""
    base = chain_epsilons([sup_norm(poly_function(p, interval))], margin_factor)[0]
    return min(base, amplitude_cap)


def immersion_margin(f: ClosedFormFunction) -> float:
    """``inf sqrt(f'**2 + f''**2)`` over the interval."""
    return immersion_estimate(f).value
