"""Closed-form functions with exact derivatives and jet norms.

A :class:`ClosedFormFunction` is a finite sum of three kinds of terms on an
interval ``[a, b]``:

* a polynomial ``sum c_k t**k``,
* an oscillation ``eps * cos(t / eps**2)``,
* plateau bumps ``w * psi(u)`` (or ``w * psi'(u)``) with
  ``psi(u) = exp(-gamma/2 * beta**2 s**2 / (beta**2 - s**2))``, ``s = u - center``,
  for ``|s| < beta`` and ``0`` outside.

Every derivative is computed from per-term closed forms, never by finite
differences: the oscillation has derivatives of size ``eps**(1 - 2k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import InvalidCombinationError, ResolutionError, UnsupportedOrderError

MAX_ORDER = 4

# exp() underflows below this exponent; plateau derivatives are set to 0 there
_PLATEAU_EXP_FLOOR = -700.0


@dataclass(frozen=True)
class Interval:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)) or not self.a < self.b:
            raise ValueError(f"invalid interval [{self.a}, {self.b}]")

    @property
    def length(self) -> float:
        return self.b - self.a

    def contains(self, t, slack: float = 1e-12) -> bool:
        scale = slack * max(1.0, abs(self.a), abs(self.b))
        return bool(np.all((np.asarray(t) >= self.a - scale) & (np.asarray(t) <= self.b + scale)))

    def to_list(self) -> list[float]:
        return [self.a, self.b]


@dataclass(frozen=True)
class PolynomialTerm:
    """Polynomial with coefficients in ascending degree."""

    coefficients: tuple[float, ...]

    def __init__(self, coefficients: Iterable[float]):
        coeffs = tuple(float(c) for c in coefficients) or (0.0,)
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def degree(self) -> int:
        nz = [k for k, c in enumerate(self.coefficients) if c != 0.0]
        return nz[-1] if nz else 0

    def derivative(self, t, order: int):
        c = self._derived_coefficients(order)
        if c is None:
            return np.zeros_like(np.asarray(t, dtype=float))
        return npoly.polyval(t, c)

    def _derived_coefficients(self, order: int):
        cache = self.__dict__.setdefault("_cache", {})
        if order not in cache:
            c = np.asarray(self.coefficients)
            cache[order] = None if order >= len(c) else npoly.polyder(c, order) if order else c
        return cache[order]

    def derivative_matrix(self, n: int) -> np.ndarray:
        """Row ``k`` holds the power-basis coefficients of the ``k``-th derivative."""
        cache = self.__dict__.setdefault("_cache", {})
        key = ("matrix", n)
        if key not in cache:
            m = len(self.coefficients)
            mat = np.zeros((n + 1, m))
            for k in range(min(n, m - 1) + 1):
                mat[k, : m - k] = self._derived_coefficients(k)
            cache[key] = mat
        return cache[key]

    def differentiated(self, order: int = 1) -> "PolynomialTerm":
        c = np.asarray(self.coefficients)
        if order >= len(c):
            return PolynomialTerm([0.0])
        return PolynomialTerm(npoly.polyder(c, order))


@dataclass(frozen=True)
class OscillationTerm:
    """``eps * cos(t / eps**2)``."""

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("oscillation epsilon must be positive")

    @property
    def period(self) -> float:
        return 2.0 * math.pi * self.epsilon**2

    def derivative_weights(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``(A, B)`` with ``c_eps^(k)(t) = A[k] cos(t/eps**2) + B[k] sin(t/eps**2)``."""
        cache = self.__dict__.setdefault("_weights", {})
        if n in cache:
            return cache[n]
        e = self.epsilon
        k = np.arange(n + 1)
        scale = e ** (1.0 - 2.0 * k)
        a = scale * np.array([1.0, 0.0, -1.0, 0.0])[k % 4]
        b = scale * np.array([0.0, -1.0, 0.0, 1.0])[k % 4]
        cache[n] = (a, b)
        return a, b

    def derivative(self, t, order: int):
        e = self.epsilon
        # d^k/dt^k cos(w t) = w^k cos(w t + k pi/2)
        return e ** (1 - 2 * order) * np.cos(np.asarray(t, dtype=float) / e**2 + order * math.pi / 2)


def _phi_derivatives(s, beta: float, gamma: float, n: int) -> list[np.ndarray]:
    """Derivatives 0..n of the plateau exponent at offsets ``s`` (``|s| < beta``)."""
    out = [-0.5 * gamma * beta**2 * s**2 / (beta**2 - s**2)]
    inv_m = 1.0 / (beta - s)
    inv_p = 1.0 / (beta + s)
    c = -0.25 * gamma * beta**3
    for k in range(1, n + 1):
        out.append(c * math.factorial(k) * (inv_m ** (k + 1) + (-1) ** k * inv_p ** (k + 1)))
    return out


def plateau_derivatives(u, beta: float, center: float, gamma: float, n: int) -> list[np.ndarray]:
    """Derivatives 0..n of the plateau bump with respect to ``u``.

    Uses ``psi = exp(phi)`` and ``psi^(m+1) = sum_k C(m,k) phi^(k+1) psi^(m-k)``.
    """
    u = np.asarray(u, dtype=float)
    s = u - center
    inside = np.abs(s) < beta
    res = [np.zeros_like(s) for _ in range(n + 1)]
    if not np.any(inside):
        return res
    si = s[inside]
    phi = _phi_derivatives(si, beta, gamma, n)
    live = phi[0] > _PLATEAU_EXP_FLOOR
    psi = [np.where(live, np.exp(np.where(live, phi[0], 0.0)), 0.0)]
    for m in range(n):
        acc = np.zeros_like(si)
        for k in range(m + 1):
            acc = acc + math.comb(m, k) * np.where(live, phi[k + 1], 0.0) * psi[m - k]
        psi.append(acc)
    for k in range(n + 1):
        res[k][inside] = psi[k]
    return res


@dataclass(frozen=True)
class PlateauTerm:
    """``weight * psi`` (``derivative_order=0``) or ``weight * psi'`` (``=1``)."""

    weight: float
    beta: float
    center: float
    gamma: float
    derivative_order: int = 0

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma > 0):
            raise ValueError("plateau beta and gamma must be positive")
        if self.derivative_order not in (0, 1):
            raise ValueError("plateau derivative_order must be 0 or 1")

    @property
    def support(self) -> tuple[float, float]:
        return (self.center - self.beta, self.center + self.beta)

    def derivative(self, t, order: int):
        n = order + self.derivative_order
        return self.weight * plateau_derivatives(t, self.beta, self.center, self.gamma, n)[n]


Term = PolynomialTerm | OscillationTerm | PlateauTerm


@dataclass(frozen=True)
class ClosedFormFunction:
    """Immutable sum of terms on an interval."""

    interval: Interval
    poly: PolynomialTerm = field(default_factory=lambda: PolynomialTerm([0.0]))
    oscillation: OscillationTerm | None = None
    plateaus: tuple[PlateauTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "plateaus", tuple(self.plateaus))
        for p in self.plateaus:
            lo, hi = p.support
            if not self.interval.contains([lo, hi], slack=1e-9):
                raise ValueError(f"plateau support [{lo}, {hi}] not inside {self.interval}")

    # construction helpers -------------------------------------------------

    @classmethod
    def polynomial(cls, coefficients: Sequence[float], interval: Interval) -> "ClosedFormFunction":
        return cls(interval, PolynomialTerm(coefficients))

    @classmethod
    def constant(cls, value: float, interval: Interval) -> "ClosedFormFunction":
        return cls(interval, PolynomialTerm([value]))

    @classmethod
    def oscillation_only(cls, epsilon: float, interval: Interval) -> "ClosedFormFunction":
        return cls(interval, PolynomialTerm([0.0]), OscillationTerm(epsilon))

    @property
    def terms(self) -> list[Term]:
        out: list[Term] = [self.poly]
        if self.oscillation is not None:
            out.append(self.oscillation)
        out.extend(self.plateaus)
        return out

    def with_plateaus(self, plateaus: Iterable[PlateauTerm]) -> "ClosedFormFunction":
        return ClosedFormFunction(self.interval, self.poly, self.oscillation, self.plateaus + tuple(plateaus))

    def without_plateaus(self) -> "ClosedFormFunction":
        return ClosedFormFunction(self.interval, self.poly, self.oscillation)

    def plateau_part(self) -> "ClosedFormFunction":
        return ClosedFormFunction(self.interval, PolynomialTerm([0.0]), None, self.plateaus)

    # evaluation -----------------------------------------------------------

    def derivative(self, t, order: int = 0, *, extended: bool = False):
        """Exact ``order``-th derivative at ``t`` (scalar or array).

        Orders above 4 are only available with ``extended=True`` (used by the
        Faa di Bruno diagnostic).
        """
        if order < 0 or (order > MAX_ORDER and not extended):
            raise UnsupportedOrderError(f"derivative order {order} not supported (max {MAX_ORDER})")
        t = np.asarray(t, dtype=float)
        val = np.asarray(self.poly.derivative(t, order), dtype=float)
        if self.oscillation is not None:
            val = val + self.oscillation.derivative(t, order)
        for p in self.plateaus:
            val = val + p.derivative(t, order)
        if val.shape != t.shape:
            val = np.broadcast_to(val, t.shape).copy()
        return float(val) if val.ndim == 0 else val

    def __call__(self, t):
        return self.derivative(t, 0)

    def derivatives(self, t, n: int, *, extended: bool = False) -> np.ndarray:
        """All derivatives ``0..n`` at once, stacked on the last axis."""
        if n < 0 or (n > MAX_ORDER and not extended):
            raise UnsupportedOrderError(f"derivative order {n} not supported (max {MAX_ORDER})")
        t = np.asarray(t, dtype=float)
        mat = self.poly.derivative_matrix(n)
        if mat.shape[1] == 1:
            out = np.broadcast_to(mat[:, 0], t.shape + (n + 1,)).copy()
        else:
            out = (t[..., None] ** np.arange(mat.shape[1])) @ mat.T
        if self.oscillation is not None:
            cos_w, sin_w = self.oscillation.derivative_weights(n)
            arg = t / self.oscillation.epsilon**2
            out += np.cos(arg)[..., None] * cos_w + np.sin(arg)[..., None] * sin_w
        for p in self.plateaus:
            d = p.derivative_order
            ders = plateau_derivatives(t, p.beta, p.center, p.gamma, n + d)
            for k in range(n + 1):
                out[..., k] += p.weight * ders[k + d]
        return out

    def scalar_derivatives(self, t: float, n: int) -> list[float]:
        """Derivatives ``0..n`` at a single point, in plain floats.

        The same closed forms as :meth:`derivatives` without array overhead;
        used on the integration hot path.
        """
        rows = self.poly.__dict__.get("_horner", {}).get(n)
        if rows is None:
            mat = self.poly.derivative_matrix(n)
            rows = [[float(c) for c in row[::-1]] for row in mat]
            self.poly.__dict__.setdefault("_horner", {})[n] = rows
        out = []
        for row in rows:
            acc = 0.0
            for c in row:
                acc = acc * t + c
            out.append(acc)
        if self.oscillation is not None:
            wa, wb = self.oscillation.derivative_weights(n)
            arg = t / self.oscillation.epsilon**2
            c, s = math.cos(arg), math.sin(arg)
            for k in range(n + 1):
                out[k] += wa[k] * c + wb[k] * s
        for p in self.plateaus:
            if abs(t - p.center) < p.beta:
                d = p.derivative_order
                ders = plateau_derivatives(np.array([t]), p.beta, p.center, p.gamma, n + d)
                for k in range(n + 1):
                    out[k] += p.weight * float(ders[k + d][0])
        return out

    def jet(self, t, start: int = 0, size: int = 3):
        """``(f^(start), ..., f^(start+size-1))`` stacked on the last axis."""
        n = start + size - 1
        return self.derivatives(t, n, extended=n > MAX_ORDER)[..., start:]

    # structure ------------------------------------------------------------

    def min_scale(self) -> float:
        """Smallest feature length: oscillation period or plateau radius."""
        scales = [self.interval.length]
        if self.oscillation is not None:
            scales.append(self.oscillation.period)
        scales.extend(2.0 * p.beta for p in self.plateaus)
        return min(scales)

    def grid(self, per_scale: int = 16, minimum: int = 2001) -> np.ndarray:
        n = max(minimum, int(math.ceil(per_scale * self.interval.length / self.min_scale())) + 1)
        return np.linspace(self.interval.a, self.interval.b, n)

    # serialization ----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "poly": list(self.poly.coefficients),
            "osc_eps": None if self.oscillation is None else self.oscillation.epsilon,
            "plateaus": [
                {"w": p.weight, "beta": p.beta, "center": p.center, "gamma": p.gamma, "d": p.derivative_order}
                for p in self.plateaus
            ],
        }

    @classmethod
    def from_json(cls, obj: dict, interval: Interval) -> "ClosedFormFunction":
        osc = obj.get("osc_eps")
        return cls(
            interval,
            PolynomialTerm(obj.get("poly", [0.0])),
            None if osc is None else OscillationTerm(float(osc)),
            tuple(PlateauTerm(float(p["w"]), float(p["beta"]), float(p["center"]), float(p["gamma"]), int(p.get("d", 0)))
                  for p in obj.get("plateaus", [])),
        )


@dataclass(frozen=True)
class JetPoint:
    y0: float
    y1: float
    y2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.y0, self.y1, self.y2])


@dataclass(frozen=True)
class DerivativeJet:
    y1: float
    y2: float
    y3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.y1, self.y2, self.y3])


def eval_derivative(f: ClosedFormFunction, t: float, order: int) -> float:
    return f.derivative(t, order)


def jet3(f: ClosedFormFunction, t: float) -> JetPoint:
    return JetPoint(f.derivative(t, 0), f.derivative(t, 1), f.derivative(t, 2))


def tangent_jet(f: ClosedFormFunction, t: float) -> DerivativeJet:
    return DerivativeJet(f.derivative(t, 1), f.derivative(t, 2), f.derivative(t, 3))


def jet_norm(f: ClosedFormFunction, t):
    return np.sqrt(sum(np.asarray(f.derivative(t, k)) ** 2 for k in range(3)))


@dataclass(frozen=True)
class NormEstimate:
    """Extremum of a jet-type norm with its location and an error estimate."""

    value: float
    t: float
    error_bound: float


def _squared_norm_derivs(f: ClosedFormFunction, t, start: int):
    """Value, first and second derivative of ``sum_k (f^(k))**2`` over k=start..2."""
    d = [np.asarray(f.derivative(t, k)) for k in range(start, 5)]
    n = 3 - start
    s0 = sum(d[i] ** 2 for i in range(n))
    s1 = sum(2 * d[i] * d[i + 1] for i in range(n))
    s2 = sum(2 * d[i + 1] ** 2 + 2 * d[i] * d[i + 2] for i in range(n))
    return s0, s1, s2


def _extremum(f: ClosedFormFunction, kind: str, start: int, per_period: int) -> NormEstimate:
    if per_period < 4:
        raise ResolutionError(f"{per_period} samples per oscillation period is too coarse (need >= 4)")
    a, b = f.interval.a, f.interval.b
    t = f.grid(per_scale=per_period, minimum=1025)
    s0, _, _ = _squared_norm_derivs(f, t, start)
    sign = 1.0 if kind == "max" else -1.0
    score = sign * s0
    # candidates: discrete local extrema and the two endpoints
    inner = np.nonzero((score[1:-1] >= score[:-2]) & (score[1:-1] >= score[2:]))[0] + 1
    cand = np.unique(np.concatenate([[0, len(t) - 1], inner]))
    best_t = t[cand]
    best_v = s0[cand]
    h = t[1] - t[0]
    tc = t[cand].copy()
    lo = np.maximum(tc - h, a)
    hi = np.minimum(tc + h, b)
    x = tc.copy()
    for _ in range(30):
        _, g1, g2 = _squared_norm_derivs(f, x, start)
        ok = sign * g2 < 0
        step = np.where(ok & (g2 != 0), -g1 / np.where(g2 == 0, 1.0, g2), 0.0)
        x_new = np.clip(x + step, lo, hi)
        if np.all(np.abs(x_new - x) <= 1e-15 * max(1.0, abs(a), abs(b))):
            x = x_new
            break
        x = x_new
    v, _, _ = _squared_norm_derivs(f, x, start)
    better = sign * v > sign * best_v
    best_t = np.where(better, x, best_t)
    best_v = np.where(better, v, best_v)
    i = int(np.argmax(sign * best_v))
    value = math.sqrt(max(float(best_v[i]), 0.0))
    grid_value = math.sqrt(max(float(s0[cand][i]), 0.0))
    err = max(abs(value - grid_value) * 1e-3, 8 * np.finfo(float).eps * max(value, 1.0))
    return NormEstimate(value, float(best_t[i]), err)


def norm_extremum(f: ClosedFormFunction, kind: str = "max", per_period: int = 8) -> NormEstimate:
    """Sup (``kind='max'``) or inf (``'min'``) of the jet norm over the interval.

    A grid with ``per_period`` samples per oscillation period seeds Newton
    polishing of every discrete local extremum.
    """
    return _extremum(f, kind, 0, per_period)


def sup_norm(f: ClosedFormFunction, per_period: int = 8) -> float:
    return norm_extremum(f, "max", per_period).value


def inf_norm(f: ClosedFormFunction, per_period: int = 8) -> float:
    return norm_extremum(f, "min", per_period).value


def immersion_estimate(f: ClosedFormFunction, per_period: int = 8) -> NormEstimate:
    """Inf over the interval of ``sqrt(f'**2 + f''**2)``."""
    return _extremum(f, "min", 1, per_period)


def cancel_oscillation(f: ClosedFormFunction, epsilon: float) -> ClosedFormFunction:
    """Return ``f + eps**4 f''``, which removes the oscillation term exactly."""
    if f.plateaus:
        raise InvalidCombinationError("cancel_oscillation expects a polynomial plus oscillation")
    if f.oscillation is not None and not math.isclose(f.oscillation.epsilon, epsilon, rel_tol=1e-14):
        raise InvalidCombinationError(
            f"oscillation epsilon {f.oscillation.epsilon} does not match {epsilon}")
    p = np.asarray(f.poly.coefficients)
    p2 = np.asarray(f.poly.differentiated(2).coefficients)
    coeffs = p.copy()
    coeffs[: len(p2)] += epsilon**4 * p2
    return ClosedFormFunction(f.interval, PolynomialTerm(coeffs))
