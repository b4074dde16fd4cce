"""Tubes around jet curves and the right-hand side ``F`` built on them.

Inside a tube of radius ``eps`` every point ``x`` has a unique nearest
curve parameter ``t*`` and normal offset ``v = x - Gamma(t*)``. The field is

    F(x) = g'''(t*) * exp(1/eps**2 - 1/(eps**2 - |v|**2))

inside and ``0`` outside, so ``g''' = F(g, g', g'')`` holds on the curve.
A :class:`FieldSpec` sums the fields of several tubes that must not meet.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curve import SampledCurve, adaptive_grid, box_distance, curvature, curve_derivatives, pair_minima
from .errors import DisjointnessError, GeometryError
from .jets import ClosedFormFunction, Interval, inf_norm, sup_norm

TUBE_CAP = 1.0 / 3.0
REACH_SAFETY = 0.9
GRID_PER_PERIOD = 16
BLOCK = 32
NEWTON_ITERS = 40
BRACKET_ITERS = 200
AMBIGUITY_RTOL = 1e-9


def _separation(g) -> float:
    osc = getattr(g, "oscillation", None)
    if osc is not None:
        return math.pi * osc.epsilon**2
    return 0.01 * g.interval.length


@dataclass(frozen=True)
class RadiusEstimate:
    radius: float
    kappa_max: float
    d_min: float


def estimate_tube_radius_details(g, curve: SampledCurve | None = None, sep: float | None = None,
                                 per_scale: int = GRID_PER_PERIOD) -> RadiusEstimate:
    """Radius ``min(1/3, 0.9 * min(1/kappa_max, d_min/2))`` with its two ingredients.

    ``kappa_max`` is the largest curvature over the nodes and cell midpoints
    of the (turning-adaptive) projection grid; ``d_min`` is the smallest local minimum of the chord
    distance between parameters more than ``sep`` apart (``inf`` if none
    matters for the cap).
    """
    curve = SampledCurve.build(g, per_scale=per_scale) if curve is None else curve
    sep = _separation(g) if sep is None else sep
    fine = np.concatenate([curve.t, 0.5 * (curve.t[:-1] + curve.t[1:])])
    kappa = float(np.max(curvature(g, fine)))
    reach = math.inf if kappa == 0 else 1.0 / kappa
    # pairs farther apart than 2 * min(reach, cap/0.9) cannot bind
    threshold = 2.0 * min(reach, TUBE_CAP / REACH_SAFETY)
    _, _, gap = pair_minima(g, curve, threshold, sep)
    d_min = float(gap.min()) if len(gap) else math.inf
    # gaps at round-off level of the curve's coordinates are crossings
    floor = 64 * np.finfo(float).eps * float(np.max(np.abs(curve.points)))
    if d_min <= floor:
        raise GeometryError(f"jet curve meets itself (d_min = {d_min:.3g}); disentangle it first")
    radius = min(TUBE_CAP, REACH_SAFETY * min(reach, d_min / 2.0))
    if not radius > 0:
        raise GeometryError(f"tube radius {radius} is not positive")
    return RadiusEstimate(radius, kappa, d_min)


def estimate_tube_radius(g, curve: SampledCurve | None = None, sep: float | None = None) -> float:
    return estimate_tube_radius_details(g, curve, sep).radius


@dataclass(frozen=True)
class Projection:
    t_star: float
    v: np.ndarray
    v_norm: float
    inside: bool
    ambiguous: bool = False


@dataclass(frozen=True)
class ProjectionBatch:
    """Projections of many points; ``g3`` holds the third derivative at ``t_star``."""

    t_star: np.ndarray
    v: np.ndarray
    v_norm: np.ndarray
    inside: np.ndarray
    ambiguous: np.ndarray
    g3: np.ndarray

    def item(self, k: int) -> Projection:
        return Projection(float(self.t_star[k]), self.v[k], float(self.v_norm[k]),
                          bool(self.inside[k]), bool(self.ambiguous[k]))


def end_margin(g) -> float:
    """Parameter margin by which a tube extends its curve past ``[a, b]``.

    A quarter oscillation period (1% of the interval without oscillation). The
    closed form continues past the ends, so trajectories that reach ``t = b``
    (integrator stages land there) still project onto an interior point.
    """
    osc = getattr(g, "oscillation", None)
    if osc is not None:
        return min(0.25 * osc.period, 0.01 * g.interval.length)
    return 0.01 * g.interval.length


def tube_grid(g, grid_n: int, max_radius: float = math.inf) -> np.ndarray:
    m = end_margin(g)
    return adaptive_grid(g, np.linspace(g.interval.a - m, g.interval.b + m, grid_n), max_radius=max_radius)


@dataclass
class TubeSpec:
    """A jet curve with its tube radius and cached projection grid.

    ``grid_n`` is the size of the uniform base grid over the parameter
    domain (``[a, b]`` widened by :func:`end_margin`); the projection grid
    refines it where the curve turns fast, deterministically, so the JSON
    form rebuilds the same grid.
    """

    g: ClosedFormFunction
    epsilon_tube: float
    grid_n: int
    curve: SampledCurve = field(init=False, repr=False)
    max_speed: float = field(init=False)
    max_curvature: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.epsilon_tube <= TUBE_CAP * (1 + 1e-12):
            raise GeometryError(f"tube radius {self.epsilon_tube} outside (0, 1/3]")
        if self.grid_n < 3:
            raise ValueError("grid_n must be >= 3")
        t = tube_grid(self.g, self.grid_n)
        self.domain = (float(t[0]), float(t[-1]))
        self.curve = SampledCurve.from_grid(self.g, t)
        _, d1, _ = curve_derivatives(self.g, t, 2)
        self.max_speed = float(np.max(np.linalg.norm(d1, axis=-1)))
        self.max_curvature = float(np.max(curvature(self.g, t)))
        starts = np.arange(0, len(t) - 1, BLOCK)
        self._starts = starts
        self._block_lo = np.minimum.reduceat(self.curve.lo, starts, axis=0)
        self._block_hi = np.maximum.reduceat(self.curve.hi, starts, axis=0)

    @classmethod
    def build(cls, g, epsilon_tube: float | None = None, grid_n: int | None = None,
              sep: float | None = None) -> "TubeSpec":
        if grid_n is None:
            grid_n = len(g.grid(per_scale=GRID_PER_PERIOD))
        if epsilon_tube is None:
            t = tube_grid(g, grid_n)
            epsilon_tube = estimate_tube_radius(g, SampledCurve.from_grid(g, t), sep)
        return cls(g, float(epsilon_tube), int(grid_n))

    @property
    def interval(self) -> Interval:
        return self.g.interval

    def to_json(self) -> dict:
        return {"g": self.g.to_json(), "eps": self.epsilon_tube, "grid_n": self.grid_n}

    # projection -------------------------------------------------------------

    def _candidates(self, x: np.ndarray, radius: np.ndarray):
        """(point, cell) pairs whose cell box is within ``radius`` of the point."""
        blo, bhi = self._block_lo, self._block_hi
        n_cells = len(self.curve.t) - 1
        pts, cells = [], []
        for c0 in range(0, len(x), 256):
            xc = x[c0:c0 + 256]
            lb = box_distance(xc[:, None, :], xc[:, None, :], blo[None], bhi[None])
            pi, bi = np.nonzero(lb <= radius[c0:c0 + 256, None])
            if len(pi) == 0:
                continue
            cc = self._starts[bi][:, None] + np.arange(BLOCK)[None, :]
            pp = np.broadcast_to((pi + c0)[:, None], cc.shape)
            valid = cc < n_cells
            cc, pp = cc[valid], pp[valid]
            lb = self.curve.capsule_distance(x[pp], cc)
            keep = lb <= radius[pp]
            pts.append(pp[keep])
            cells.append(cc[keep])
        if not pts:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return np.concatenate(pts), np.concatenate(cells)

    def _cell_minimize(self, x: np.ndarray, cells: np.ndarray):
        """Minimize ``|Gamma(t) - x|`` over each cell: bracketed Newton on ``phi = (Gamma - x) . Gamma'``.

        Newton steps leaving the bracket, or taken where ``phi' <= 0``, are
        replaced by bisection.
        """
        g = self.g
        t = self.curve.t
        lo, hi = t[cells].copy(), t[cells + 1].copy()

        def phi(s, xs):
            p, d1, d2 = curve_derivatives(g, s, 2)
            r = p - xs
            return np.sum(r * d1, axis=-1), np.sum(d1 * d1, axis=-1) + np.sum(r * d2, axis=-1), r

        k = len(lo)
        both_f, _, both_r = phi(np.concatenate([lo, hi]), np.concatenate([x, x]))
        f_lo, f_hi = both_f[:k], both_f[k:]
        r_lo, r_hi = both_r[:k], both_r[k:]
        at_lo = f_lo >= 0
        at_hi = f_hi <= 0
        both = at_lo & at_hi
        pick_lo = at_lo & ~(both & (np.sum(r_hi * r_hi, -1) < np.sum(r_lo * r_lo, -1)))
        s = np.where(pick_lo, lo, hi)
        active = ~(at_lo | at_hi)
        if np.any(active):
            idx = np.nonzero(active)[0]
            a_, b_ = lo[idx], hi[idx]
            xa = x[idx]
            fa, fb = f_lo[idx], f_hi[idx]
            cur = a_ - fa * (b_ - a_) / (fb - fa)
            live = np.arange(len(idx))
            for _ in range(BRACKET_ITERS):
                c, lo_, hi_ = cur[live], a_[live], b_[live]
                p, d1, d2 = curve_derivatives(g, c, 2)
                r = p - xa[live]
                fv = np.sum(r * d1, axis=-1)
                dv = np.sum(d1 * d1, axis=-1) + np.sum(r * d2, axis=-1)
                neg = fv < 0
                lo_ = np.where(neg, c, lo_)
                hi_ = np.where(neg, hi_, c)
                with np.errstate(divide="ignore", invalid="ignore"):
                    nxt = c - fv / dv
                bad = ~(dv > 0) | ~(nxt > lo_) | ~(nxt < hi_)
                nxt = np.where(bad, 0.5 * (lo_ + hi_), nxt)
                nxt = np.where(fv == 0, c, nxt)
                tol = 4 * np.spacing(np.abs(nxt)) + 1e-300
                done = (np.abs(nxt - c) <= tol) | (fv == 0) | (hi_ - lo_ <= tol)
                cur[live], a_[live], b_[live] = nxt, lo_, hi_
                live = live[~done]
                if len(live) == 0:
                    break
            s[idx] = cur
            p = curve_derivatives(g, cur, 0)[0]
            d = np.sqrt(np.where(pick_lo, np.sum(r_lo * r_lo, -1), np.sum(r_hi * r_hi, -1)))
            d[idx] = np.linalg.norm(xa - p, axis=-1)
            return s, d
        return s, np.sqrt(np.where(pick_lo, np.sum(r_lo * r_lo, -1), np.sum(r_hi * r_hi, -1)))

    def project_many(self, x, radius=None) -> "ProjectionBatch":
        """Vectorized projection of points ``x`` (shape ``(m, 3)``).

        With ``radius`` given, only curve cells within ``radius`` are searched:
        points farther than that are reported outside with ``t_star = nan``.
        Without it, the nearest grid node bounds the search so the global
        minimizer is always found.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = len(x)
        if radius is None:
            node_d = np.full(m, np.inf)
            for c0 in range(0, m, 64):
                d = np.linalg.norm(x[c0:c0 + 64, None, :] - self.curve.points[None], axis=-1)
                node_d[c0:c0 + 64] = d.min(axis=1)
            radius = node_d * (1 + 1e-12) + 1e-300
        else:
            radius = np.broadcast_to(np.asarray(radius, dtype=float), (m,))
        pi, cells = self._candidates(x, radius)
        t_star = np.full(m, np.nan)
        dist = np.full(m, np.inf)
        ambiguous = np.zeros(m, dtype=bool)
        if len(pi):
            s, d = self._cell_minimize(x[pi], cells)
            order = np.lexsort((d, pi))
            pi_o, s_o, d_o = pi[order], s[order], d[order]
            first = np.ones(len(pi_o), dtype=bool)
            first[1:] = pi_o[1:] != pi_o[:-1]
            t_star[pi_o[first]] = s_o[first]
            dist[pi_o[first]] = d_o[first]
            # a second minimizer away from t* at (nearly) the same distance
            far = np.abs(s_o - t_star[pi_o]) > 2 * self.curve.h
            second = np.full(m, np.inf)
            np.minimum.at(second, pi_o[far], d_o[far])
            scale = np.maximum(dist, 1e-300)
            ambiguous = second <= dist + AMBIGUITY_RTOL * scale + 1e-14
        found = np.isfinite(t_star)
        v = np.full((m, 3), np.nan)
        g3 = np.full(m, np.nan)
        inside = np.zeros(m, dtype=bool)
        if np.any(found):
            tf = t_star[found]
            p, d1 = curve_derivatives(self.g, tf, 1)
            vf = x[found] - p
            v[found] = vf
            g3[found] = d1[:, 2]
            vn = np.linalg.norm(vf, axis=-1)
            dist[found] = vn
            a, b = self.domain
            interior = (tf > a) & (tf < b)
            normal = np.abs(np.sum(vf * d1, axis=-1)) <= 1e-9 * vn * np.linalg.norm(d1, axis=-1) + 1e-300
            inside[found] = (vn < self.epsilon_tube) & (interior | normal) & ~ambiguous[found]
        return ProjectionBatch(t_star, v, dist, inside, ambiguous, g3)

    def locate_from_hint(self, x, hint: float):
        """Scalar projection started from a nearby parameter ``hint``.

        Newton on ``phi(t) = (Gamma(t) - x) . Gamma'(t)`` from the hint. A
        stationary point with ``phi' > 0`` at distance below ``epsilon_tube``
        is the unique nearest point, because ``epsilon_tube`` stays below the
        reach of the curve. Returns ``(t_star, v_norm, g3)`` or ``None`` when
        Newton does not settle or lands outside the tube (the caller then
        falls back to :meth:`project_many`).
        """
        g = self.g
        lo_d, hi_d = self.domain
        x0, x1, x2 = float(x[0]), float(x[1]), float(x[2])
        t = float(hint)
        tol = 4 * math.ulp(t) + 1e-300
        converged = False
        for _ in range(NEWTON_ITERS):
            d = g.scalar_derivatives(t, 4)
            r0, r1, r2 = d[0] - x0, d[1] - x1, d[2] - x2
            fv = r0 * d[1] + r1 * d[2] + r2 * d[3]
            dv = d[1] * d[1] + d[2] * d[2] + d[3] * d[3] + r0 * d[2] + r1 * d[3] + r2 * d[4]
            if not dv > 0:
                return None
            step = -fv / dv
            t += step
            if not lo_d < t < hi_d:
                return None
            tol = 4 * math.ulp(t) + 1e-300
            if abs(step) <= tol:
                converged = True
                break
        # the last few ulps of t are noise when |Gamma'| is large
        if not converged and not abs(step) <= 1e3 * tol + 1e-15 * self.curve.h:
            return None
        d = g.scalar_derivatives(t, 3)
        v0, v1, v2 = x0 - d[0], x1 - d[1], x2 - d[2]
        dist = math.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
        if dist >= self.epsilon_tube:
            return None
        return t, dist, d[3]

    def eval_point(self, x, hint: float | None = None) -> tuple[float, float | None, float]:
        """``F_n(x)`` for one point, the foot parameter (next hint) and the distance ``|v|``.

        Outside the tube the foot is ``None`` and the distance ``inf``.
        """
        eps = self.epsilon_tube
        res = None if hint is None or not math.isfinite(hint) else self.locate_from_hint(x, hint)
        if res is None:
            pr = self.project_many(np.asarray(x, dtype=float)[None, :], radius=eps)
            if not pr.inside[0]:
                return 0.0, None, math.inf
            t, dist, g3 = float(pr.t_star[0]), float(pr.v_norm[0]), float(pr.g3[0])
        else:
            t, dist, g3 = res
        r2 = dist * dist
        return g3 * math.exp(-r2 / (eps**2 * (eps**2 - r2))), t, dist

    def project(self, x) -> Projection:
        return self.project_many(np.asarray(x, dtype=float)[None, :]).item(0)

    def can(self, t, v) -> np.ndarray:
        """``Gamma(t) + v``."""
        return curve_derivatives(self.g, t, 0)[0] + np.asarray(v)

    def third_derivative(self, t):
        """``g'''(t)``, the last component of the tangent."""
        return curve_derivatives(self.g, t, 1)[1][..., 2]

    # field ------------------------------------------------------------------

    def eval_many(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eps = self.epsilon_tube
        pr = self.project_many(x, radius=eps)
        inside = pr.inside
        out = np.zeros(len(x))
        if np.any(inside):
            r2 = pr.v_norm[inside] ** 2
            # 1/eps^2 - 1/(eps^2 - r^2), written to vanish exactly at r = 0
            expo = -r2 / (eps**2 * (eps**2 - r2))
            out[inside] = pr.g3[inside] * np.exp(expo)
        return out


def bump_factor(v_norm: float, eps: float) -> float:
    if v_norm >= eps:
        return 0.0
    r2 = v_norm * v_norm
    return math.exp(-r2 / (eps**2 * (eps**2 - r2)))


def eval_F_tube(tube: TubeSpec, x) -> float:
    return float(tube.eval_many(np.asarray(x, dtype=float)[None, :])[0])


@dataclass
class FieldSpec:
    """Ordered tubes defining ``F = sum_n F_n``."""

    interval: Interval
    tubes: list[TubeSpec] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"interval": self.interval.to_list(), "tubes": [t.to_json() for t in self.tubes]}
        if self.metadata:
            out["metadata"] = self.metadata
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "FieldSpec":
        try:
            a, b = (float(v) for v in obj["interval"])
            interval = Interval(a, b)
            tubes = [TubeSpec(ClosedFormFunction.from_json(t["g"], interval), float(t["eps"]), int(t["grid_n"]))
                     for t in obj["tubes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed field description: {exc}") from exc
        return cls(interval, tubes, dict(obj.get("metadata", {})))

    @classmethod
    def loads(cls, text: str) -> "FieldSpec":
        return cls.from_json(json.loads(text))

    def eval_many(self, x, debug: bool = True) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        total = np.zeros(len(x))
        hits = np.zeros(len(x), dtype=int)
        for tube in self.tubes:
            val = tube.eval_many(x)
            hits += val != 0
            total += val
        if debug and np.any(hits > 1):
            k = int(np.argmax(hits > 1))
            raise DisjointnessError(f"two tubes contribute at x = {x[k].tolist()}")
        return total

    def __call__(self, x) -> float:
        return float(self.eval_many(np.asarray(x, dtype=float)[None, :])[0])

    def locate(self, x):
        """``(tube index, projection)`` of the tube containing ``x``, or ``(None, None)``."""
        for n, tube in enumerate(self.tubes):
            pr = tube.project(x)
            if pr.inside:
                return n, pr
        return None, None


def eval_F(field_: FieldSpec, x, debug: bool = True) -> float:
    return float(field_.eval_many(np.asarray(x, dtype=float)[None, :], debug=debug)[0])


@dataclass(frozen=True)
class DisjointnessReport:
    ok: bool
    min_slack: float
    slacks: list[float]
    offending: tuple[int, int] | None = None

    def to_json(self) -> dict:
        return {"ok": self.ok, "min_slack": _finite(self.min_slack), "slacks": self.slacks,
                "offending": None if self.offending is None else list(self.offending)}


def _finite(x):
    return x if math.isfinite(x) else None


def verify_disjointness(field_: FieldSpec) -> DisjointnessReport:
    """Norm-shell test: ``sup_norm(g_n) + 1 < inf_norm(g_{n+1})`` and ``2 eps < 1`` for every tube.

    Two jet points whose norms differ by at least 1 are at distance at
    least 1, so tubes of radius below 1/2 around them cannot meet.
    """
    tubes = field_.tubes
    for n, tube in enumerate(tubes):
        if not 2 * tube.epsilon_tube < 1:
            return DisjointnessReport(False, 1 - 2 * tube.epsilon_tube, [], (n, n))
    if len(tubes) < 2:
        return DisjointnessReport(True, math.inf, [])
    sups = [sup_norm(t.g) for t in tubes]
    infs = [inf_norm(t.g) for t in tubes]
    slacks = []
    offending = None
    for n in range(len(tubes) - 1):
        slack = infs[n + 1] - sups[n] - 1.0
        slacks.append(slack)
        if slack <= 0 and offending is None:
            offending = (n, n + 1)
    return DisjointnessReport(offending is None, min(slacks), slacks, offending)


def build_field(functions: Sequence[ClosedFormFunction], interval: Interval,
                radii: Sequence[float | None] | None = None, metadata: dict | None = None) -> FieldSpec:
    radii = [None] * len(functions) if radii is None else list(radii)
    tubes = [TubeSpec.build(g, r) for g, r in zip(functions, radii)]
    return FieldSpec(interval, tubes, dict(metadata or {}))
