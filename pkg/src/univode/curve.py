"""Geometry of the 3-jet curve ``Gamma(t) = (g, g', g'')``.

Shared by the self-intersection scan and the tube construction: sampling,
curvature, per-cell bounding boxes, and the search for local minima of the
pair distance ``|Gamma(t1) - Gamma(t2)|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .jets import Interval


def curve_derivatives(f, t, k: int) -> list[np.ndarray]:
    """``[Gamma, Gamma', ..., Gamma^(k)]`` at ``t``, each of shape ``t.shape + (3,)``.

    ``f`` is a :class:`ClosedFormFunction` or any object with its own
    ``curve_derivatives`` (e.g. :class:`ParametricCurve`).
    """
    own = getattr(f, "curve_derivatives", None)
    if own is not None:
        return own(t, k)
    d = f.derivatives(t, k + 2, extended=k + 2 > 4)
    return [d[..., j:j + 3] for j in range(k + 1)]


def gamma(f, t) -> np.ndarray:
    return curve_derivatives(f, t, 0)[0]


def dgamma(f, t) -> np.ndarray:
    return curve_derivatives(f, t, 1)[1]


def d2gamma(f, t) -> np.ndarray:
    return curve_derivatives(f, t, 2)[2]


def curvature(f, t) -> np.ndarray:
    _, d1, d2 = curve_derivatives(f, t, 2)
    speed = np.linalg.norm(d1, axis=-1)
    return np.linalg.norm(np.cross(d1, d2), axis=-1) / speed**3


@dataclass(frozen=True)
class ParametricCurve:
    """A space curve given directly by its derivatives, for geometry tests.

    ``func(t, k)`` returns ``Gamma^(k)(t)`` with shape ``t.shape + (3,)``.
    """

    func: Callable
    interval: Interval
    scale: float | None = None

    def curve_derivatives(self, t, k: int) -> list[np.ndarray]:
        t = np.asarray(t, dtype=float)
        return [np.asarray(self.func(t, j), dtype=float) for j in range(k + 1)]

    def grid(self, per_scale: int = 16, minimum: int = 2001) -> np.ndarray:
        n = minimum
        if self.scale:
            n = max(n, int(math.ceil(per_scale * self.interval.length / self.scale)) + 1)
        return np.linspace(self.interval.a, self.interval.b, n)


def circle_curve(radius: float, interval: Interval) -> ParametricCurve:
    """``t -> radius * (cos t, sin t, 0)``."""

    def func(t, k):
        c = radius * np.cos(t + k * math.pi / 2)
        s = radius * np.sin(t + k * math.pi / 2)
        return np.stack([c, s, np.zeros_like(c)], axis=-1)

    return ParametricCurve(func, interval)


def _turning(d1a, d1b) -> np.ndarray:
    na = np.linalg.norm(d1a, axis=-1)
    nb = np.linalg.norm(d1b, axis=-1)
    c = np.sum(d1a * d1b, axis=-1) / np.maximum(na * nb, 1e-300)
    return np.arccos(np.clip(c, -1.0, 1.0))


def _chord_deviation(pts, d_nodes, d_mid) -> np.ndarray:
    """Estimated max distance of each cell's arc from its chord.

    ``chord/2 * tan(theta)`` with ``theta`` twice the largest angle between
    the chord and the tangent at the ends and midpoint.
    """
    chord = pts[1:] - pts[:-1]
    theta = np.maximum.reduce([_turning(d_nodes[:-1], chord), _turning(d_mid, chord),
                               _turning(d_nodes[1:], chord)])
    theta = 2.0 * theta
    clen = np.linalg.norm(chord, axis=-1)
    return np.where(theta < 1.2, 0.5 * clen * np.tan(np.minimum(theta, 1.2)), np.inf)


def adaptive_grid(f, base: np.ndarray, max_turn: float = 0.25, max_radius: float = math.inf,
                  max_levels: int = 60) -> np.ndarray:
    """Refine ``base`` by bisection until every cell is nearly straight.

    A cell is split when the tangent turns by more than ``max_turn`` through
    its midpoint, or when its arc may stray more than ``max_radius`` from
    the chord. The jet curve of ``P + c_eps`` turns by about pi within a
    parameter window of width ``~eps**4`` at the tips of each loop, far
    below any uniform grid spacing.
    """
    t = np.asarray(base, dtype=float)
    for _ in range(max_levels):
        mid = 0.5 * (t[:-1] + t[1:])
        pts, d_nodes = curve_derivatives(f, t, 1)
        d_mid = curve_derivatives(f, mid, 1)[1]
        turn = _turning(d_nodes[:-1], d_mid) + _turning(d_mid, d_nodes[1:])
        split = turn > max_turn
        if math.isfinite(max_radius):
            split |= _chord_deviation(pts, d_nodes, d_mid) > max_radius
        split &= (t[1:] - t[:-1]) > 1e-13 * max(1.0, abs(t[0]), abs(t[-1]))
        if not np.any(split):
            break
        t = np.sort(np.concatenate([t, mid[split]]))
    return t


@dataclass(frozen=True)
class SampledCurve:
    """Curve sampled on a grid with conservative per-cell boxes.

    ``lo[i]``/``hi[i]`` bound ``Gamma`` on ``[t[i], t[i+1]]``: the chord box is
    widened by the smaller of two deviation bounds,

    * ``h_i**2/8 * max|Gamma''|`` (linear interpolation error), with
      ``|Gamma''|`` estimated from the cell ends plus one more derivative
      term and a safety factor 2;
    * ``chord/2 * tan(theta)`` where ``theta`` bounds the angle between the
      tangent and the chord (twice the largest angle seen at the ends and
      midpoint). An arc whose tangent stays within ``theta`` of the chord lies
      within that distance of it.

    The second bound matters where the speed varies wildly along a nearly
    straight piece, as on the jet curves of ``P + c_eps``.
    """

    t: np.ndarray
    points: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    radius: np.ndarray | None = None

    @property
    def h(self) -> float:
        """Largest cell width."""
        return float(np.max(np.diff(self.t)))

    @classmethod
    def build(cls, f, per_scale: int = 16, minimum: int = 2001, max_turn: float = 0.25,
              max_radius: float = math.inf) -> "SampledCurve":
        t = adaptive_grid(f, f.grid(per_scale=per_scale, minimum=minimum), max_turn, max_radius)
        return cls.from_grid(f, t)

    @classmethod
    def from_grid(cls, f, t: np.ndarray) -> "SampledCurve":
        pts, d1, d2, d3 = curve_derivatives(f, t, 3)
        h = np.diff(t)[:, None]
        a2 = np.abs(d2)
        a3 = np.abs(d3)
        bound = np.maximum(a2[:-1], a2[1:]) + h * np.maximum(a3[:-1], a3[1:])
        pad = 2.0 * h * h / 8.0 * bound
        d_mid = curve_derivatives(f, 0.5 * (t[:-1] + t[1:]), 1)[1]
        turn_pad = _chord_deviation(pts, d1, d_mid)
        scale = 1e-13 * np.maximum(np.abs(pts[:-1]), np.abs(pts[1:])).max(axis=-1)
        radius = np.minimum(np.linalg.norm(pad, axis=-1), turn_pad) + scale
        pad = np.minimum(pad, radius[:, None])
        lo = np.minimum(pts[:-1], pts[1:]) - pad
        hi = np.maximum(pts[:-1], pts[1:]) + pad
        return cls(t, pts, lo, hi, radius)

    def capsule_distance(self, x, cells) -> np.ndarray:
        """Lower bound of ``|x - Gamma(t)|`` over each cell: distance to the chord minus the cell radius."""
        return segment_distance(x, self.points[cells], self.points[cells + 1]) - self.radius[cells]

    def max_chord(self) -> float:
        return float(np.max(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


def segment_distance(x, p0, p1) -> np.ndarray:
    """Distance from ``x`` to the segments ``[p0, p1]`` (broadcasting)."""
    d = p1 - p0
    dd = np.sum(d * d, axis=-1)
    u = np.sum((x - p0) * d, axis=-1) / np.where(dd > 0, dd, 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.linalg.norm(x - p0 - u[..., None] * d, axis=-1)


def box_distance(lo1, hi1, lo2, hi2) -> np.ndarray:
    """Euclidean distance between axis-aligned boxes (broadcasting)."""
    gap = np.maximum(0.0, np.maximum(lo1 - hi2, lo2 - hi1))
    return np.sqrt(np.sum(gap * gap, axis=-1))


def _block_boxes(curve: SampledCurve, block: int):
    n_cells = len(curve.t) - 1
    starts = np.arange(0, n_cells, block)
    lo = np.minimum.reduceat(curve.lo, starts, axis=0)
    hi = np.maximum.reduceat(curve.hi, starts, axis=0)
    return starts, lo, hi


def candidate_block_pairs(curve: SampledCurve, threshold: float, block: int = 32):
    """Block index pairs ``(I <= J)`` whose boxes are closer than ``threshold``."""
    starts, lo, hi = _block_boxes(curve, block)
    nb = len(starts)
    pairs = []
    for i in range(nb):
        d = box_distance(lo[i], hi[i], lo[i:], hi[i:])
        js = np.nonzero(d <= threshold)[0] + i
        pairs.append(np.stack([np.full_like(js, i), js], axis=1))
    return starts, np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=int)


def _pair_newton(f, t1, t2, a: float, b: float, max_step: float, iters: int = 40):
    """Vectorized damped Newton on ``|Gamma(t1) - Gamma(t2)|**2`` inside ``[a, b]**2``."""
    t1 = t1.copy()
    t2 = t2.copy()
    for _ in range(iters):
        g1, d1a, s1a = curve_derivatives(f, t1, 2)
        g2, d1b, s1b = curve_derivatives(f, t2, 2)
        r = g1 - g2
        gr1 = 2 * np.sum(r * d1a, axis=1)
        gr2 = -2 * np.sum(r * d1b, axis=1)
        h11 = 2 * (np.sum(d1a * d1a, axis=1) + np.sum(r * s1a, axis=1))
        h22 = 2 * (np.sum(d1b * d1b, axis=1) - np.sum(r * s1b, axis=1))
        h12 = -2 * np.sum(d1a * d1b, axis=1)
        # Levenberg shift keeps the step a descent direction
        lam = np.maximum(0.0, -np.minimum(h11, h22)) + 1e-12 * (np.abs(h11) + np.abs(h22))
        det = (h11 + lam) * (h22 + lam) - h12 * h12
        bad = det <= 0
        lam = np.where(bad, np.abs(h12) + np.abs(h11) + np.abs(h22), lam)
        det = (h11 + lam) * (h22 + lam) - h12 * h12
        dt1 = -((h22 + lam) * gr1 - h12 * gr2) / det
        dt2 = -((h11 + lam) * gr2 - h12 * gr1) / det
        # active bounds: freeze the coordinate, 1-D Newton on the other
        fix1 = ((t1 <= a) & (gr1 > 0)) | ((t1 >= b) & (gr1 < 0))
        fix2 = ((t2 <= a) & (gr2 > 0)) | ((t2 >= b) & (gr2 < 0))
        h22p = np.where(h22 > 0, h22, np.abs(h22) + np.abs(h12) + 1e-300)
        h11p = np.where(h11 > 0, h11, np.abs(h11) + np.abs(h12) + 1e-300)
        dt1 = np.where(fix1, 0.0, np.where(fix2, -gr1 / h11p, dt1))
        dt2 = np.where(fix2, 0.0, np.where(fix1, -gr2 / h22p, dt2))
        scale = np.minimum(1.0, max_step / np.maximum(np.abs(dt1), np.abs(dt2)).clip(1e-300))
        n1 = np.clip(t1 + scale * dt1, a, b)
        n2 = np.clip(t2 + scale * dt2, a, b)
        moved = np.maximum(np.abs(n1 - t1), np.abs(n2 - t2))
        t1, t2 = n1, n2
        if np.all(moved <= 1e-15 * max(1.0, abs(a), abs(b))):
            break
    gap = np.linalg.norm(gamma(f, t1) - gamma(f, t2), axis=1)
    return t1, t2, gap


def pair_minima(f, curve: SampledCurve, threshold: float, sep: float,
                block: int = 32, chunk: int = 512):
    """Local minima of the pair distance with ``t2 - t1 > sep`` and gap below ``threshold``.

    Returns arrays ``(t1, t2, gap)`` sorted by gap, duplicates merged.
    """
    t = curve.t
    pts = curve.points
    n = len(t)
    h = curve.h
    a, b = float(t[0]), float(t[-1])
    chord = curve.max_chord()
    starts, pairs = candidate_block_pairs(curve, threshold, block)
    if len(pairs) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    idx = np.arange(-1, block + 1)
    seeds_i, seeds_j = [], []
    mask_sep = 0.5 * sep
    for c0 in range(0, len(pairs), chunk):
        pc = pairs[c0:c0 + chunk]
        ii = starts[pc[:, 0], None] + idx[None, :]
        jj = starts[pc[:, 1], None] + idx[None, :]
        vi = (ii >= 0) & (ii < n)
        vj = (jj >= 0) & (jj < n)
        pi = pts[np.clip(ii, 0, n - 1)]
        pj = pts[np.clip(jj, 0, n - 1)]
        d = np.linalg.norm(pi[:, :, None, :] - pj[:, None, :, :], axis=-1)
        ti = t[np.clip(ii, 0, n - 1)]
        tj = t[np.clip(jj, 0, n - 1)]
        ok = vi[:, :, None] & vj[:, None, :] & ((tj[:, None, :] - ti[:, :, None]) > mask_sep)
        d = np.where(ok, d, np.inf)
        core = d[:, 1:-1, 1:-1]
        is_min = np.isfinite(core) & (core <= threshold + chord)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                nb = d[:, 1 + di:d.shape[1] - 1 + di, 1 + dj:d.shape[2] - 1 + dj]
                # out-of-range neighbours (interval ends) do not disqualify a minimum
                nb_valid = ok[:, 1 + di:d.shape[1] - 1 + di, 1 + dj:d.shape[2] - 1 + dj] | \
                    ~(vi[:, 1 + di:vi.shape[1] - 1 + di, None] & vj[:, None, 1 + dj:vj.shape[1] - 1 + dj])
                is_min &= nb_valid & ((core <= nb) | ~np.isfinite(nb))
        p, r, c = np.nonzero(is_min)
        seeds_i.append(ii[p, r + 1])
        seeds_j.append(jj[p, c + 1])
    si = np.concatenate(seeds_i)
    sj = np.concatenate(seeds_j)
    if len(si) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    key = np.unique(np.stack([si, sj], axis=1), axis=0)
    t1, t2, gap = _pair_newton(f, t[key[:, 0]], t[key[:, 1]], a, b, max_step=4 * h)
    seed_gap = np.linalg.norm(pts[key[:, 0]] - pts[key[:, 1]], axis=1)
    worse = seed_gap < gap
    t1 = np.where(worse, t[key[:, 0]], t1)
    t2 = np.where(worse, t[key[:, 1]], t2)
    gap = np.where(worse, seed_gap, gap)
    keep = (t2 - t1 > sep) & (gap < threshold)
    t1, t2, gap = t1[keep], t2[keep], gap[keep]
    order = np.argsort(gap)
    t1, t2, gap = t1[order], t2[order], gap[order]
    # merge seeds that polished onto the same minimum
    tol = 0.5 * h
    taken: dict[tuple[int, int], list[int]] = {}
    out = []
    for k in range(len(t1)):
        c1, c2 = int(t1[k] // tol), int(t2[k] // tol)
        near = [m for d1 in (-1, 0, 1) for d2 in (-1, 0, 1) for m in taken.get((c1 + d1, c2 + d2), ())]
        if all(abs(t1[k] - t1[m]) > tol or abs(t2[k] - t2[m]) > tol for m in near):
            out.append(k)
            taken.setdefault((c1, c2), []).append(k)
    out = np.array(out, dtype=int)
    return t1[out], t2[out], gap[out]


def nearest_pair_gap(f, w1, w2, n: int = 65) -> float:
    """Min distance between the curve pieces over two parameter windows."""
    u = np.linspace(w1[0], w1[1], n)
    v = np.linspace(w2[0], w2[1], n)
    pu, pv = gamma(f, u), gamma(f, v)
    d = np.linalg.norm(pu[:, None, :] - pv[None, :, :], axis=-1)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    best = float(d[i, j])
    step = max(u[1] - u[0], v[1] - v[0])
    t1, t2, gap = _pair_newton(f, np.array([u[i]]), np.array([v[j]]),
                               min(w1[0], w2[0]), max(w1[1], w2[1]), max_step=step)
    if w1[0] <= t1[0] <= w1[1] and w2[0] <= t2[0] <= w2[1]:
        best = min(best, float(gap[0]))
    return best


def brute_force_pairs(f, n: int, sep: float, chunk: int = 256):
    """Dense ``n x n`` pair scan: min gap over node pairs with ``t2 - t1 > sep``.

    Independent oracle for the scan; returns ``(gap, t1, t2)``.
    """
    t = np.linspace(f.interval.a, f.interval.b, n)
    p = gamma(f, t)
    best = (math.inf, None, None)
    for s in range(0, n, chunk):
        d = np.linalg.norm(p[s:s + chunk, None, :] - p[None, :, :], axis=-1)
        dt = t[None, :] - t[s:s + chunk, None]
        d = np.where(dt > sep, d, np.inf)
        k = np.unravel_index(np.argmin(d), d.shape)
        if d[k] < best[0]:
            best = (float(d[k]), float(t[s + k[0]]), float(t[k[1]]))
    return best
