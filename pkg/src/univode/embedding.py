"""Near self-intersections of jet curves and their removal by plateau bumps.

The scan reports parameter pairs ``t1 < t2`` where the jet curve comes back
within ``eta`` of itself. :func:`disentangle` adds a small sum of plateau
bumps at the offending sites so the scan comes back empty, while keeping
the jet-norm size of the perturbation under a budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .curve import SampledCurve, dgamma, gamma, nearest_pair_gap, pair_minima
from .errors import DegenerateGeometryError, DisentangleError, ResolutionError, SingularMatrixError
from .jets import ClosedFormFunction, Interval, PlateauTerm, immersion_estimate, sup_norm

V0_CLEARANCE = 1e-3
DEFAULT_GAMMAS = (1.0, 2.0, 1.0)


@dataclass(frozen=True)
class SelfIntersectionRecord:
    t1: float
    t2: float
    gap: float
    cluster: int = -1

    def to_json(self) -> dict:
        return {"t1": self.t1, "t2": self.t2, "gap": self.gap}


def default_separation(f: ClosedFormFunction) -> float:
    """Parameter separation below which pairs count as the same arc: half an oscillation period."""
    if f.oscillation is not None:
        return math.pi * f.oscillation.epsilon**2
    return 0.01 * f.interval.length


def default_eta(f: ClosedFormFunction) -> float:
    return 1e-6


def scan_self_intersections(
    g: ClosedFormFunction,
    eta: float | None = None,
    sep: float | None = None,
    per_period: int = 16,
    minimum: int = 2001,
) -> list[SelfIntersectionRecord]:
    """Parameter pairs whose jet points are closer than ``eta``.

    Each near-intersection is reported once, as a polished local minimum
    of the pair distance; records are clustered into groups of sites that
    map to the same point.
    """
    eta = default_eta(g) if eta is None else eta
    sep = default_separation(g) if sep is None else sep
    if not (eta > 0 and sep > 0):
        raise ValueError("eta and sep must be positive")
    if per_period < 4:
        raise ResolutionError(f"{per_period} grid nodes per oscillation period is too coarse")
    curve = SampledCurve.build(g, per_scale=per_period, minimum=minimum)
    t1, t2, gap = pair_minima(g, curve, eta, sep)
    records = [SelfIntersectionRecord(float(a), float(b), float(c)) for a, b, c in zip(t1, t2, gap)]
    return cluster_records(records, merge_tol=2 * curve.h)


def cluster_records(records: Sequence[SelfIntersectionRecord], merge_tol: float) -> list[SelfIntersectionRecord]:
    """Group records that share a site (parameters within ``merge_tol``)."""
    params = sorted({p for r in records for p in (r.t1, r.t2)})
    parent = list(range(len(params)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pos = {p: i for i, p in enumerate(params)}

    def index(p):
        return pos[p]

    for i in range(1, len(params)):
        if params[i] - params[i - 1] <= merge_tol:
            parent[find(i)] = find(i - 1)
    for r in records:
        parent[find(index(r.t1))] = find(index(r.t2))
    roots = {}
    out = []
    for r in records:
        root = find(index(r.t1))
        cid = roots.setdefault(root, len(roots))
        out.append(SelfIntersectionRecord(r.t1, r.t2, r.gap, cid))
    return out


def group_sites(records: Sequence[SelfIntersectionRecord], merge_tol: float = 0.0) -> dict[int, list[float]]:
    """Distinct parameters per cluster, sorted."""
    groups: dict[int, list[float]] = {}
    for r in records:
        sites = groups.setdefault(r.cluster, [])
        for p in (r.t1, r.t2):
            if all(abs(p - q) > merge_tol for q in sites):
                sites.append(p)
    return {k: sorted(v) for k, v in groups.items()}


def records_to_jsonl(records: Iterable[SelfIntersectionRecord]) -> str:
    return "".join(json.dumps(r.to_json()) + "\n" for r in records)


# --- perturbation building blocks ------------------------------------------


def plateau_matrix(gammas: Sequence[float]) -> np.ndarray:
    """Columns: jets at the centre of ``psi_g1``, ``psi_g2`` and ``psi_g3'``."""
    g1, g2, g3 = gammas
    return np.array([[1.0, 1.0, 0.0], [0.0, 0.0, -g3], [-g1, -g2, 0.0]])


def build_delta(t1: float, V0, beta: float, gammas: Sequence[float], interval: Interval) -> ClosedFormFunction:
    """Plateau combination supported on ``]t1-beta, t1+beta[`` whose 3-jet at ``t1`` is ``V0``."""
    g1, g2, g3 = (float(g) for g in gammas)
    if min(g1, g2, g3) <= 0:
        raise ValueError("gammas must be positive")
    if g1 == g2:
        raise SingularMatrixError("gamma_1 == gamma_2 makes the plateau jet matrix singular")
    v = np.linalg.solve(plateau_matrix((g1, g2, g3)), np.asarray(V0, dtype=float))
    terms = [
        PlateauTerm(float(w), beta, t1, g, d)
        for w, g, d in zip(v, (g1, g2, g3), (0, 0, 1))
        if w != 0.0
    ]
    return ClosedFormFunction(interval, plateaus=tuple(terms))


def _distance_to_span(v: np.ndarray, u: np.ndarray, w: np.ndarray | None) -> float:
    u = np.asarray(u, dtype=float)
    if w is not None:
        n = np.cross(u, w)
        nn = np.linalg.norm(n)
        if nn > 1e-12 * np.linalg.norm(u) * np.linalg.norm(w):
            return abs(float(v @ n)) / nn
        if np.linalg.norm(u) < np.linalg.norm(w):
            u = np.asarray(w, dtype=float)
    un = np.linalg.norm(u)
    if un == 0:
        return float(np.linalg.norm(v))
    return float(np.linalg.norm(v - (v @ u) / un**2 * u))


def choose_V0(
    tangents: Sequence,
    N_max: int = 4,
    seed: int = 0,
    planes: Sequence[tuple] = (),
    threshold: float = V0_CLEARANCE,
    max_tries: int = 1000,
) -> tuple[np.ndarray, float]:
    """Random unit vector clear of the excluded lines and planes.

    ``tangents[0]`` is the tangent at the perturbed site; each other tangent
    spans a plane with it (the order-one exclusions). With a single tangent
    its line is excluded. ``planes`` adds spanning pairs of higher orders,
    already truncated to ``N_max`` by the caller.

    Returns ``(V0, clearance)``.
    """
    tangents = [np.asarray(t, dtype=float) for t in tangents]
    if not tangents or any(np.linalg.norm(t) == 0 for t in tangents):
        raise ValueError("tangents must be nonzero")
    spans: list[tuple] = []
    if len(tangents) == 1:
        spans.append((tangents[0], None))
    else:
        spans.extend((tj, tangents[0]) for tj in tangents[1:])
    spans.extend((np.asarray(u, float), None if w is None else np.asarray(w, float)) for u, w in planes)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        clearance = min(_distance_to_span(v, u, w) for u, w in spans)
        if clearance >= threshold:
            return v, clearance
    raise DegenerateGeometryError(f"no admissible V0 after {max_tries} draws")


# --- Faa di Bruno diagnostic -------------------------------------------------


@dataclass(frozen=True)
class FaaDiBrunoDiagnostic:
    order: int
    alpha: list[float]
    spans: list[tuple[np.ndarray, np.ndarray]]
    line_dimensions: list[int]


def _partitions(n: int, max_part: int):
    """Multiplicity vectors ``m`` (index k -> m_k, k=1..max_part) with ``sum k m_k = n``."""

    def rec(remaining, k):
        if remaining == 0:
            yield {}
            return
        if k == 0:
            return
        for m in range(remaining // k, -1, -1):
            for rest in rec(remaining - m * k, k - 1):
                if m:
                    out = dict(rest)
                    out[k] = m
                    yield out
                else:
                    yield rest

    yield from rec(n, max_part)


def faa_di_bruno_diagnostic(f: ClosedFormFunction, t1: float, tj: float, N_max: int = 4) -> FaaDiBrunoDiagnostic:
    """Coefficients ``alpha_{j,n}`` and the spans ``P_{j,n}``, ``n <= N_max``.

    ``alpha_{j,n}`` is the ``n``-th derivative at 0 of the reparametrization
    ``tau_2`` that keeps ``f^{*3}(tj + tau_2(e)) - f^{*3}(t1 + e)`` orthogonal
    to the tangent at ``tj``, order by order.
    """
    if N_max < 1:
        raise ValueError("N_max must be >= 1")

    def jet_at(t, k):
        return f.jet(t, k, 3)

    u = jet_at(tj, 1)
    uu = float(u @ u)
    if uu == 0:
        raise DegenerateGeometryError("zero tangent at tj")
    alpha: list[float] = []
    spans = []
    dims = []
    for n in range(1, N_max + 1):
        w = jet_at(t1, n) / math.factorial(n)
        for m in _partitions(n, n - 1):
            coef = 1.0
            for l, ml in m.items():
                coef *= alpha[l - 1] ** ml / (math.factorial(ml) * math.factorial(l) ** ml)
            w = w - coef * jet_at(tj, sum(m.values()))
        alpha.append(math.factorial(n) * float(u @ w) / uu)
        spans.append((u, w))
        dims.append(int(np.linalg.matrix_rank(np.stack([u, w]), tol=1e-12 * max(1.0, np.abs(w).max(), np.abs(u).max()))))
    return FaaDiBrunoDiagnostic(N_max, alpha, spans, dims)


# --- margins and disentangling ----------------------------------------------


@dataclass(frozen=True)
class Margins:
    tau: float
    mu: float
    nu: float


def compute_margins(f: ClosedFormFunction, records: Sequence[SelfIntersectionRecord]) -> Margins:
    nu = immersion_estimate(f).value
    if not records:
        return Margins(math.inf, math.inf, nu)
    groups = group_sites(records)
    params = sorted(p for sites in groups.values() for p in sites)
    tau = min(b - a for a, b in zip(params, params[1:])) / 10 if len(params) > 1 else math.inf
    mu = math.inf
    keys = sorted(groups)
    a, b = f.interval.a, f.interval.b
    for gi, gk in combinations(keys, 2):
        for tij in groups[gi]:
            for tkl in groups[gk]:
                w1 = (max(a, tij - tau), min(b, tij + tau))
                w2 = (max(a, tkl - tau), min(b, tkl + tau))
                mu = min(mu, nearest_pair_gap(f, w1, w2))
    return Margins(tau, mu, nu)


@dataclass(frozen=True)
class SitePerturbation:
    t1: float
    V0: tuple[float, float, float]
    beta: float
    gammas: tuple[float, float, float]
    scale: float
    clearance: float
    sup_norm: float


@dataclass
class PerturbationPlan:
    delta: ClosedFormFunction
    sites: list[SitePerturbation]
    rho_budget: float
    margins: Margins
    records: list[SelfIntersectionRecord] = field(default_factory=list)

    @property
    def delta_norm(self) -> float:
        return max((s.sup_norm for s in self.sites), default=0.0)

    def to_json(self) -> dict:
        return {
            "delta": self.delta.to_json(),
            "sites": [
                {"t1": s.t1, "V0": list(s.V0), "beta": s.beta, "gammas": list(s.gammas),
                 "scale": s.scale, "clearance": s.clearance, "sup_norm": s.sup_norm}
                for s in self.sites
            ],
            "rho_budget": self.rho_budget,
            "margins": {"tau": _finite(self.margins.tau), "mu": _finite(self.margins.mu),
                        "nu": _finite(self.margins.nu)},
            "delta_norm": self.delta_norm,
            "records": [r.to_json() for r in self.records],
        }


def _finite(x: float):
    return x if math.isfinite(x) else None


def site_planes(f: ClosedFormFunction, t1: float, others: Sequence[float], N_max: int):
    tangents = [f.jet(t1, 1, 3)] + [f.jet(tj, 1, 3) for tj in others]
    planes = []
    for tj in others:
        diag = faa_di_bruno_diagnostic(f, t1, tj, N_max)
        planes.extend(diag.spans[1:])
    return tangents, planes


def disentangle(
    f: ClosedFormFunction,
    rho: float,
    seed: int = 0,
    eta: float | None = None,
    sep: float | None = None,
    N_max: int = 4,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    max_halvings: int = 20,
    max_rounds: int = 5,
    per_period: int = 16,
) -> tuple[ClosedFormFunction, PerturbationPlan]:
    """Add plateau bumps to ``f`` until its jet curve has no near-intersection below ``eta``.

    Each cluster of sites mapping to one point keeps one site untouched;
    every other site gets a bump whose 3-jet at the site is a random
    direction avoiding the excluded planes. The bump amplitude starts at
    ``min(mu, nu, rho)/10`` in jet sup norm and is halved until the sites'
    windows scan clean.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    eta = default_eta(f) if eta is None else eta
    sep = default_separation(f) if sep is None else sep
    nu0 = immersion_estimate(f).value
    if not nu0 > 0:
        raise DisentangleError("immersion margin is zero; the jet curve is not an immersion")
    a, b = f.interval.a, f.interval.b
    g = f
    sites: list[SitePerturbation] = []
    all_records: list[SelfIntersectionRecord] = []
    margins = Margins(math.inf, math.inf, nu0)
    rng = np.random.default_rng(seed)
    for round_ in range(max_rounds):
        records = scan_self_intersections(g, eta, sep, per_period=per_period)
        if not records:
            break
        all_records.extend(records)
        margins = compute_margins(g, records)
        budget = min(margins.mu, margins.nu, rho) / 10
        occupied = [(s.t1 - s.beta, s.t1 + s.beta) for s in sites]
        for cid, group in group_sites(records).items():
            # leave one site of each cluster unperturbed, preferably one at an end
            ends = [p for p in group if min(p - a, b - p) <= 1e-12 * (b - a)]
            keep = ends[0] if ends else group[-1]
            for t1 in group:
                if t1 == keep:
                    continue
                beta = min(margins.tau, t1 - a, b - t1) * 0.999
                for lo, hi in occupied:
                    if lo < t1 < hi:
                        beta = 0.0
                    else:
                        beta = min(beta, abs(t1 - lo) if t1 < lo else abs(t1 - hi))
                if not beta > 0:
                    raise DisentangleError(f"no room for a bump at t={t1:.6g}", residual=records)
                others = [p for p in group if p != t1]
                tangents, planes = site_planes(g, t1, others, N_max)
                V0, clearance = choose_V0(tangents, N_max, int(rng.integers(2**31)), planes)
                gs, delta, dn = _flattest_delta(t1, V0, beta, gammas, f.interval, per_period)
                scale = 0.99 * budget / dn
                for _ in range(max_halvings):
                    trial = g.with_plateaus(_scaled(delta, scale).plateaus)
                    residual = [
                        r for r in scan_self_intersections(trial, eta, sep, per_period=per_period)
                        if t1 - beta <= r.t1 <= t1 + beta or t1 - beta <= r.t2 <= t1 + beta
                    ]
                    if not residual:
                        break
                    scale *= 0.5
                else:
                    raise DisentangleError(
                        f"site t={t1:.6g} still intersects after {max_halvings} halvings", residual=residual)
                g = trial
                occupied.append((t1 - beta, t1 + beta))
                sites.append(SitePerturbation(float(t1), tuple(float(x) for x in V0), float(beta), gs,
                                              float(scale), float(clearance), float(scale * dn)))
    else:
        residual = scan_self_intersections(g, eta, sep, per_period=per_period)
        if residual:
            raise DisentangleError("near-intersections remain after the last round", residual=residual)
    delta_total = g.plateau_part() if sites else ClosedFormFunction(f.interval)
    if f.plateaus:
        delta_total = ClosedFormFunction(f.interval, plateaus=g.plateaus[len(f.plateaus):])
    plan = PerturbationPlan(delta_total, sites, rho, margins, all_records)
    nu_g = immersion_estimate(g).value
    if nu_g < 0.9 * nu0:
        raise DisentangleError(f"immersion margin dropped from {nu0:.4g} to {nu_g:.4g}")
    return g, plan


GAMMA_SCALES = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)


def _flattest_delta(t1, V0, beta, gammas, interval, per_period):
    """``build_delta`` with gammas ``kappa * gammas / beta**2``, kappa chosen to minimize the jet sup norm.

    Small kappa gives a flat top with near-vertical walls; large kappa a
    narrow spike. Both inflate the norm the amplitude budget is divided by.
    """
    best = None
    for kappa in GAMMA_SCALES:
        gs = tuple(kappa * gm / beta**2 for gm in gammas)
        delta = build_delta(t1, V0, beta, gs, interval)
        dn = sup_norm(delta, per_period=per_period)
        if best is None or dn < best[2]:
            best = (gs, delta, dn)
    return best


def _scaled(delta: ClosedFormFunction, s: float) -> ClosedFormFunction:
    return ClosedFormFunction(
        delta.interval,
        plateaus=tuple(PlateauTerm(p.weight * s, p.beta, p.center, p.gamma, p.derivative_order)
                       for p in delta.plateaus),
    )
