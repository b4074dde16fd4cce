"""Integration of ``y''' = F(y, y', y'')`` and the end-to-end approximation workflow.

The third-order equation is solved as the first-order system
``(y, y1, y2)' = (y1, y2, F(y, y1, y2))`` with an adaptive Dormand-Prince
5(4) pair. Outside every tube ``F = 0``, so solutions there are quadratics.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .approximants import TargetFunction, approximant, feasible_epsilon, fit_polynomial, max_error
from .embedding import PerturbationPlan, disentangle
from .errors import DisjointnessError, EscapeError, SingularDenominatorError, StiffnessError
from .jets import ClosedFormFunction
from .tube import FieldSpec, build_field

SAFETY = 0.8
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
UNDERFLOW = 1e-14
MAX_STEPS = 2_000_000
GUARD_FRACTION = 0.5

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
# quartic continuous extension: y(t + s h) = y + h * (K.T @ _P) @ (s, s^2, s^3, s^4)
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


@dataclass(frozen=True)
class OdeState:
    t: float
    y: tuple[float, ...]


@dataclass
class TrajectoryStats:
    steps: int = 0
    rejections: int = 0
    guard_rejections: int = 0
    rhs_evals: int = 0
    max_error_estimate: float = 0.0


@dataclass
class Trajectory:
    """Accepted steps ``(t, y, y')`` with dense output.

    ``t`` runs in the direction of integration. ``coeffs[m]`` holds the
    quartic continuous extension of step ``m`` (NaN where a projection moved
    the end point, or without stages); those steps use cubic Hermite instead.
    """

    t: np.ndarray
    y: np.ndarray
    dy: np.ndarray
    stats: TrajectoryStats = field(default_factory=TrajectoryStats)
    coeffs: np.ndarray | None = None

    @property
    def samples(self) -> list[OdeState]:
        return [OdeState(float(t), tuple(map(float, y))) for t, y in zip(self.t, self.y)]

    def _locate(self, ts):
        t = self.t
        n = len(t)
        if t[-1] < t[0]:
            m = n - 2 - np.clip(np.searchsorted(t[::-1], ts, side="right") - 1, 0, n - 2)
        else:
            m = np.clip(np.searchsorted(t, ts, side="right") - 1, 0, n - 2)
        h = (t[m + 1] - t[m])[..., None]
        s = ((ts - t[m]) / (t[m + 1] - t[m]))[..., None]
        return m, h, s

    def _dense(self, ts, deriv: bool) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        m, h, s = self._locate(ts)
        y, dy = self.y, self.dy
        if deriv:
            out = ((6 * s * s - 6 * s) * (y[m + 1] - y[m]) / h
                   + (3 * s * s - 4 * s + 1) * dy[m] + (3 * s * s - 2 * s) * dy[m + 1])
        else:
            out = ((1 + 2 * s) * (1 - s) ** 2 * y[m] + s * (1 - s) ** 2 * h * dy[m]
                   + s * s * (3 - 2 * s) * y[m + 1] + s * s * (s - 1) * h * dy[m + 1])
        if self.coeffs is None:
            return out
        q = self.coeffs[m]
        if deriv:
            powers = np.concatenate([np.ones_like(s), 2 * s, 3 * s**2, 4 * s**3], -1)
            quart = np.einsum("...dj,...j->...d", q, powers)
        else:
            powers = np.concatenate([s, s**2, s**3, s**4], -1)
            quart = y[m] + h * np.einsum("...dj,...j->...d", q, powers)
        ok = np.isfinite(quart)
        return np.where(ok, quart, out)

    def __call__(self, ts) -> np.ndarray:
        """Dense output at ``ts`` (shape ``ts.shape + (dim,)``)."""
        return self._dense(ts, False)

    def derivative(self, ts) -> np.ndarray:
        """Time derivative of the dense output."""
        return self._dense(ts, True)

    def defect(self, fun: Callable, ts) -> np.ndarray:
        """``|derivative - fun(t, dense)|`` at ``ts`` (one row per time)."""
        ts = np.asarray(ts, dtype=float)
        states = self(ts)
        rhs = np.array([np.asarray(fun(t, x), dtype=float) for t, x in zip(ts, states)])
        return np.abs(self.derivative(ts) - rhs)

    def report_grid(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = sorted((float(self.t[0]), float(self.t[-1])))
        tg = np.linspace(lo, hi, n)
        return tg, self(tg)


def _initial_step(fun, t0, y0, f0, direction, rtol, atol, span) -> float:
    # Hairer, Norsett & Wanner starting step heuristic
    scale = atol + np.abs(y0) * rtol
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fun(t0 + direction * h0, y0 + direction * h0 * f0)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def _coeffs(qs: list, dim: int) -> np.ndarray:
    return np.array(qs) if qs else np.empty((0, dim, 4))


def solve(fun: Callable, t0: float, t1: float, y0, rtol: float = 1e-9, atol: float = 1e-12,
          first_step: float | None = None, fixed_step: float | None = None,
          on_step: Callable | None = None, span_scale: float | None = None) -> Trajectory:
    """Integrate ``y' = fun(t, y)`` from ``t0`` to ``t1`` (either direction).

    ``fixed_step`` disables error control (used for order checks).
    When ``fun`` has ``begin_step(y)``/``step_ok()`` hooks a step is rejected
    whenever ``step_ok()`` returns false after its stages.
    ``on_step(t, y)`` runs after every accepted step and may raise; a
    non-``None`` return value replaces ``y`` (projection methods).
    A step shrinking below ``1e-14 * span_scale`` raises
    :class:`StiffnessError` carrying the partial trajectory.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    t0, t1 = float(t0), float(t1)
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    h_min = UNDERFLOW * (span if span_scale is None else span_scale)
    y = np.array(y0, dtype=float)
    stats = TrajectoryStats()

    def f(t, yy):
        stats.rhs_evals += 1
        return np.asarray(fun(t, yy), dtype=float)

    fy = f(t0, y)
    ts, ys, dys, qs = [t0], [y.copy()], [fy.copy()], []
    t = t0
    if fixed_step is not None:
        h = float(fixed_step)
    elif first_step is not None:
        h = float(first_step)
    else:
        h = _initial_step(f, t0, y, fy, direction, rtol, atol, span)
    k = np.empty((7, len(y)))
    guarded = hasattr(fun, "begin_step") and fixed_step is None
    rejected = False
    while direction * (t1 - t) > 0:
        if stats.steps >= MAX_STEPS:
            raise StiffnessError(f"step budget {MAX_STEPS} exhausted at t={t:.6g}",
                                 trajectory=Trajectory(np.array(ts), np.array(ys), np.array(dys), stats, _coeffs(qs, len(y))))
        h = min(h, abs(t1 - t))
        last = abs(t1 - t) <= h * (1 + 1e-12)
        if last:
            h = abs(t1 - t)
        hs = direction * h
        k[0] = fy
        if guarded:
            fun.begin_step(y)
        for i in range(1, 7):
            k[i] = f(t + _C[i] * hs, y + hs * (np.dot(_A[i], k[:i])))
        y_new = y + hs * (_B @ k)
        t_new = t1 if last else t + hs
        if guarded and not fun.step_ok():
            # F vanishes off the support, so a step that jumps clear of it looks exact
            err = math.inf
        elif fixed_step is not None:
            err = 0.0
        else:
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.sqrt(np.mean((hs * (_E @ k) / scale) ** 2)))
        if err <= 1.0:
            t, y, fy = t_new, y_new, k[6].copy()
            ts.append(t)
            ys.append(y.copy())
            dys.append(fy.copy())
            qs.append(k.T @ _P)
            stats.steps += 1
            stats.max_error_estimate = max(stats.max_error_estimate, err)
            if on_step is not None:
                try:
                    moved = on_step(t, y)
                except EscapeError as exc:
                    exc.trajectory = Trajectory(np.array(ts), np.array(ys), np.array(dys), stats, _coeffs(qs, len(y)))
                    raise
                if moved is not None:
                    y = np.array(moved, dtype=float)
                    fy = f(t, y)
                    ys[-1], dys[-1] = y.copy(), fy.copy()
                    qs[-1] = np.full_like(qs[-1], np.nan)
            if fixed_step is None:
                factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * err**-0.2)
                # no growth straight after a rejection
                h *= 1.0 if rejected else max(1.0, factor)
                rejected = False
        else:
            stats.rejections += 1
            rejected = True
            if err == math.inf:
                stats.guard_rejections += 1
                h *= 0.5
            else:
                factor = SAFETY * err**-0.2 if math.isfinite(err) else MIN_FACTOR
                h *= max(MIN_FACTOR, factor)
            if h < h_min:
                raise StiffnessError(
                    f"step size {h:.3g} underflowed at t={t:.6g}",
                    trajectory=Trajectory(np.array(ts), np.array(ys), np.array(dys), stats, _coeffs(qs, len(y))))
    return Trajectory(np.array(ts), np.array(ys), np.array(dys), stats, _coeffs(qs, len(y)))


class FieldRhs:
    """``(y, y1, y2) -> (y1, y2, F)``, remembering the last foot parameter in every tube."""

    def __init__(self, field_: FieldSpec):
        self.field = field_
        self.hints: list[float | None] = [None] * len(field_.tubes)
        self._seen: dict[tuple, int | None] = {}
        self._start: int | None = None
        self._mixed = False

    def begin_step(self, y):
        key = tuple(y)
        if key not in self._seen:
            self.F(y)
        self._start = self._seen[key]
        self._seen = {key: self._start}
        self._mixed = False

    def step_ok(self) -> bool:
        """False if a step starting deep inside a tube had a stage outside that core."""
        return not self._mixed

    def F(self, x) -> float:
        total, hits, where = 0.0, 0, None
        for n, tube in enumerate(self.field.tubes):
            val, hint, dist = tube.eval_point(x, self.hints[n])
            if hint is not None:
                self.hints[n] = hint
                # only the inner half counts: a drifting trajectory may leave freely
                if dist < GUARD_FRACTION * tube.epsilon_tube:
                    where = n
            if val != 0.0:
                total += val
                hits += 1
        if hits > 1:
            raise DisjointnessError(f"two tubes contribute at x = {list(map(float, x))}")
        if self._start is not None and where != self._start:
            self._mixed = True
        self._seen[tuple(x)] = where
        return total

    def __call__(self, t, y) -> np.ndarray:
        return np.array([y[1], y[2], self.F(y)])


def integrate(field_: FieldSpec, y0, t0: float, t1: float, rel_tol: float = 1e-9,
              abs_tol: float = 1e-12, on_step: Callable | None = None) -> Trajectory:
    """Solve ``y''' = F(y, y', y'')`` with ``(y, y', y'')(t0) = y0``."""
    rhs = FieldRhs(field_)
    return solve(rhs, t0, t1, y0, rel_tol, abs_tol, on_step=on_step, span_scale=field_.interval.length)


def report_points(g: ClosedFormFunction, minimum: int = 2001, per_period: int = 16) -> int:
    """Uniform report grid size: at least ``per_period`` points per oscillation period."""
    n = minimum
    if g.oscillation is not None:
        n = max(n, int(math.ceil(per_period * g.interval.length / g.oscillation.period)) + 1)
    return n


@dataclass
class TrackingResult:
    error: float
    trajectory: Trajectory
    grid: np.ndarray
    values: np.ndarray
    reference: np.ndarray


def track(field_: FieldSpec, n: int = 0, rel_tol: float = 1e-9, abs_tol: float | None = None,
          control: bool = False, report_n: int | None = None, stabilize: bool = False) -> TrackingResult:
    """Integrate from the 3-jet of tube ``n``'s curve at ``a`` and compare with the curve.

    With ``control=True`` the same initial data is integrated with ``F = 0``.
    Leaving tube ``n`` raises :class:`EscapeError`.

    The curve is invariant but transversally unstable. Off the curve the
    bump lowers ``|F|`` by about ``|g'''| |v|^2 / eps^4``, so an offset grows
    like ``dv/dt ~ |g'''| v^2 / eps^4`` and for thin tubes round-off alone
    escapes within a few periods. ``stabilize=True`` projects each accepted
    state back onto the curve (a projection method for a known invariant
    set). The error then measures phase drift ``|t* - t|``, which still
    exposes a wrong on-curve ``F``.
    """
    if not 0 <= n < len(field_.tubes):
        raise IndexError(f"no tube {n}; field has {len(field_.tubes)}")
    tube = field_.tubes[n]
    g = tube.g
    a, b = field_.interval.a, field_.interval.b
    abs_tol = rel_tol * 1e-3 if abs_tol is None else abs_tol
    y0 = g.jet(a, 0, 3)
    if control:
        traj = integrate(FieldSpec(field_.interval, []), y0, a, b, rel_tol, abs_tol)
    else:
        state = {"hint": a}

        def check(t, y):
            res = tube.locate_from_hint(y, state["hint"])
            if res is None:
                pr = tube.project(y)
                if not pr.inside:
                    raise EscapeError(f"trajectory left tube {n} at t={t:.6g}", exit_time=float(t))
                state["hint"] = pr.t_star
            else:
                state["hint"] = res[0]
            return g.jet(state["hint"], 0, 3) if stabilize else None

        try:
            traj = integrate(field_, y0, a, b, rel_tol, abs_tol, on_step=check)
        except StiffnessError as exc:
            if exc.trajectory is not None:
                pr = tube.project(exc.trajectory.y[-1])
                exc.args = (f"{exc.args[0]}; distance from the curve {pr.v_norm:.3g} "
                            f"(tube radius {tube.epsilon_tube:.3g})",)
            raise
    m = report_n or report_points(g)
    tg, yg = traj.report_grid(m)
    ref = g(tg)
    err = float(np.max(np.abs(yg[:, 0] - ref)))
    return TrackingResult(err, traj, tg, yg, ref)


def verify_tracking(field_: FieldSpec, n: int = 0, rel_tol: float = 1e-9, **kw) -> float:
    """Sup over the report grid of ``|y(t) - g_n(t)|``."""
    return track(field_, n, rel_tol, **kw).error


def trajectory_csv(result: TrackingResult, field_: FieldSpec) -> str:
    """CSV with columns ``t,y,y1,y2,F`` on the report grid."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "y", "y1", "y2", "F"])
    F = field_.eval_many(result.values, debug=False)
    for t, row, fv in zip(result.grid, result.values, F):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [repr(float(fv))])
    return buf.getvalue()


@dataclass(frozen=True)
class ApproximationConfig:
    seed: int = 0
    rel_tol: float = 1e-9
    abs_tol: float | None = None
    smooth_fit: bool = True


@dataclass
class UniversalityReport:
    """Error accounting of one approximation run.

    ``total_err`` is measured directly; the four other terms bound it by the
    triangle inequality ``|y - h| <= |y - g| + |delta| + |c_eps| + |P - h|``.
    """

    target: str
    n: int
    poly_err: float
    osc_amp: float
    delta_norm: float
    tracking_err: float
    total_err: float
    tol: float
    passed: bool
    epsilon: float = 0.0
    tube_radius: float = 0.0
    degree: int = 0
    steps: int = 0

    @property
    def bound(self) -> float:
        return self.poly_err + self.osc_amp + self.delta_norm + self.tracking_err

    def to_json(self) -> dict:
        out = asdict(self)
        out["bound"] = self.bound
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


@dataclass
class ApproximationRun:
    report: UniversalityReport
    field: FieldSpec
    plan: PerturbationPlan
    tracking: TrackingResult


def account(h, target: str, tol: float, poly_err: float, osc_amp: float, delta_norm: float,
            tracking: TrackingResult, n: int = 0, **extra) -> UniversalityReport:
    """Build the report from a tracking run and assert the triangle-inequality chain."""
    total = float(np.max(np.abs(tracking.values[:, 0] - h(tracking.grid))))
    rep = UniversalityReport(target, n, float(poly_err), float(osc_amp), float(delta_norm),
                             tracking.error, total, float(tol), total <= tol, **extra)
    # pointwise |y-h| <= |y-g| + |delta| + |c| + |P-h| on the shared grid; slack covers rounding
    assert rep.total_err <= rep.bound * (1 + 1e-12) + 1e-15, (rep.total_err, rep.bound)
    return rep


def approximate_target(h: TargetFunction, tol: float, config: ApproximationConfig | None = None,
                       ) -> ApproximationRun:
    """Fit, oscillate, disentangle, build the tube and track: each stage gets ``tol / 4``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    config = config or ApproximationConfig()
    interval = h.interval
    quarter = tol / 4
    P = fit_polynomial(h, quarter, smooth=config.smooth_fit)
    eps = feasible_epsilon(P, interval, quarter)
    f = approximant(P, eps, interval)
    g, plan = disentangle(f, quarter, seed=config.seed)
    field_ = build_field([g], interval, metadata={"target": h.name, "tol": tol, "seed": config.seed})
    res = track(field_, 0, config.rel_tol, config.abs_tol)
    # |P - h| on the report grid as well as the fit's own check grid
    p_err = max(max_error(np.asarray(P.coefficients), h),
                float(np.max(np.abs(np.polynomial.polynomial.polyval(res.grid, P.coefficients) - h(res.grid)))))
    rep = account(h, h.name, tol, p_err, eps, plan.delta_norm, res,
                  epsilon=eps, tube_radius=field_.tubes[0].epsilon_tube, degree=P.degree,
                  steps=res.trajectory.stats.steps)
    return ApproximationRun(rep, field_, plan, res)


def boshernitzan_rhs(state) -> np.ndarray:
    """``(b, d, s, y)' = (0, 0, 1, b d cos(exp(s)) / (1 + d**2 - cos(b s)))``."""
    b, d, s, _ = (float(v) for v in state)
    den = 1.0 + d * d - math.cos(b * s)
    if d == 0.0 or not den > 0:
        raise SingularDenominatorError(f"denominator 1 + d^2 - cos(bs) = {den:.3g} at d = {d}")
    return np.array([0.0, 0.0, 1.0, b * d / den * math.cos(math.exp(s))])


def integrate_boshernitzan(b: float, d: float, y0: float, s1: float, rel_tol: float = 1e-10,
                           abs_tol: float = 1e-12, s0: float = 0.0) -> Trajectory:
    return solve(lambda t, st: boshernitzan_rhs(st), s0, s1, [b, d, s0, y0], rel_tol, abs_tol)
