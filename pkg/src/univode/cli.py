"""Command-line front end: ``univode build|eval|demo|scan|diag``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximants import TargetFunction, fit_polynomial, select_epsilon_chain
from .embedding import (
    default_eta,
    default_separation,
    disentangle,
    faa_di_bruno_diagnostic,
    records_to_jsonl,
    scan_self_intersections,
)
from .errors import EscapeError, StiffnessError, UnivodeError
from .integrate import account, track, trajectory_csv
from .jets import Interval, PolynomialTerm
from .targets import BUILTIN, load_target
from .tube import FieldSpec, TubeSpec, estimate_tube_radius_details, verify_disjointness

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_TOL = 1.5


class InputError(Exception):
    """Unreadable or malformed user input (exit code 2)."""


@dataclass
class RunConfig:
    interval: Interval = Interval(0.0, 1.0)
    targets: list[str] = field(default_factory=lambda: ["linear"])
    tol: float = DEFAULT_TOL
    seed: int = 0
    chain_depth: int = 3
    per_period: int = 16
    rel_tol: float = 1e-9
    abs_tol: float | None = None
    out: Path = Path("field.json")
    report: Path | None = None

    def validate(self):
        if not self.tol > 0:
            raise InputError("--tol must be positive")
        if not self.rel_tol > 0 or (self.abs_tol is not None and not self.abs_tol > 0):
            raise InputError("tolerances must be positive")
        if self.chain_depth < 1:
            raise InputError("--chain-depth must be at least 1")
        if len(self.targets) > self.chain_depth:
            raise InputError(f"{len(self.targets)} targets exceed --chain-depth {self.chain_depth}")
        if self.per_period < 4:
            raise InputError("--per-period must be at least 4")


def _load_targets(specs, interval) -> list[TargetFunction]:
    out = []
    for spec in specs:
        try:
            out.append(load_target(spec, interval))
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read target {spec!r}: {exc}") from exc
    return out


def _read_field(path) -> FieldSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read field file {path}: {exc}") from exc
    try:
        return FieldSpec.loads(text)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write_atomic(path: Path, text: str):
    """Write through a temporary file so a failure never leaves a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- pipeline ----------------------------------------------------------------


def build_pipeline(config: RunConfig, targets: list[TargetFunction] | None = None):
    """Fit, chain, disentangle and wrap every target in a tube.

    Every entry uses the budget ``tol / 4`` for the fit, the oscillation
    amplitude and the perturbation. Returns ``(field, report)``.
    """
    config.validate()
    targets = _load_targets(config.targets, config.interval) if targets is None else targets
    interval = config.interval
    quarter = config.tol / 4
    polys = [fit_polynomial(h, quarter, smooth=True) for h in targets]
    chain = select_epsilon_chain(polys, interval, max_depth=config.chain_depth, cap=quarter)
    functions, entries = [], []
    for k, (h, entry) in enumerate(zip(targets, chain.entries)):
        raw_scan = scan_self_intersections(entry.f, per_period=config.per_period)
        g, plan = disentangle(entry.f, quarter, seed=config.seed + k, per_period=config.per_period)
        functions.append(g)
        grid = h.check_grid()
        poly_err = float(np.max(np.abs(entry.poly.derivative(grid, 0) - h(grid))))
        entries.append({
            "target": config.targets[k] if k < len(config.targets) else h.name,
            "degree": entry.poly.degree,
            "poly": list(entry.poly.coefficients),
            "poly_err": poly_err,
            "epsilon": entry.epsilon,
            "delta_norm": plan.delta_norm,
            "immersion_margin": chain.immersion[k],
            "scan": [r.to_json() for r in raw_scan],
            "perturbation": plan.to_json(),
        })
    tubes = []
    for g, e in zip(functions, entries):
        est = estimate_tube_radius_details(g)
        tubes.append(TubeSpec.build(g, est.radius))
        e["tube"] = {"radius": est.radius, "kappa_max": est.kappa_max, "d_min": est.d_min,
                     "grid_n": tubes[-1].grid_n}
    meta = {
        "tol": config.tol,
        "seed": config.seed,
        "entries": [{k: e[k] for k in ("target", "poly", "poly_err", "epsilon", "delta_norm")} for e in entries],
    }
    field_ = FieldSpec(interval, tubes, meta)
    disjoint = verify_disjointness(field_)
    report = {
        "interval": interval.to_list(),
        "tol": config.tol,
        "seed": config.seed,
        "chain_depth": config.chain_depth,
        "epsilons": [e["epsilon"] for e in entries],
        "chain_margins": chain.margins,
        "entries": entries,
        "disjointness": disjoint.to_json(),
    }
    return field_, report


def demo_run(field_: FieldSpec, n: int = 0, rel_tol: float = 1e-9, abs_tol: float | None = None,
             tol: float | None = None, stabilize: bool = False):
    """Track tube ``n`` and account the error against its recorded target."""
    meta = field_.metadata.get("entries", [])
    if not 0 <= n < len(field_.tubes):
        raise InputError(f"field has no tube {n}")
    res = track(field_, n, rel_tol, abs_tol, stabilize=stabilize)
    if n < len(meta):
        e = meta[n]
        h = load_target(e["target"], field_.interval)
        grid = np.union1d(h.check_grid(), res.grid)
        p_err = float(np.max(np.abs(np.polynomial.polynomial.polyval(grid, e["poly"]) - h(grid))))
        budget = field_.metadata.get("tol", DEFAULT_TOL) if tol is None else tol
        rep = account(h, e["target"], budget, p_err, e["epsilon"], e["delta_norm"], res, n=n,
                      epsilon=e["epsilon"], tube_radius=field_.tubes[n].epsilon_tube,
                      degree=PolynomialTerm(e["poly"]).degree, steps=res.trajectory.stats.steps)
        report = rep.to_json()
        passed = rep.passed
    else:
        # no target recorded: only the tracking error can be judged
        budget = rel_tol if tol is None else tol
        passed = res.error <= budget
        report = {"n": n, "tracking_err": res.error, "tol": budget, "passed": passed,
                  "steps": res.trajectory.stats.steps}
    report["stabilized"] = stabilize
    return res, report, passed


def samples_csv(t, Y, field_: FieldSpec) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "y", "y1", "y2", "F"])
    F = field_.eval_many(Y, debug=False) if len(Y) else []
    for tt, row, fv in zip(t, Y, F):
        w.writerow([repr(float(tt))] + [repr(float(v)) for v in row] + [repr(float(fv))])
    return buf.getvalue()


def _scan_function(args):
    if args.field:
        field_ = _read_field(args.field)
        if not 0 <= args.n < len(field_.tubes):
            raise InputError(f"field has no tube {args.n}")
        return field_.tubes[args.n].g
    interval = Interval(*args.interval)
    (h,) = _load_targets([args.target], interval)
    quarter = args.tol / 4
    p = fit_polynomial(h, quarter, smooth=True)
    return select_epsilon_chain([p], interval, cap=quarter).entries[0].f


# --- commands ----------------------------------------------------------------


def cmd_build(args) -> int:
    config = RunConfig(Interval(*args.interval), args.target or ["linear"], args.tol, args.seed,
                       args.chain_depth, args.per_period, out=Path(args.out),
                       report=Path(args.report) if args.report else None)
    config.validate()
    targets = _load_targets(config.targets, config.interval)
    field_, report = build_pipeline(config, targets)
    _write_atomic(config.out, field_.dumps())
    if config.report:
        _write_atomic(config.report, _dumps(report))
    print(f"wrote {config.out} with {len(field_.tubes)} tube(s); "
          f"epsilons {', '.join(f'{e:.6g}' for e in report['epsilons'])}")
    return EXIT_OK


def cmd_eval(args) -> int:
    field_ = _read_field(args.field)
    x = np.array(args.x, dtype=float)
    value = field_(x)
    if args.verbose:
        k, pr = field_.locate(x)
        out = {"F": value, "tube": k,
               "t_star": None if pr is None else float(pr.t_star),
               "v_norm": None if pr is None else float(pr.v_norm)}
        print(json.dumps(out, sort_keys=True))
    else:
        print(repr(value))
    return EXIT_OK


def cmd_demo(args) -> int:
    field_ = _read_field(args.field)
    try:
        res, report, passed = demo_run(field_, args.n, args.rtol, args.atol, args.tol, args.stabilize)
    except (EscapeError, StiffnessError) as exc:
        if args.csv and exc.trajectory is not None:
            tr = exc.trajectory
            _write_atomic(Path(args.csv), samples_csv(tr.t, tr.y, field_))
        raise
    if args.csv:
        _write_atomic(Path(args.csv), trajectory_csv(res, field_))
    if args.report:
        _write_atomic(Path(args.report), _dumps(report))
    print(_dumps(report), end="")
    # a run that misses its tolerance is a numerical failure
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_scan(args) -> int:
    f = _scan_function(args)
    eta = default_eta(f) if args.eta is None else args.eta
    sep = default_separation(f) if args.sep is None else args.sep
    records = scan_self_intersections(f, eta, sep, per_period=args.per_period)
    text = records_to_jsonl(records)
    if args.out:
        _write_atomic(Path(args.out), text)
        print(f"{len(records)} record(s) written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_diag(args) -> int:
    f = _scan_function(args)
    if args.t1 is not None and args.tj is not None:
        pairs = [(args.t1, args.tj)]
    elif args.t1 is None and args.tj is None:
        pairs = [(r.t1, r.t2) for r in scan_self_intersections(f, per_period=args.per_period)]
    else:
        raise InputError("give both --t1 and --tj, or neither")
    out = []
    for t1, tj in pairs:
        d = faa_di_bruno_diagnostic(f, t1, tj, args.nmax)
        out.append({"t1": t1, "tj": tj, "alpha": d.alpha, "line_dimensions": d.line_dimensions})
    print(_dumps({"pairs": out}), end="")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _add_source(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--target", default="linear", help="builtin name or CSV path (default: linear)")
    src.add_argument("--field", help="field JSON; scans the curve of tube --n")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--tol", type=_positive, default=DEFAULT_TOL)
    p.add_argument("--interval", type=float, nargs=2, default=[0.0, 1.0], metavar=("A", "B"))
    p.add_argument("--per-period", type=int, default=16)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="univode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a field file from targets")
    p.add_argument("--target", action="append",
                   help=f"builtin ({', '.join(sorted(BUILTIN))}) or CSV path; repeat for a chain")
    p.add_argument("--tol", type=_positive, default=DEFAULT_TOL,
                   help="error budget; fit, oscillation and perturbation get a quarter each")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chain-depth", type=int, default=3)
    p.add_argument("--interval", type=float, nargs=2, default=[0.0, 1.0], metavar=("A", "B"))
    p.add_argument("--per-period", type=int, default=16)
    p.add_argument("--out", default="field.json")
    p.add_argument("--report", help="build report JSON")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="evaluate F at a point")
    p.add_argument("field")
    p.add_argument("x", type=float, nargs=3)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="integrate along a tube and account the error")
    p.add_argument("field")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--rtol", type=_positive, default=1e-9)
    p.add_argument("--atol", type=_positive, default=None)
    p.add_argument("--tol", type=_positive, default=None, help="pass threshold (default: the build tol)")
    p.add_argument("--stabilize", action="store_true", help="project accepted steps onto the curve")
    p.add_argument("--csv")
    p.add_argument("--report")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("scan", help="near self-intersections of a jet curve (JSONL)")
    _add_source(p)
    p.add_argument("--eta", type=_positive)
    p.add_argument("--sep", type=_positive)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("diag", help="Faa di Bruno coefficients at a pair of sites")
    _add_source(p)
    p.add_argument("--t1", type=float)
    p.add_argument("--tj", type=float)
    p.add_argument("--nmax", type=int, default=4)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except UnivodeError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ArithmeticError) as exc:
        print(f"error [numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
