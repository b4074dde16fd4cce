"""Builtin demo targets and loading of sampled targets from CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .approximants import TargetFunction
from .jets import Interval

BUILTIN = {
    "linear": lambda t: t,
    "abs": lambda t: np.abs(t - 0.5),
    "step": lambda t: 0.5 * (1.0 + np.tanh(5.0 * (t - 0.5))),
    "sine": lambda t: np.sin(np.pi * t),
}


def builtin_target(name: str, interval: Interval = Interval(0.0, 1.0)) -> TargetFunction:
    if name not in BUILTIN:
        raise KeyError(f"unknown builtin target {name!r}; choose from {sorted(BUILTIN)}")
    return TargetFunction.from_callable(BUILTIN[name], interval, name=name)


def read_csv_target(path: str | Path) -> TargetFunction:
    """Samples from a two-column CSV ``t,value``; a non-numeric first row is a header."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if k == 0:
                    continue
                raise ValueError(f"{path}: bad row {k + 1}: {row}")
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least 2 samples")
    t, v = np.array(rows).T
    return TargetFunction.from_samples(t, v, name=path.name)


def load_target(spec: str, interval: Interval = Interval(0.0, 1.0)) -> TargetFunction:
    """A builtin name or a CSV path."""
    if spec in BUILTIN:
        return builtin_target(spec, interval)
    return read_csv_target(spec)
