"""Numerical construction of a third-order universal ODE ``y''' = F(y, y', y'')``."""

from .jets import (
    ClosedFormFunction,
    Interval,
    OscillationTerm,
    PlateauTerm,
    PolynomialTerm,
    jet3,
    jet_norm,
    inf_norm,
    sup_norm,
)

__all__ = [
    "ClosedFormFunction",
    "Interval",
    "OscillationTerm",
    "PlateauTerm",
    "PolynomialTerm",
    "jet3",
    "jet_norm",
    "inf_norm",
    "sup_norm",
]

__version__ = "0.1.0"
