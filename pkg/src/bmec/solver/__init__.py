"""Solvers for the block resource allocation problem.

`solve_dual` is the production path (closed forms inside a projected
subgradient ascent, polished to a KKT point). `solve_reference` is an
independent convex-programming cross-check. Both return a `SolveReport`
whose `kkt_residual` certifies the answer against the same stationarity
and complementarity conditions.
"""

from .certificates import kkt_residual, remark1_checks, verify_lemma1
from .closed_forms import (
    DualState,
    NumericalDegeneracy,
    lagrangian,
    optimal_frequency,
    optimal_power,
    optimal_reflection,
    time_allocation_lp,
    time_prices,
    zero_duals,
)
from .dual import solve_dual
from .polish import PolishResult, polish, snap_to_boundary
from .reference import solve_reference
from .report import SolveOptions, SolveReport, SolveStatus

__all__ = [
    "DualState",
    "NumericalDegeneracy",
    "PolishResult",
    "SolveOptions",
    "SolveReport",
    "SolveStatus",
    "kkt_residual",
    "lagrangian",
    "optimal_frequency",
    "optimal_power",
    "optimal_reflection",
    "polish",
    "remark1_checks",
    "snap_to_boundary",
    "solve_dual",
    "solve_reference",
    "time_allocation_lp",
    "time_prices",
    "verify_lemma1",
    "zero_duals",
]
