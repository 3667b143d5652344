"""Solve results and options shared by both solvers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..problem import Allocation
from .closed_forms import DualState

__all__ = ["SolveStatus", "SolveOptions", "SolveReport"]


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-6  # scaled KKT residual required for Optimal
    max_iters: int = 100_000  # dual ascent step cap


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solve. Optimal implies a certified, feasible point."""

    status: SolveStatus
    objective: float  # weighted bits; 0.0 when infeasible
    allocation: Allocation | None
    duals: DualState | None
    kkt_residual: float  # scaled; inf when no certificate exists
    per_eu_bits: np.ndarray | None  # (K, 3): backcom, at, local
    energy_slack: np.ndarray | None  # harvest - consumption per EU, J
    iterations: int
    solver: str = ""
    solve_ms: float = 0.0  # wall-clock, informational only
