"""Optimization problem surface: allocations, objective, constraints, schemes.

The decision variables follow the convexified formulation: per EU a
backscatter slot length t_b, reflected mass x = alpha * t_b, active
transmission time t_a, transmit energy mass P = p * t_a, CPU frequency f, and
execution time tau. The solvers fix tau to the block length (doing so never
loses optimality: local bits grow in tau while CPU energy for a fixed bit
count shrinks); `objective` still honours tau so unreduced allocations can be
scored too.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import phys_models as phys
from .scenario import Scenario

__all__ = [
    "Allocation",
    "ConstraintResiduals",
    "FeasTolerances",
    "Scheme",
    "Problem",
    "objective",
    "per_eu_bits",
    "residuals",
    "is_feasible",
    "restrict",
    "fix_execution_time",
]


@dataclass(frozen=True)
class Allocation:
    """One candidate solution. Arrays are per-EU, shape (K,). Do not mutate."""

    t_b: np.ndarray  # backscatter slot lengths, s
    x: np.ndarray  # reflected mass alpha * t_b, s
    t_a: np.ndarray  # active-transmission times, s
    P: np.ndarray  # transmit energy mass p * t_a, J
    f: np.ndarray  # CPU frequencies, Hz
    tau: np.ndarray  # execution times, s

    @staticmethod
    def zeros(n_eus: int, tau: float = 0.0) -> "Allocation":
        z = lambda: np.zeros(n_eus)
        return Allocation(t_b=z(), x=z(), t_a=z(), P=z(), f=z(), tau=np.full(n_eus, tau))

    def alpha(self) -> np.ndarray:
        """Reflection coefficients x / t_b (0 where t_b = 0)."""
        return np.divide(self.x, self.t_b, out=np.zeros_like(self.x), where=self.t_b > 0)

    def p(self) -> np.ndarray:
        """Transmit powers P / t_a (0 where t_a = 0)."""
        return np.divide(self.P, self.t_a, out=np.zeros_like(self.P), where=self.t_a > 0)


@dataclass(frozen=True)
class FeasTolerances:
    """Constraint slack treated as satisfied (see `residuals` for units)."""

    bits_rel: float = 1e-6  # x max(l_min, 1) bits
    energy: float = 1e-12  # J
    time: float = 1e-12  # s


@dataclass(frozen=True)
class ConstraintResiduals:
    """Positive entries are violations; feasible allocations are <= 0."""

    bits_shortfall: np.ndarray  # l_min - delivered bits, per EU
    energy_deficit: np.ndarray  # consumption - harvest, per EU, J
    time_excess: float  # sum of phase times - block length, s


class Scheme(enum.Enum):
    """Allocation policies: the joint design plus the four pinned baselines."""

    PROPOSED = "Proposed"
    COMPLETE_OFFLOADING = "CompleteOffloading"
    FULLY_LOCAL = "FullyLocal"
    PURE_BACKSCATTER = "PureBackscatter"
    PURE_HTT = "PureHTT"


# Variable pinnings per scheme: each restriction is the same feasible set with
# the named variables fixed to zero, nothing else changes.
_PINS = {
    Scheme.PROPOSED: frozenset(),
    Scheme.COMPLETE_OFFLOADING: frozenset({"f"}),
    Scheme.FULLY_LOCAL: frozenset({"x", "at"}),  # t_b stays free: pure EH time
    Scheme.PURE_BACKSCATTER: frozenset({"at"}),
    Scheme.PURE_HTT: frozenset({"x"}),
}


@dataclass(frozen=True)
class Problem:
    """A scenario plus scheme pinning and the tau-handling mode."""

    scenario: Scenario
    scheme: Scheme = Scheme.PROPOSED
    tau_fixed: bool = False  # True once execution times are pinned to the block

    @property
    def pin_x(self) -> bool:
        return "x" in _PINS[self.scheme]

    @property
    def pin_at(self) -> bool:
        return "at" in _PINS[self.scheme]

    @property
    def pin_f(self) -> bool:
        return "f" in _PINS[self.scheme]


def restrict(scenario: Scenario, scheme: Scheme) -> Problem:
    """Problem for `scenario` under the given scheme's variable pinning."""
    return Problem(scenario=scenario, scheme=scheme)


def fix_execution_time(problem: Problem) -> Problem:
    """Pin every tau to the block length (optimal, see module docstring)."""
    return replace(problem, tau_fixed=True)


def per_eu_bits(alloc: Allocation, scenario: Scenario) -> np.ndarray:
    """Per-EU (backscatter, active, local) bit counts, shape (K, 3).

    Local bits use the allocation's own tau.
    """
    rows = []
    for k in range(scenario.n_eus):
        rows.append(
            (
                phys.backcom_bits(float(alloc.x[k]), float(alloc.t_b[k]), scenario, k),
                phys.at_bits(float(alloc.P[k]), float(alloc.t_a[k]), scenario, k),
                phys.local_bits(
                    float(alloc.f[k]), float(alloc.tau[k]), scenario.cycles_per_bit
                ),
            )
        )
    return np.asarray(rows)


def objective(alloc: Allocation, scenario: Scenario) -> float:
    """Weighted sum of computed-plus-offloaded bits across EUs."""
    weights = np.array([eu.weight for eu in scenario.eus])
    return float(weights @ per_eu_bits(alloc, scenario).sum(axis=1))


def residuals(alloc: Allocation, scenario: Scenario) -> ConstraintResiduals:
    """Constraint residuals of the full-block formulation.

    The bit and energy constraints charge local compute over the whole block
    (tau = T), matching the formulation the solvers work on.
    """
    T = scenario.block_length
    shortfall = np.zeros(scenario.n_eus)
    deficit = np.zeros(scenario.n_eus)
    for k, eu in enumerate(scenario.eus):
        bits = (
            phys.backcom_bits(float(alloc.x[k]), float(alloc.t_b[k]), scenario, k)
            + phys.at_bits(float(alloc.P[k]), float(alloc.t_a[k]), scenario, k)
            + phys.local_bits(float(alloc.f[k]), T, scenario.cycles_per_bit)
        )
        shortfall[k] = eu.l_min - bits
        harvest = phys.total_harvest(float(alloc.x[k]), alloc.t_b, k, scenario).total
        consumption = (
            eu.backcom_circuit_power * float(alloc.t_b[k])
            + float(alloc.P[k])
            + eu.at_circuit_power * float(alloc.t_a[k])
            + phys.local_energy(float(alloc.f[k]), T, eu.capacitance)
        )
        deficit[k] = consumption - harvest
    time_excess = float(alloc.t_b.sum() + alloc.t_a.sum() - T)
    return ConstraintResiduals(
        bits_shortfall=shortfall, energy_deficit=deficit, time_excess=time_excess
    )


def is_feasible(
    alloc: Allocation, scenario: Scenario, tol: FeasTolerances | None = None
) -> bool:
    """Constraint residuals plus domain bounds, within `tol`."""
    tol = tol or FeasTolerances()
    T = scenario.block_length
    l_min = np.array([eu.l_min for eu in scenario.eus])
    f_max = np.array([eu.f_max for eu in scenario.eus])
    res = residuals(alloc, scenario)
    if np.any(res.bits_shortfall > tol.bits_rel * np.maximum(l_min, 1.0)):
        return False
    if np.any(res.energy_deficit > tol.energy):
        return False
    if res.time_excess > tol.time:
        return False
    arrays = (alloc.t_b, alloc.x, alloc.t_a, alloc.P, alloc.f, alloc.tau)
    if any(np.any(a < -tol.time) for a in arrays):
        return False
    if np.any(alloc.x - alloc.t_b > tol.time):
        return False
    if np.any(alloc.f - f_max > tol.time * f_max):
        return False
    if np.any(alloc.tau - T > tol.time):
        return False
    return True
