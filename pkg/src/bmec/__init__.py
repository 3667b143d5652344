"""Weighted sum computation bits maximization for backscatter-assisted
wirelessly powered mobile edge computing.

The package models one transmission block in which energy-constrained user
equipments split their time between backscattering (passive offloading,
harvesting the unreflected remainder), active offloading powered by earlier
harvests, and local computing. `solve_dual` finds the allocation maximizing
the weighted sum of computed bits; `restrict` builds the benchmark variants.
"""

from .problem import (
    Allocation,
    ConstraintResiduals,
    Problem,
    Scheme,
    is_feasible,
    objective,
    per_eu_bits,
    residuals,
    restrict,
)
from .scenario import (
    ChannelGeometry,
    ConfigError,
    EhParams,
    EuProfile,
    Scenario,
    default_scenario,
    realize_channels,
    scenario_from_mapping,
    validate,
    with_channels,
)
from .solver import (
    SolveOptions,
    SolveReport,
    SolveStatus,
    solve_dual,
    solve_reference,
    verify_lemma1,
)

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "ChannelGeometry",
    "ConfigError",
    "ConstraintResiduals",
    "EhParams",
    "EuProfile",
    "Problem",
    "Scenario",
    "Scheme",
    "SolveOptions",
    "SolveReport",
    "SolveStatus",
    "default_scenario",
    "is_feasible",
    "objective",
    "per_eu_bits",
    "realize_channels",
    "residuals",
    "restrict",
    "scenario_from_mapping",
    "solve_dual",
    "solve_reference",
    "validate",
    "verify_lemma1",
    "with_channels",
    "__version__",
]
