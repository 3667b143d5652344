"""Per-variable optimizers of the Lagrangian, and the Lagrangian itself.

For fixed multipliers the Lagrangian separates: the CPU frequency, the
per-second transmit power p = P/t_a and the reflection coefficient
alpha = x/t_b each maximize a one-dimensional concave term with a closed-form
root, after which the Lagrangian is linear in the phase times and the time
split is a one-constraint LP. These pieces are the inner loop of the dual
solver and are validated against grid argmaxima and finite differences of
`lagrangian` in the tests.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .. import phys_models as phys
from ..problem import Allocation, Problem
from ..scenario import Scenario

__all__ = [
    "DualState",
    "zero_duals",
    "lagrangian",
    "dL_df",
    "dL_dP",
    "dL_dx",
    "dL_dtb",
    "dL_dta",
    "optimal_frequency",
    "optimal_power",
    "optimal_reflection",
    "reflection_quadratic",
    "time_prices",
    "time_allocation_lp",
    "NumericalDegeneracy",
]

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class NumericalDegeneracy(RuntimeWarning):
    """Closed form hit a numerically degenerate case; a fallback was used."""


@dataclass(frozen=True)
class DualState:
    """Multipliers of the full-block problem, all >= 0.

    bits        per-EU, minimum-bits constraint (dimensionless weight)
    energy      per-EU, energy-causality constraint (bits per joule)
    freq_cap    per-EU, f <= f_max (bits per hertz)
    time        scalar, shared block-time budget (bits per second)
    reflect_cap per-EU, x <= t_b (bits per second)
    """

    bits: np.ndarray
    energy: np.ndarray
    freq_cap: np.ndarray
    time: float
    reflect_cap: np.ndarray


def zero_duals(n_eus: int) -> DualState:
    z = lambda: np.zeros(n_eus)
    return DualState(bits=z(), energy=z(), freq_cap=z(), time=0.0, reflect_cap=z())


def lagrangian(alloc: Allocation, duals: DualState, scenario: Scenario) -> float:
    """Objective plus multiplier-weighted constraint slacks (bits).

    Local compute is charged over the whole block on both sides (bits and
    energy), matching the formulation the dual method works on.
    """
    T = scenario.block_length
    value = duals.time * (T - float(alloc.t_b.sum() + alloc.t_a.sum()))
    for k, eu in enumerate(scenario.eus):
        t_b, x = float(alloc.t_b[k]), float(alloc.x[k])
        t_a, P, f = float(alloc.t_a[k]), float(alloc.P[k]), float(alloc.f[k])
        bits = (
            phys.backcom_bits(x, t_b, scenario, k)
            + phys.at_bits(P, t_a, scenario, k)
            + phys.local_bits(f, T, scenario.cycles_per_bit)
        )
        harvest = phys.total_harvest(x, alloc.t_b, k, scenario).total
        consumption = (
            eu.backcom_circuit_power * t_b
            + P
            + eu.at_circuit_power * t_a
            + phys.local_energy(f, T, eu.capacitance)
        )
        value += (eu.weight + duals.bits[k]) * bits - duals.bits[k] * eu.l_min
        value += duals.freq_cap[k] * (eu.f_max - f)
        value += duals.energy[k] * (harvest - consumption)
        value += duals.reflect_cap[k] * (t_b - x)
    return float(value)


def dL_df(duals: DualState, f: float, k: int, scenario: Scenario) -> float:
    """Partial derivative of `lagrangian` in the CPU frequency of EU k."""
    eu = scenario.eus[k]
    T = scenario.block_length
    w = eu.weight + duals.bits[k]
    return (
        w * T / scenario.cycles_per_bit
        - 3.0 * duals.energy[k] * eu.capacitance * T * f**2
        - duals.freq_cap[k]
    )


def dL_dP(duals: DualState, P: float, t_a: float, k: int, scenario: Scenario) -> float:
    """Partial derivative of `lagrangian` in the transmit energy mass of EU k."""
    eu = scenario.eus[k]
    w = eu.weight + duals.bits[k]
    mu = duals.energy[k]
    if t_a == 0.0:
        # limit of the perspective term: h/(sigma2 ln2) along P = 0, else 0
        gain = eu.h / (scenario.noise_density * LN2) if P == 0.0 else 0.0
        return w * gain - mu
    B = scenario.bandwidth
    noise = B * scenario.noise_density
    return w * t_a * B * eu.h / ((t_a * noise + P * eu.h) * LN2) - mu


def dL_dx(duals: DualState, x: float, t_b: float, k: int, scenario: Scenario) -> float:
    """Partial derivative of `lagrangian` in the reflected mass of EU k.

    Rate gain minus harvest loss minus the reflection-cap multiplier. The
    harvest term carries the chain-rule factor P_t*g from differentiating
    t_b * F((1 - x/t_b) P_t g) in x.
    """
    if t_b == 0.0:
        return 0.0
    eu = scenario.eus[k]
    w = eu.weight + duals.bits[k]
    B = scenario.bandwidth
    noise = B * scenario.noise_density
    S = scenario.pb_power * eu.g  # incident PB power at the EU
    coupled = scenario.backcom_gap * S * eu.h
    rate = w * t_b * B * coupled / ((t_b * noise + coupled * x) * LN2)
    cvd = eu.eh.c * eu.eh.v - eu.eh.d
    den = (t_b - x) * S + eu.eh.v * t_b
    harvest = duals.energy[k] * cvd * S * t_b**2 / den**2
    return rate - harvest - duals.reflect_cap[k]


def dL_dtb(
    duals: DualState, x: float, t_b: float, k: int, scenario: Scenario
) -> float:
    """Partial derivative of `lagrangian` in EU k's BackCom slot length,
    holding the reflected mass x fixed (not the ratio x/t_b)."""
    eu = scenario.eus[k]
    w = eu.weight + duals.bits[k]
    B = scenario.bandwidth
    noise = B * scenario.noise_density
    S = scenario.pb_power * eu.g
    mu = duals.energy
    q = scenario.backcom_gap * S * eu.h * x / (t_b * noise)
    rate = w * B * (math.log2(1.0 + q) - q / ((1.0 + q) * LN2))
    cvd = eu.eh.c * eu.eh.v - eu.eh.d
    v = eu.eh.v
    den = (t_b - x) * S + v * t_b
    own = mu[k] * cvd * (1.0 / v - (2.0 * t_b * den - t_b**2 * (S + v)) / den**2)
    cross = sum(
        mu[j] * phys.idle_harvest_power(scenario, j)
        for j in range(scenario.n_eus)
        if j != k
    )
    return (
        rate
        + own
        + cross
        - mu[k] * eu.backcom_circuit_power
        - duals.time
        + duals.reflect_cap[k]
    )


def dL_dta(
    duals: DualState, P: float, t_a: float, k: int, scenario: Scenario
) -> float:
    """Partial derivative of `lagrangian` in EU k's AT slot length, holding
    the transmit energy mass P fixed."""
    eu = scenario.eus[k]
    w = eu.weight + duals.bits[k]
    B = scenario.bandwidth
    noise = B * scenario.noise_density
    u = P * eu.h / (t_a * noise)
    rate = w * B * (math.log2(1.0 + u) - u / ((1.0 + u) * LN2))
    return rate - duals.energy[k] * eu.at_circuit_power - duals.time


def optimal_frequency(duals: DualState, k: int, scenario: Scenario) -> float:
    """Frequency maximizing the Lagrangian's per-EU compute term.

    [sqrt(((w+theta)T - phi*C) / (3 mu eps T C))]^+. A zero energy multiplier
    makes the inner problem push f to the cap; f_max is returned as that
    candidate and the cap multiplier is left to enforce the limit.
    """
    eu = scenario.eus[k]
    mu = duals.energy[k]
    if mu < 0:
        raise ValueError("energy multiplier must be >= 0")
    if mu == 0.0:
        return eu.f_max
    T, C = scenario.block_length, scenario.cycles_per_bit
    num = (eu.weight + duals.bits[k]) * T - duals.freq_cap[k] * C
    if num <= 0.0:
        return 0.0
    return math.sqrt(num / (3.0 * mu * eu.capacitance * T * C))


def optimal_power(duals: DualState, k: int, scenario: Scenario) -> float:
    """Per-second transmit power maximizing the Lagrangian's AT term.

    [(w+theta)B/(mu ln2) - B sigma2/h]^+ : water-filling against the energy
    price; zero whenever h is at or below sigma2*mu*ln2/(w+theta).
    """
    eu = scenario.eus[k]
    mu = duals.energy[k]
    if mu <= 0:
        raise ValueError("energy multiplier must be > 0 (AT term unbounded)")
    if eu.h == 0.0:
        return 0.0
    B = scenario.bandwidth
    w = eu.weight + duals.bits[k]
    return max(0.0, w * B / (mu * LN2) - B * scenario.noise_density / eu.h)


def reflection_quadratic(duals: DualState, k: int, scenario: Scenario):
    """Coefficients (A, B, D) of A a^2 - B a + D = 0, the stationarity
    condition of the per-EU Lagrangian in the reflection coefficient."""
    eu = scenario.eus[k]
    w = eu.weight + duals.bits[k]
    mu = duals.energy[k]
    S = scenario.pb_power * eu.g
    noise_pw = scenario.bandwidth * scenario.noise_density
    Q = w * scenario.bandwidth * scenario.backcom_gap * S * eu.h / LN2
    cvd = eu.eh.c * eu.eh.v - eu.eh.d
    v = eu.eh.v
    A = Q * S * S
    Bq = 2.0 * A + 2.0 * Q * S * v + scenario.backcom_gap * mu * cvd * S * S * eu.h
    D = Q * (S + v) ** 2 - mu * cvd * S * noise_pw
    return A, Bq, D


def _reflection_grid(duals: DualState, k: int, scenario: Scenario) -> float:
    """Fallback: numerically maximize the per-EU Lagrangian density in alpha."""
    eu = scenario.eus[k]
    w = eu.weight + duals.bits[k]
    S = scenario.pb_power * eu.g
    noise = scenario.bandwidth * scenario.noise_density
    coupled = scenario.backcom_gap * S * eu.h / noise

    def density(a: np.ndarray) -> np.ndarray:
        rate = w * scenario.bandwidth * np.log2(1.0 + coupled * a)
        harv = duals.energy[k] * np.array(
            [phys.harvested_power((1.0 - ai) * S, eu.eh) for ai in np.atleast_1d(a)]
        )
        return rate + harv + duals.reflect_cap[k] * (1.0 - a)

    grid = np.linspace(0.0, 1.0, 100_001)
    return float(grid[int(np.argmax(density(grid)))])


def optimal_reflection(duals: DualState, k: int, scenario: Scenario) -> float:
    """Reflection coefficient maximizing the Lagrangian's BackCom slot term.

    1 when the reflection-cap multiplier is strictly positive; otherwise the
    smaller root of `reflection_quadratic` clipped to [0, 1] (the larger root
    always exceeds 1). Degenerate discriminants fall back to a grid search.
    """
    if duals.reflect_cap[k] > 0.0:
        return 1.0
    A, Bq, D = reflection_quadratic(duals, k, scenario)
    if A <= 0.0:
        # g or h vanished: the quadratic degenerates to -B a + D = 0
        if Bq > 0.0:
            return min(1.0, max(0.0, D / Bq))
        return 0.0
    disc = Bq * Bq - 4.0 * A * D
    if disc < 0.0:
        if disc >= -1e-9 * Bq * Bq:
            disc = 0.0
        else:
            warnings.warn(
                "negative discriminant in reflection closed form; "
                "falling back to grid search",
                NumericalDegeneracy,
            )
            return _reflection_grid(duals, k, scenario)
    root = (Bq - math.sqrt(disc)) / (2.0 * A)
    if root > 1.0:
        log.debug("reflection root %.6g > 1 for EU %d; clamped", root, k)
    return min(1.0, max(0.0, root))


def time_prices(
    duals: DualState, problem: Problem, alpha: np.ndarray, p: np.ndarray
):
    """Marginal Lagrangian value per second of each phase time.

    Substituting x = alpha*t_b and P = p*t_a into the Lagrangian leaves it
    linear in the times; these are the coefficients. Per second of EU k's
    backscatter slot: its weighted BackCom rate, its own harvest at the
    unreflected remainder, every other EU's idle-harvest value, minus its
    circuit power cost, the block-time price, and the reflection-cap credit
    for the unreflected share. Per second of AT: weighted rate minus the
    energy price of (p + circuit power) and the block-time price. Pinned
    phases price at -inf so they are never allocated.
    """
    sc = problem.scenario
    B = sc.bandwidth
    noise = B * sc.noise_density
    n = sc.n_eus
    mu = duals.energy
    idle_value = np.array(
        [mu[j] * phys.idle_harvest_power(sc, j) for j in range(n)]
    )
    cross = idle_value.sum() - idle_value  # sum over j != k
    c_b = np.empty(n)
    c_a = np.empty(n)
    for k, eu in enumerate(sc.eus):
        w = eu.weight + duals.bits[k]
        S = sc.pb_power * eu.g
        rate_b = w * B * math.log2(1.0 + sc.backcom_gap * S * eu.h * alpha[k] / noise)
        own = mu[k] * phys.harvested_power((1.0 - alpha[k]) * S, eu.eh)
        c_b[k] = (
            rate_b
            + own
            + cross[k]
            - mu[k] * eu.backcom_circuit_power
            - duals.time
            + duals.reflect_cap[k] * (1.0 - alpha[k])
        )
        rate_a = w * B * math.log2(1.0 + p[k] * eu.h / noise)
        c_a[k] = rate_a - mu[k] * (p[k] + eu.at_circuit_power) - duals.time
    if problem.pin_at:
        c_a[:] = -np.inf
    return c_b, c_a


def time_allocation_lp(c_b: np.ndarray, c_a: np.ndarray, T: float):
    """Maximize sum(c_b t_b + c_a t_a) s.t. sum of times <= T, times >= 0.

    The optimum sits on a vertex: all of T on one variable with the largest
    positive coefficient, or all zeros. Ties go to the lowest EU index, then
    BackCom before AT.
    """
    n = len(c_b)
    t_b, t_a = np.zeros(n), np.zeros(n)
    best_val, best = 0.0, None
    for k in range(n):
        for coef, tag in ((c_b[k], "b"), (c_a[k], "a")):
            if coef > best_val:
                best_val, best = coef, (k, tag)
    if best is not None:
        k, tag = best
        (t_b if tag == "b" else t_a)[k] = T
    return t_b, t_a
