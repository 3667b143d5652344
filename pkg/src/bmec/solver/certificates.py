"""Optimality certification: scaled KKT residual and structural checks.

Every residual component is nondimensionalized so a single tolerance (default
1e-6) is meaningful across instances: stationarity gradients are multiplied by
their variable's natural range and divided by the objective scale,
complementary-slackness products (already in bits) are divided by the
objective scale, and primal residuals are divided by their constraint scale.
"""

from __future__ import annotations

import math

import numpy as np

from .. import phys_models as phys
from ..problem import Allocation, Problem, objective, residuals
from ..scenario import Scenario
from .closed_forms import (
    DualState,
    dL_df,
    dL_dP,
    dL_dx,
    optimal_power,
    optimal_reflection,
    reflection_quadratic,
    time_allocation_lp,
    time_prices,
)

__all__ = ["kkt_residual", "remark1_checks", "verify_lemma1"]

_BOUNDARY = 1e-12  # relative closeness treated as "at the bound"


def _consumption(alloc: Allocation, scenario: Scenario, k: int) -> float:
    eu = scenario.eus[k]
    return (
        eu.backcom_circuit_power * float(alloc.t_b[k])
        + float(alloc.P[k])
        + eu.at_circuit_power * float(alloc.t_a[k])
        + phys.local_energy(float(alloc.f[k]), scenario.block_length, eu.capacitance)
    )


def kkt_residual(
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    detail: dict | None = None,
) -> float:
    """Largest scaled first-order optimality violation at (alloc, duals).

    Covers stationarity in f, P and x (one-sided at bounds), sign and gap
    optimality of the time prices, primal feasibility, dual feasibility, and
    complementary slackness. Pinned variables contribute nothing. Pass a dict
    as `detail` to collect the worst value per condition group.
    """
    sc = problem.scenario
    T, B = sc.block_length, sc.bandwidth
    n = sc.n_eus
    w = np.array([eu.weight for eu in sc.eus])
    l_min = np.array([eu.l_min for eu in sc.eus])
    f_max = np.array([eu.f_max for eu in sc.eus])

    res = residuals(alloc, sc)
    harvest = np.array(
        [phys.total_harvest(float(alloc.x[k]), alloc.t_b, k, sc).total for k in range(n)]
    )
    consume = np.array([_consumption(alloc, sc, k) for k in range(n)])
    obj_scale = max(
        1.0,
        abs(objective(alloc, sc)),
        float(np.max(w) * B * T),
        float((w * l_min).sum()),
    )
    e_scale = np.maximum(np.maximum(harvest, consume), 1e-6)

    worst = 0.0

    def push(value: float, tag: str = "") -> None:
        nonlocal worst
        value = float(value)
        worst = max(worst, value)
        if detail is not None and tag:
            detail[tag] = max(detail.get(tag, 0.0), value)

    for k in range(n):
        f, t_a, P = float(alloc.f[k]), float(alloc.t_a[k]), float(alloc.P[k])
        t_b, x = float(alloc.t_b[k]), float(alloc.x[k])
        if not problem.pin_f:
            d = dL_df(duals, f, k, sc)
            r = max(d, 0.0) if f <= _BOUNDARY * f_max[k] else abs(d)
            push(r * f_max[k] / obj_scale, "stat_f")
        if not problem.pin_at and t_a > 0.0:
            d = dL_dP(duals, P, t_a, k, sc)
            r = max(d, 0.0) if P <= _BOUNDARY * e_scale[k] else abs(d)
            push(r * e_scale[k] / obj_scale, "stat_P")
        if not problem.pin_x and t_b > 0.0:
            d = dL_dx(duals, x, t_b, k, sc)
            r = max(d, 0.0) if x <= _BOUNDARY * t_b else abs(d)
            push(r * T / obj_scale, "stat_x")

    # Time-price optimality: prices evaluated at the allocation's realized
    # per-second values; a zero phase is priced at its best achievable value.
    alpha = np.zeros(n)
    p = np.zeros(n)
    for k in range(n):
        if problem.pin_x:
            alpha[k] = 0.0
        elif alloc.t_b[k] > 0:
            alpha[k] = float(alloc.x[k] / alloc.t_b[k])
        else:
            alpha[k] = optimal_reflection(duals, k, sc)
        if problem.pin_at:
            p[k] = 0.0
        elif alloc.t_a[k] > 0:
            p[k] = float(alloc.P[k] / alloc.t_a[k])
        elif duals.energy[k] > 0:
            p[k] = optimal_power(duals, k, sc)
    c_b, c_a = time_prices(duals, problem, alpha, p)
    lp_value = 0.0
    attained = 0.0
    for k in range(n):
        pairs = [(c_b[k], float(alloc.t_b[k]))]
        if not problem.pin_at:
            pairs.append((c_a[k], float(alloc.t_a[k])))
        for coef, t in pairs:
            r = abs(coef) if t > _BOUNDARY * T else max(coef, 0.0)
            push(r * T / obj_scale, "price")
            lp_value = max(lp_value, coef)
            attained += coef * t
    push((max(lp_value, 0.0) * T - attained) / obj_scale, "lp_gap")

    # Primal feasibility.
    push(np.max(np.maximum(res.bits_shortfall, 0.0) / np.maximum(l_min, 1.0)), "primal")
    push(np.max(np.maximum(res.energy_deficit, 0.0) / e_scale), "primal")
    push(max(res.time_excess, 0.0) / T, "primal")
    push(np.max(np.maximum(alloc.x - alloc.t_b, 0.0)) / T, "primal")
    push(np.max(np.maximum(alloc.f - f_max, 0.0) / f_max), "primal")
    for arr, scale in (
        (alloc.t_b, T),
        (alloc.x, T),
        (alloc.t_a, T),
        (alloc.P, float(np.max(e_scale))),
        (alloc.f, float(np.max(f_max))),
    ):
        push(np.max(np.maximum(-arr, 0.0)) / scale, "primal")

    # Dual feasibility (violations only; scaled like the matching CS product).
    push(np.max(np.maximum(-duals.bits, 0.0) * np.maximum(l_min, 1.0)) / obj_scale, "dual")
    push(np.max(np.maximum(-duals.energy, 0.0) * e_scale) / obj_scale, "dual")
    push(np.max(np.maximum(-duals.freq_cap, 0.0) * f_max) / obj_scale, "dual")
    push(max(-duals.time, 0.0) * T / obj_scale, "dual")
    push(np.max(np.maximum(-duals.reflect_cap, 0.0)) * T / obj_scale, "dual")

    # Complementary slackness (bits / objective scale).
    push(np.max(duals.bits * np.maximum(-res.bits_shortfall, 0.0)) / obj_scale, "cs")
    push(np.max(duals.energy * np.maximum(-res.energy_deficit, 0.0)) / obj_scale, "cs")
    if not problem.pin_f:
        push(np.max(duals.freq_cap * np.maximum(f_max - alloc.f, 0.0)) / obj_scale, "cs")
    push(duals.time * max(-res.time_excess, 0.0) / obj_scale, "cs")
    if not problem.pin_x:
        push(
            np.max(duals.reflect_cap * np.maximum(alloc.t_b - alloc.x, 0.0)) / obj_scale,
            "cs",
        )
    return worst


def remark1_checks(report, scenario: Scenario) -> list[tuple[str, bool, str]]:
    """Structural optimality facts: named (check, passed, detail) triples.

    (a) the energy budget is tight for every EU; (b) positive transmit power
    exactly when the offloading channel beats the energy-price threshold;
    (c) backscattering participation exactly when the stationarity quadratic's
    constant term is positive.
    """
    checks: list[tuple[str, bool, str]] = []
    alloc, duals = report.allocation, report.duals

    slack = np.max(np.abs(report.energy_slack))
    checks.append(("energy_budget_active", bool(slack <= 1e-10), f"max |slack| = {slack:.3e} J"))

    ok_b, ok_c = True, True
    detail_b, detail_c = [], []
    for k, eu in enumerate(scenario.eus):
        w = eu.weight + duals.bits[k]
        threshold = scenario.noise_density * duals.energy[k] * math.log(2.0) / w
        if abs(eu.h - threshold) <= 1e-9 * max(threshold, 1e-300):
            continue  # within the tolerance band of the threshold itself
        if alloc.t_a[k] > 0:
            p = float(alloc.P[k] / alloc.t_a[k])
        elif duals.energy[k] > 0:
            p = optimal_power(duals, k, scenario)
        else:
            p = math.inf  # free energy: any channel justifies transmitting
        if (p > 0) != (eu.h > threshold):
            ok_b = False
            detail_b.append(f"eu[{k}]: p={p:.3e}, h={eu.h:.3e}, threshold={threshold:.3e}")
        A, Bq, D = reflection_quadratic(duals, k, scenario)
        if abs(D) <= 1e-9 * max(A, abs(Bq), 1e-300):
            continue
        alpha = optimal_reflection(duals, k, scenario)
        if alloc.t_b[k] > 0:
            alpha = float(alloc.x[k] / alloc.t_b[k])
        if (alpha > 1e-9) != (D > 0):
            ok_c = False
            detail_c.append(f"eu[{k}]: alpha={alpha:.3e}, D={D:.3e}")
    checks.append(("transmit_power_threshold", ok_b, "; ".join(detail_b) or "consistent"))
    checks.append(("backcom_participation", ok_c, "; ".join(detail_c) or "consistent"))
    return checks


def verify_lemma1(scenario: Scenario, grid_n: int = 50, scheme=None) -> bool:
    """Confirm empirically that full-block execution time is optimal.

    Solves the instance, then per EU sweeps the execution time over a grid,
    re-optimizing the CPU frequency against the energy left after offloading;
    true iff tau = T attains the per-EU maximum bit count (within float slack).
    """
    from ..problem import Scheme, restrict
    from .dual import solve_dual

    problem = restrict(scenario, scheme or Scheme.PROPOSED)
    report = solve_dual(problem)
    if report.allocation is None:
        raise ValueError("instance has no solution to examine")
    alloc = report.allocation
    T = scenario.block_length
    for k, eu in enumerate(scenario.eus):
        offload = phys.backcom_bits(
            float(alloc.x[k]), float(alloc.t_b[k]), scenario, k
        ) + phys.at_bits(float(alloc.P[k]), float(alloc.t_a[k]), scenario, k)
        budget = phys.total_harvest(float(alloc.x[k]), alloc.t_b, k, scenario).total - (
            eu.backcom_circuit_power * float(alloc.t_b[k])
            + float(alloc.P[k])
            + eu.at_circuit_power * float(alloc.t_a[k])
        )
        budget = max(budget, 0.0)

        def bits_at(tau: float) -> float:
            if problem.pin_f or tau == 0.0:
                return offload
            f = min(eu.f_max, (budget / (eu.capacitance * tau)) ** (1.0 / 3.0))
            return offload + phys.local_bits(f, tau, scenario.cycles_per_bit)

        grid = np.linspace(T / grid_n, T, grid_n)
        best = max(bits_at(float(tau)) for tau in grid)
        if bits_at(T) < best - 1e-9 * max(best, 1.0):
            return False
    return True
