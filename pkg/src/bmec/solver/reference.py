"""Generic convex-programming solver used as the correctness oracle.

Builds the perspective-form convex program directly in cvxpy (exponential
cones for the time-scaled log rates, a quad-over-lin term for the harvest
perspective, a power cone for the cubic CPU energy) and hands it to a conic
interior-point solver. None of the closed-form optimizers are used, so
agreement with the dual solver is a genuine two-implementation check.

The interior-point iterate sits slightly inside the feasible set, so a
deterministic cleanup follows: clip stray negatives, rescale the time budget,
and re-tighten each EU's energy constraint exactly by inverting it for the
one free consumption term (cube root in f, linear in P). The report is then
certified with the same `kkt_residual` as the dual solver.
"""

from __future__ import annotations

import logging
import math

import cvxpy as cp
import numpy as np

from .. import phys_models as phys
from ..problem import (
    Allocation,
    Problem,
    is_feasible,
    objective,
    per_eu_bits,
    residuals,
)
from .certificates import kkt_residual
from .closed_forms import LN2, DualState
from .polish import polish, snap_to_boundary
from .report import SolveOptions, SolveReport, SolveStatus

__all__ = ["solve_reference"]

log = logging.getLogger(__name__)

_DUAL_DIRT = 1e-7  # tolerated negative dual mass from the conic solver


def _build(problem: Problem):
    sc = problem.scenario
    n = sc.n_eus
    T, B = sc.block_length, sc.bandwidth
    noise = B * sc.noise_density

    t_b = cp.Variable(n, nonneg=True)
    x = cp.Variable(n, nonneg=True)
    t_a = cp.Variable(n, nonneg=True)
    P = cp.Variable(n, nonneg=True)
    f01 = cp.Variable(n, nonneg=True)  # f / f_max, for conditioning

    bits_exprs = []
    energy_cons = []
    idle_power = [phys.idle_harvest_power(sc, k) for k in range(n)]
    for k, eu in enumerate(sc.eus):
        S = sc.pb_power * eu.g
        a = sc.backcom_gap * S * eu.h / noise
        r_b = -cp.rel_entr(t_b[k], t_b[k] + a * x[k]) * (B / LN2)
        r_a = -cp.rel_entr(t_a[k], t_a[k] + (eu.h / noise) * P[k]) * (B / LN2)
        local = (T * eu.f_max / sc.cycles_per_bit) * f01[k]
        bits_exprs.append(r_b + r_a + local)

        cvd = eu.eh.c * eu.eh.v - eu.eh.d
        own = cvd * (
            t_b[k] / eu.eh.v
            - cp.quad_over_lin(t_b[k], (t_b[k] - x[k]) * S + eu.eh.v * t_b[k])
        )
        idle = idle_power[k] * (cp.sum(t_b) - t_b[k])
        burn = (
            P[k]
            + eu.backcom_circuit_power * t_b[k]
            + eu.at_circuit_power * t_a[k]
            + (eu.capacitance * T * eu.f_max**3) * cp.power(f01[k], 3)
        )
        energy_cons.append(burn - own - idle <= 0)

    l_min = np.array([eu.l_min for eu in sc.eus])
    bits_cons = [bits_exprs[k] >= l_min[k] for k in range(n)]
    time_con = cp.sum(t_b) + cp.sum(t_a) <= T
    cap_con = f01 <= 1
    reflect_con = x <= t_b

    constraints = energy_cons + bits_cons + [time_con, cap_con, reflect_con]
    if problem.pin_x:
        constraints.append(x == 0)
    if problem.pin_at:
        constraints += [t_a == 0, P == 0]
    if problem.pin_f:
        constraints.append(f01 == 0)

    weights = np.array([eu.weight for eu in sc.eus])
    # objective scaled to O(1); a raw bit count of ~1e6 would demand more
    # digits from the conic solver than doubles carry
    omega = max(1.0, float(weights.max()) * B * T)
    obj = cp.Maximize(cp.sum(cp.multiply(weights / omega, cp.hstack(bits_exprs))))
    prob = cp.Problem(obj, constraints)
    handles = {
        "vars": (t_b, x, t_a, P, f01),
        "energy": energy_cons,
        "bits": bits_cons,
        "time": time_con,
        "cap": cap_con,
        "reflect": reflect_con,
        "omega": omega,
    }
    return prob, handles


def _extract_duals(handles, problem: Problem) -> DualState:
    f_max = np.array([eu.f_max for eu in problem.scenario.eus])
    omega = handles["omega"]  # duals of the scaled program are 1/omega times ours

    def vec(values) -> np.ndarray:
        arr = np.asarray(values, dtype=float).reshape(-1) * omega
        out = np.where(arr < 0.0, np.where(arr > -_DUAL_DIRT * omega, 0.0, arr), arr)
        if np.any(out < 0.0):
            log.warning("conic solver returned negative dual mass: %s", arr)
            out = np.maximum(out, 0.0)
        return out

    energy = vec([c.dual_value for c in handles["energy"]])
    bits = vec([c.dual_value for c in handles["bits"]])
    time = float(vec([handles["time"].dual_value])[0])
    freq = vec(handles["cap"].dual_value) / f_max
    reflect = vec(handles["reflect"].dual_value)
    return DualState(
        bits=bits, energy=energy, freq_cap=freq, time=time, reflect_cap=reflect
    )


def solve_reference(problem: Problem, opts: SolveOptions | None = None) -> SolveReport:
    """Solve the perspective-form program with a generic conic solver.

    Statuses: Optimal (feasible + certified KKT residual within opts.tol),
    Infeasible (conic infeasibility certificate), MaxIterations otherwise.
    """
    opts = opts or SolveOptions()
    sc = problem.scenario
    n = sc.n_eus
    prob, handles = _build(problem)

    conclusive = (
        cp.OPTIMAL,
        cp.OPTIMAL_INACCURATE,
        cp.INFEASIBLE,
        cp.INFEASIBLE_INACCURATE,
    )
    status = None
    try:
        prob.solve(
            solver=cp.CLARABEL,
            tol_gap_abs=1e-11,
            tol_gap_rel=1e-11,
            tol_feas=1e-11,
            max_iter=500,
        )
        status = prob.status
    except Exception as exc:  # noqa: BLE001 - cvxpy raises various types here
        log.warning("CLARABEL failed (%s); retrying with SCS", exc)
    if status not in conclusive:
        try:
            prob.solve(solver=cp.SCS, eps=1e-9, max_iters=200_000)
            status = prob.status
        except Exception as exc:  # noqa: BLE001
            log.warning("SCS fallback failed too (%s)", exc)
            status = "solver_error"

    iterations = int(getattr(prob.solver_stats, "num_iters", 0) or 0)

    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolveReport(
            status=SolveStatus.INFEASIBLE,
            objective=math.nan,
            allocation=None,
            duals=None,
            kkt_residual=math.inf,
            per_eu_bits=None,
            energy_slack=None,
            iterations=iterations,
            solver="reference",
        )
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        log.warning("reference solve ended with conic status %r", status)
        return SolveReport(
            status=SolveStatus.MAX_ITERATIONS,
            objective=math.nan,
            allocation=None,
            duals=None,
            kkt_residual=math.inf,
            per_eu_bits=None,
            energy_slack=None,
            iterations=iterations,
            solver="reference",
        )

    t_b, x, t_a, P, f01 = handles["vars"]
    f_max = np.array([eu.f_max for eu in sc.eus])
    raw = Allocation(
        t_b=np.asarray(t_b.value, dtype=float),
        x=np.asarray(x.value, dtype=float),
        t_a=np.asarray(t_a.value, dtype=float),
        P=np.asarray(P.value, dtype=float),
        f=np.asarray(f01.value, dtype=float) * f_max,
        tau=np.full(n, sc.block_length),
    )
    alloc = snap_to_boundary(raw, problem)
    duals = _extract_duals(handles, problem)

    refined = polish(alloc, duals, problem)
    # Newton equalities leave primal dust at equation-norm scale; snap the
    # refined point back onto the boundary before judging feasibility
    snapped = snap_to_boundary(refined.allocation, problem)
    snap_res = kkt_residual(snapped, refined.duals, problem)
    take = snap_res <= opts.tol or snap_res < kkt_residual(alloc, duals, problem)
    if take and is_feasible(snapped, sc):
        conic_obj = objective(alloc, sc)
        polished_obj = objective(snapped, sc)
        if abs(polished_obj - conic_obj) > 1e-5 * max(abs(conic_obj), 1.0):
            log.warning(
                "refinement moved the objective %.6e -> %.6e; keeping it "
                "(certified), but the conic solution was loose",
                conic_obj,
                polished_obj,
            )
        alloc, duals = snapped, refined.duals

    residual = kkt_residual(alloc, duals, problem)
    feasible = is_feasible(alloc, sc)
    res = residuals(alloc, sc)
    final = (
        SolveStatus.OPTIMAL
        if feasible and residual <= opts.tol
        else SolveStatus.MAX_ITERATIONS
    )
    if final is not SolveStatus.OPTIMAL:
        log.warning(
            "reference solve not certified: feasible=%s residual=%.3e",
            feasible,
            residual,
        )
    return SolveReport(
        status=final,
        objective=objective(alloc, sc),
        allocation=alloc,
        duals=duals,
        kkt_residual=residual,
        per_eu_bits=per_eu_bits(alloc, sc),
        energy_slack=-res.energy_deficit,
        iterations=iterations,
        solver="reference",
    )
