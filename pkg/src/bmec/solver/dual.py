"""Lagrangian dual-ascent solver built on the closed-form primal updates.

The per-EU bits and energy constraints are dualized with multipliers
(theta, mu); everything else (the time budget, 0 <= x <= t_b expressed as a
reflection ratio, the frequency cap, nonnegativity) stays primal. For fixed
multipliers the inner maximization splits into independent closed forms per
EU (reflection ratio, transmit power, CPU frequency) plus a one-constraint LP
over the phase times, so each ascent step costs a handful of scalar formulas.

A projected subgradient ascends (theta, mu) with a diminishing step until a
feasible primal value is known, then a Polyak step sized by the duality gap.
The LP jumps between time-allocation vertices, so the primal is recovered by
ergodic averaging over the last quarter of the iterates, snapped onto the
constraint boundary, and handed to the shared Newton polish for the KKT
certificate. Infeasible instances are caught either by an analytic rate-cap
screen or by multiplier growth with a shortfall that refuses to close.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .. import phys_models as phys
from ..problem import (
    Allocation,
    Problem,
    is_feasible,
    objective,
    per_eu_bits,
    residuals,
)
from ..scenario import Scenario
from .certificates import kkt_residual
from .closed_forms import (
    DualState,
    dL_df,
    dL_dx,
    optimal_frequency,
    optimal_power,
    optimal_reflection,
    time_allocation_lp,
    time_prices,
)
from .polish import polish, snap_to_boundary
from .report import SolveOptions, SolveReport, SolveStatus

__all__ = ["solve_dual"]

log = logging.getLogger(__name__)

_FIRST_MILESTONE = 64
_STALL_LIMIT = 5  # consecutive stalled milestones before declaring infeasible
_MU_FLOOR = 1e-12
_STEP0 = 20.0  # diminishing step a/(b + iter)
_STEP_OFFSET = 50.0
_POLYAK_CAP = 3.0
_DAMP_FACTOR = 0.5  # step shrink on a milestone that fails to improve
_DAMP_FLOOR = 1.0 / 1024.0


@dataclass(frozen=True)
class _Pre:
    """Per-scenario constants hoisted out of the ascent loop."""

    S: np.ndarray  # incident beacon power P_t * g_k
    F_idle: np.ndarray  # harvest rate under the full beacon signal
    w: np.ndarray
    l_min: np.ndarray
    f_max: np.ndarray
    eps: np.ndarray
    pcb: np.ndarray
    pca: np.ndarray
    e_scale: np.ndarray  # joules scale per EU (full-block idle harvest)
    theta_scale: float  # objective scale per bit of constraint motion
    omega: float
    zeros: np.ndarray


def _prepare(problem: Problem) -> _Pre:
    sc = problem.scenario
    n = sc.n_eus
    T = sc.block_length
    S = np.array([sc.pb_power * eu.g for eu in sc.eus])
    F_idle = np.array([phys.idle_harvest_power(sc, k) for k in range(n)])
    w = np.array([eu.weight for eu in sc.eus])
    omega = max(1.0, float(w.max()) * sc.bandwidth * T)
    return _Pre(
        S=S,
        F_idle=F_idle,
        w=w,
        l_min=np.array([eu.l_min for eu in sc.eus]),
        f_max=np.array([eu.f_max for eu in sc.eus]),
        eps=np.array([eu.capacitance for eu in sc.eus]),
        pcb=np.array([eu.backcom_circuit_power for eu in sc.eus]),
        pca=np.array([eu.at_circuit_power for eu in sc.eus]),
        e_scale=np.maximum(F_idle * T, 1e-9),
        theta_scale=omega / (sc.bandwidth * T),
        omega=omega,
        zeros=np.zeros(n),
    )


def _saturation(eu) -> float:
    """Harvest-rate ceiling of the non-linear EH model (the "sat" regime)."""
    return eu.eh.c - eu.eh.d / eu.eh.v


def _screen_infeasible(problem: Problem, pre: _Pre) -> bool:
    """Certain infeasibility by rate caps: local bits are bounded per EU no
    matter the schedule, and offload bits need exclusive slot time at a
    bounded per-second rate, so the required exclusive times must fit in T."""
    sc = problem.scenario
    T = sc.block_length
    B = sc.bandwidth
    noise = B * sc.noise_density
    needed_time = 0.0
    for k, eu in enumerate(sc.eus):
        if eu.l_min <= 0.0:
            continue
        sat = _saturation(eu)
        local_cap = 0.0
        if not problem.pin_f:
            f_cap = min(eu.f_max, (sat / eu.capacitance) ** (1.0 / 3.0))
            local_cap = f_cap * T / sc.cycles_per_bit
        need = eu.l_min - local_cap
        if need <= 0.0:
            continue
        rate = 0.0
        if not problem.pin_x and eu.h > 0.0:
            rate = B * math.log2(1.0 + sc.backcom_gap * pre.S[k] * eu.h / noise)
        if not problem.pin_at and eu.h > 0.0:
            rate = max(rate, B * math.log2(1.0 + sat * eu.h / noise))
        if rate <= 0.0:
            return True
        needed_time += need / rate
    return needed_time > T * (1.0 + 1e-9)


def _init_mu(problem: Problem, pre: _Pre) -> np.ndarray:
    """Anchor the energy prices so the first closed-form primals are sane.

    Inverting the frequency formula at the energy-feasible frequency (burning
    the full-block idle harvest) and the power formula at the idle harvest
    rate gives two candidate prices; the larger (more conservative) wins.
    """
    sc = problem.scenario
    T = sc.block_length
    B = sc.bandwidth
    mu = np.empty(sc.n_eus)
    for k, eu in enumerate(sc.eus):
        cands = []
        if not problem.pin_f:
            f0 = (pre.e_scale[k] / (eu.capacitance * T)) ** (1.0 / 3.0)
            f0 = min(eu.f_max, max(f0, 1e-3 * eu.f_max))
            cands.append(eu.weight / (3.0 * eu.capacitance * sc.cycles_per_bit * f0 * f0))
        if not problem.pin_at and eu.h > 0.0:
            p0 = pre.F_idle[k] + B * sc.noise_density / eu.h
            cands.append(eu.weight * B / (math.log(2.0) * p0))
        mu[k] = max(max(cands) if cands else pre.omega / pre.e_scale[k], _MU_FLOOR)
    return mu


def _inner_step(theta: np.ndarray, mu: np.ndarray, problem: Problem, pre: _Pre):
    """Closed-form inner maximization at fixed (theta, mu).

    Returns the primal vertex, the dual value there, and the normalized
    subgradients (relative bits shortfall, relative energy overdraft).
    """
    sc = problem.scenario
    n = sc.n_eus
    T = sc.block_length
    duals = DualState(
        bits=theta, energy=mu, freq_cap=pre.zeros, time=0.0, reflect_cap=pre.zeros
    )
    alpha = np.zeros(n)
    p = np.zeros(n)
    f = np.zeros(n)
    for k in range(n):
        if not problem.pin_x:
            alpha[k] = optimal_reflection(duals, k, sc)
        if not problem.pin_at:
            p[k] = optimal_power(duals, k, sc)
        if not problem.pin_f:
            f[k] = min(optimal_frequency(duals, k, sc), pre.f_max[k])
    c_b, c_a = time_prices(duals, problem, alpha, p)
    t_b, t_a = time_allocation_lp(c_b, c_a, T)

    bits = f * T / sc.cycles_per_bit
    cons = pre.eps * T * f**3
    harv = np.zeros(n)
    if t_b.sum() > 0.0:
        k = int(np.argmax(t_b))
        bits[k] += phys.backcom_bits(alpha[k] * T, T, sc, k)
        harv[:] = pre.F_idle * T
        harv[k] = T * phys.harvested_power((1.0 - alpha[k]) * pre.S[k], sc.eus[k].eh)
        cons[k] += pre.pcb[k] * T
    elif t_a.sum() > 0.0:
        k = int(np.argmax(t_a))
        bits[k] += phys.at_bits(p[k] * T, T, sc, k)
        cons[k] += (p[k] + pre.pca[k]) * T

    q = float(
        pre.w @ bits + theta @ (bits - pre.l_min) + mu @ (harv - cons)
    )
    g_theta = (pre.l_min - bits) / (sc.bandwidth * T)
    g_mu = (cons - harv) / pre.e_scale
    prices = np.concatenate([c_b[np.isfinite(c_b)], c_a[np.isfinite(c_a)]])
    t0 = float(prices.max(initial=0.0))
    return alpha, t_b, t_a, p, f, q, g_theta, g_mu, max(t0, 0.0)


def _lp_restore(
    duals: DualState, problem: Problem, pre: _Pre
) -> tuple[Allocation, DualState] | None:
    """Primal recovery at fixed duals by re-splitting the block time.

    The duals fix each EU's per-second recipe (reflection ratio, transmit
    power, CPU frequency) through the closed forms; the best time split for
    those recipes is then a small LP against the true bits, energy, and time
    constraints, since rates, circuit drains, and harvests are all linear in
    the slot lengths once the recipes are pinned. Unlike the ergodic average
    this cannot freeze on a single vertex, so it recovers time-sharing optima
    even from a barely moving ascent. Falls back to zero local frequency when
    the recipe frequencies overdraw some budget; returns None only when even
    that LP is infeasible.

    The returned duals are rebuilt from the LP row marginals, which are the
    exact multipliers of the restricted problem; an EU whose energy row comes
    back slack keeps its incoming price, since the power and frequency
    formulas need a strictly positive one."""
    sc = problem.scenario
    n = sc.n_eus
    T = sc.block_length
    alpha = np.zeros(n)
    p_w = np.zeros(n)
    f_rec = np.zeros(n)
    for k in range(n):
        if not problem.pin_x:
            alpha[k] = optimal_reflection(duals, k, sc)
        if not problem.pin_at:
            p_w[k] = optimal_power(duals, k, sc)
        if not problem.pin_f:
            f_rec[k] = min(optimal_frequency(duals, k, sc), pre.f_max[k])
    rb = np.array(
        [phys.backcom_bits(float(alpha[k]), 1.0, sc, k) for k in range(n)]
    )
    ra = np.array([phys.at_bits(float(p_w[k]), 1.0, sc, k) for k in range(n)])
    hp = np.array(
        [
            phys.backcom_harvest_energy(
                float(alpha[k]), 1.0, sc.pb_power, sc.eus[k].g, sc.eus[k].eh
            )
            for k in range(n)
        ]
    )
    bounds = [(0.0, None)] * (2 * n)
    if problem.pin_at:
        for k in range(n):
            bounds[n + k] = (0.0, 0.0)
    for f_try in (f_rec, pre.zeros):
        loc_bits = f_try * T / sc.cycles_per_bit
        loc_energy = pre.eps * T * f_try**3
        cost = np.concatenate([-pre.w * rb, -pre.w * ra])
        rows = [np.ones(2 * n)]
        rhs = [T]
        bits_row = {}
        energy_row = {}
        for k in range(n):
            need = pre.l_min[k] - loc_bits[k]
            if need > 0.0:
                row = np.zeros(2 * n)
                row[k] = -rb[k]
                row[n + k] = -ra[k]
                bits_row[k] = len(rows)
                rows.append(row)
                rhs.append(-need)
            row = np.zeros(2 * n)
            row[:n] = -pre.F_idle[k]
            row[k] = pre.pcb[k] - hp[k]
            row[n + k] = p_w[k] + pre.pca[k]
            energy_row[k] = len(rows)
            rows.append(row)
            rhs.append(-loc_energy[k])
        sol = scipy.optimize.linprog(
            cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds,
            method="highs",
        )
        if sol.status == 0:
            t_b = np.maximum(sol.x[:n], 0.0)
            t_a = np.maximum(sol.x[n:], 0.0)
            alloc = snap_to_boundary(
                Allocation(
                    t_b=t_b, x=alpha * t_b, t_a=t_a, P=p_w * t_a,
                    f=f_try.copy(), tau=np.full(n, T),
                ),
                problem,
            )
            marg = -np.asarray(sol.ineqlin.marginals)
            theta = np.zeros(n)
            mu = np.zeros(n)
            for k in range(n):
                if k in bits_row:
                    theta[k] = max(marg[bits_row[k]], 0.0)
                lp_mu = max(marg[energy_row[k]], 0.0)
                mu[k] = lp_mu if lp_mu > 0.0 else duals.energy[k]
            lp_duals = DualState(
                bits=theta,
                energy=np.maximum(mu, _MU_FLOOR),
                freq_cap=np.zeros(n),
                time=max(marg[0], 0.0),
                reflect_cap=np.zeros(n),
            )
            return alloc, _cap_multipliers(alloc, lp_duals, problem)
        if all(f == 0.0 for f in f_try):
            break
    return None


def _cap_multipliers(
    alloc: Allocation, duals: DualState, problem: Problem
) -> DualState:
    """Fill the frequency- and reflection-cap multipliers from stationarity
    so a capped variable does not read as a first-order violation."""
    sc = problem.scenario
    phi = duals.freq_cap.copy()
    vth = duals.reflect_cap.copy()
    for k, eu in enumerate(sc.eus):
        if not problem.pin_f and alloc.f[k] >= eu.f_max * (1.0 - 1e-9):
            phi[k] = max(0.0, dL_df(duals, float(alloc.f[k]), k, sc))
        tb_k = float(alloc.t_b[k])
        if tb_k > 0.0 and alloc.x[k] >= tb_k * (1.0 - 1e-9):
            vth[k] = max(
                0.0, dL_dx(duals, float(alloc.x[k]), tb_k, k, sc)
            )
    return DualState(
        bits=duals.bits, energy=duals.energy, freq_cap=phi,
        time=duals.time, reflect_cap=vth,
    )


def _recipe_iterate(
    start: DualState, problem: Problem, pre: _Pre
) -> tuple[Allocation, DualState, float] | None:
    """Alternate recipe updates and restricted LPs to a self-consistent pair.

    Each round re-derives the per-second recipes from the current duals, re-
    splits the time by LP, and adopts the LP marginals as the next duals. A
    fixed point satisfies every first-order condition at once, and because
    the simplex re-picks the slot support each round, the iteration walks
    across support changes that a warm-started Newton cannot cross. Returns
    the best (allocation, duals, residual) seen, or None when no LP round
    was feasible."""
    best: tuple[Allocation, DualState, float] | None = None
    duals = start
    n = problem.scenario.n_eus
    for _ in range(10):
        out = _lp_restore(duals, problem, pre)
        if out is None:
            break
        alloc, lp_duals = out
        res = kkt_residual(alloc, lp_duals, problem)
        if best is None or res < best[2]:
            best = (alloc, lp_duals, res)
        if res <= 1e-9:
            break
        # under-relax the handoff: raw marginals overshoot when a slot flips
        # in or out of the support and the bare iteration limit-cycles;
        # prices move in decades, so mix those geometrically
        duals = DualState(
            bits=0.5 * (lp_duals.bits + duals.bits),
            energy=np.sqrt(
                np.maximum(lp_duals.energy, _MU_FLOOR)
                * np.maximum(duals.energy, _MU_FLOOR)
            ),
            freq_cap=np.zeros(n),
            time=0.5 * (lp_duals.time + duals.time),
            reflect_cap=np.zeros(n),
        )
    return best


def _report(status, alloc, duals, residual, iterations, problem) -> SolveReport:
    sc = problem.scenario
    if alloc is None:
        return SolveReport(
            status=status,
            objective=math.nan,
            allocation=None,
            duals=None,
            kkt_residual=math.inf,
            per_eu_bits=None,
            energy_slack=None,
            iterations=iterations,
            solver="dual",
        )
    res = residuals(alloc, sc)
    return SolveReport(
        status=status,
        objective=objective(alloc, sc),
        allocation=alloc,
        duals=duals,
        kkt_residual=residual,
        per_eu_bits=per_eu_bits(alloc, sc),
        energy_slack=-res.energy_deficit,
        iterations=iterations,
        solver="dual",
    )


def solve_dual(problem: Problem, opts: SolveOptions | None = None) -> SolveReport:
    """Solve the block allocation problem by projected subgradient ascent.

    Statuses: Optimal (feasible + certified KKT residual within opts.tol),
    Infeasible (bits requirements provably or persistently unmeetable),
    MaxIterations otherwise. `iterations` counts dual ascent steps.
    """
    opts = opts or SolveOptions()
    sc = problem.scenario
    n = sc.n_eus
    T = sc.block_length
    pre = _prepare(problem)

    if _screen_infeasible(problem, pre):
        return _report(SolveStatus.INFEASIBLE, None, None, math.inf, 0, problem)

    theta = np.zeros(n)
    mu = _init_mu(problem, pre)
    mu_scale = pre.omega / pre.e_scale

    best_alloc: Allocation | None = None
    best_duals: DualState | None = None
    best_res = math.inf
    best_feas = False
    l_hat = -math.inf  # best feasible primal value (Polyak target)

    milestone = min(_FIRST_MILESTONE, opts.max_iters)
    acc_start = max(1, math.ceil(0.75 * milestone))
    acc = [np.zeros(n) for _ in range(5)]
    acc_count = 0
    stall = 0
    prev_theta_sum = 0.0
    prev_short = math.inf
    iters_done = 0
    ms_index = 0
    # a Polyak step aimed at an underestimated target makes the iterates
    # orbit instead of converge; damping on stagnant milestones shrinks the
    # orbit until the averaged primal comes within the polisher's reach
    step_scale = 1.0
    best_ms_res = math.inf

    for i in range(1, opts.max_iters + 1):
        iters_done = i
        alpha, t_b, t_a, p, f, q, g_theta, g_mu, t0_seed = _inner_step(
            theta, mu, problem, pre
        )

        if i >= acc_start:
            for arr, inc in zip(acc, (t_b, alpha * t_b, t_a, p * t_a, f)):
                arr += inc
            acc_count += 1

        gnorm2 = float(g_theta @ g_theta + g_mu @ g_mu)
        step = _STEP0 / (_STEP_OFFSET + i)
        if l_hat > -math.inf and gnorm2 > 1e-16:
            gap = max(q - l_hat, 0.0) / pre.omega
            step = min(gap / gnorm2, _POLYAK_CAP)
            if step == 0.0:
                step = _STEP0 / (_STEP_OFFSET + i)
        step *= step_scale
        theta = np.maximum(theta + step * g_theta * pre.theta_scale, 0.0)
        mu_new = mu + step * g_mu * mu_scale
        mu = np.maximum(np.clip(mu_new, mu / 5.0, mu * 5.0), _MU_FLOOR)

        if i < milestone:
            continue

        # milestone: recover a primal from the averaged vertices and from the
        # recipe LP, certify the more promising one
        ms_index += 1
        avg = [arr / max(acc_count, 1) for arr in acc]
        cand_duals = DualState(
            bits=theta.copy(),
            energy=mu.copy(),
            freq_cap=np.zeros(n),
            time=t0_seed,
            reflect_cap=np.zeros(n),
        )
        cands = [
            (
                snap_to_boundary(
                    Allocation(
                        t_b=avg[0], x=avg[1], t_a=avg[2], P=avg[3], f=avg[4],
                        tau=np.full(n, T),
                    ),
                    problem,
                ),
                cand_duals,
            )
        ]
        lp_best = _recipe_iterate(cand_duals, problem, pre)
        if lp_best is not None:
            cands.append((lp_best[0], lp_best[1]))
            # the subgradient duals are a steadier polish seed than raw LP
            # marginals when the restored support is still off
            cands.append((lp_best[0], cand_duals))
        quicks = [kkt_residual(c, d, problem) for c, d in cands]
        feass = [is_feasible(c, sc) for c, _ in cands]
        for (cand, cd), qk, fe in zip(cands, quicks, feass):
            if fe:
                l_hat = max(l_hat, objective(cand, sc))
            if qk < best_res and (fe or not best_feas):
                best_alloc, best_duals, best_res, best_feas = (
                    cand, cd, qk, fe,
                )
            if qk <= opts.tol and fe:
                return _report(
                    SolveStatus.OPTIMAL, cand, cd, qk, i, problem
                )
        order = sorted(range(len(cands)), key=lambda j: (not feass[j], quicks[j]))
        restored, quick, feas = (
            cands[order[0]][0], quicks[order[0]], feass[order[0]],
        )
        ms_res = quick
        for j in order:
            refined = polish(cands[j][0], cands[j][1], problem)
            snapped = snap_to_boundary(refined.allocation, problem)
            res2 = kkt_residual(snapped, refined.duals, problem)
            feas2 = is_feasible(snapped, sc)
            log.debug(
                "milestone %d: quick %.3e feas=%s, polished %.3e feas=%s "
                "(%d passes, converged=%s)",
                i, quicks[j], feass[j], res2, feas2,
                refined.passes, refined.converged,
            )
            if feas2:
                l_hat = max(l_hat, objective(snapped, sc))
            if res2 < best_res and (feas2 or not best_feas):
                best_alloc, best_duals, best_res, best_feas = (
                    snapped, refined.duals, res2, feas2,
                )
            if res2 <= opts.tol and feas2:
                return _report(
                    SolveStatus.OPTIMAL, snapped, refined.duals, res2, i,
                    problem,
                )
            ms_res = min(ms_res, res2)
        ms_res = min(ms_res, quick)
        if ms_res > 0.75 * best_ms_res:
            step_scale = max(step_scale * _DAMP_FACTOR, _DAMP_FLOOR)
            log.debug("milestone %d stagnant; step scale now %.4g", i, step_scale)
        best_ms_res = min(best_ms_res, ms_res)

        # infeasibility heuristic: multipliers keep climbing yet the recovered
        # primal stays short on bits and no feasible point has ever been seen
        short = float(
            np.max(
                residuals(restored, sc).bits_shortfall
                / np.maximum(pre.l_min, 1.0)
            )
        )
        theta_sum = float(theta.sum())
        if (
            not feas
            and short > 1e-3
            and theta_sum > prev_theta_sum * (1.0 + 1e-9)
            and short > 0.98 * prev_short
        ):
            stall += 1
        else:
            stall = 0
        prev_theta_sum = theta_sum
        prev_short = min(prev_short, short)
        if stall >= _STALL_LIMIT and l_hat == -math.inf and i >= 1024:
            log.info(
                "declaring infeasible after %d iterations: shortfall %.3e "
                "with growing bit prices", i, short,
            )
            return _report(
                SolveStatus.INFEASIBLE, None, None, math.inf, i, problem
            )

        if milestone >= opts.max_iters:
            break
        milestone = min(milestone * 2, opts.max_iters)
        acc_start = max(i + 1, math.ceil(0.75 * milestone))
        for arr in acc:
            arr[:] = 0.0
        acc_count = 0

    status = (
        SolveStatus.OPTIMAL
        if best_feas and best_res <= opts.tol
        else SolveStatus.MAX_ITERATIONS
    )
    if status is not SolveStatus.OPTIMAL:
        log.warning(
            "dual solve uncertified after %d iterations: residual %.3e",
            iters_done, best_res,
        )
    return _report(status, best_alloc, best_duals, best_res, iters_done, problem)
