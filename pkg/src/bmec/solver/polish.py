"""Active-set Newton refinement of a near-optimal primal-dual pair.

Both solvers produce points that are close to optimal but carry enough noise
(subgradient chatter on one side, interior-point dust on the other) to miss a
tight first-order certificate. This module identifies the active set at the
incoming point, solves the resulting square system of KKT equalities with a
generic damped Newton method (scipy.optimize.root), and repairs the active
set when a multiplier comes out negative, a variable leaves its bound, or a
dropped variable turns out to price positive.

Only the Lagrangian derivative functions are used; the per-variable
closed-form optimizers are not, so the refinement is shared by both solvers
without making the reference depend on the formulas it is meant to check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .. import phys_models as phys
from ..problem import Allocation, Problem, objective, residuals
from ..scenario import Scenario
from .certificates import kkt_residual
from .closed_forms import DualState, dL_df, dL_dP, dL_dta, dL_dtb, dL_dx

__all__ = [
    "polish",
    "PolishResult",
    "identify_active_set",
    "ActiveSet",
    "snap_to_boundary",
]

log = logging.getLogger(__name__)

_T_POS = 1e-4  # fraction of T below which a phase time counts as zero
_EDGE = 1e-7  # closeness of alpha to its {0, 1} edges
_NEWTON_TOL = 1e-11  # scaled equation norm accepted as converged
_REPAIR_TOL = 1e-9  # scaled violation that triggers an active-set change
_CERT_TOL = 1e-8  # certificate below which no alternative set is tried


@dataclass
class ActiveSet:
    """Which variables are basic and which constraints are equalities."""

    tb_pos: set[int] = field(default_factory=set)
    ta_pos: set[int] = field(default_factory=set)
    x_state: dict[int, str] = field(default_factory=dict)  # "off"|"int"|"cap"
    f_state: dict[int, str] = field(default_factory=dict)  # "off"|"int"|"cap"
    p_pos: set[int] = field(default_factory=set)
    bits_act: set[int] = field(default_factory=set)
    energy_act: set[int] = field(default_factory=set)
    time_act: bool = False

    def signature(self) -> tuple:
        return (
            tuple(sorted(self.tb_pos)),
            tuple(sorted(self.ta_pos)),
            tuple(sorted(self.x_state.items())),
            tuple(sorted(self.f_state.items())),
            tuple(sorted(self.p_pos)),
            tuple(sorted(self.bits_act)),
            tuple(sorted(self.energy_act)),
            self.time_act,
        )


@dataclass(frozen=True)
class PolishResult:
    allocation: Allocation
    duals: DualState
    kkt_residual: float
    converged: bool
    passes: int


def snap_to_boundary(alloc: Allocation, problem: Problem) -> Allocation:
    """Project a near-optimal iterate onto the constraint boundary.

    Clips negatives, enforces x <= t_b and the time budget, then burns each
    EU's residual energy slack in its free consumption variable so the energy
    constraint holds with equality wherever a sink exists. Both solvers use
    this to turn their raw iterates into exactly feasible allocations.
    """
    sc = problem.scenario
    T = sc.block_length
    t_b = np.maximum(alloc.t_b, 0.0)
    x = np.minimum(np.maximum(alloc.x, 0.0), t_b)
    t_a = np.maximum(alloc.t_a, 0.0)
    P = np.maximum(alloc.P, 0.0)
    f = np.maximum(alloc.f, 0.0)
    snap = 1e-13 * T
    for arr in (t_b, t_a):
        arr[arr < snap] = 0.0
    x = np.minimum(x, t_b)
    t_a_zero = t_a == 0.0
    P[t_a_zero] = 0.0

    total = t_b.sum() + t_a.sum()
    if total > T:
        scale = T / total
        t_b *= scale
        x *= scale
        t_a *= scale
        P *= scale

    if problem.pin_x:
        x[:] = 0.0
    if problem.pin_at:
        t_a[:] = 0.0
        P[:] = 0.0
    if problem.pin_f:
        f[:] = 0.0

    for k, eu in enumerate(sc.eus):
        harvest = phys.total_harvest(float(x[k]), t_b, k, sc).total
        fixed = eu.backcom_circuit_power * t_b[k] + eu.at_circuit_power * t_a[k]
        if not problem.pin_f:
            budget = harvest - fixed - P[k]
            if budget <= 0.0:
                f[k] = 0.0
            else:
                f[k] = min(eu.f_max, (budget / (eu.capacitance * T)) ** (1.0 / 3.0))
        elif t_a[k] > 0.0:
            P[k] = max(harvest - fixed, 0.0)
    if not problem.pin_f:
        # a positive-budget EU must also shed any overdraft created by clipping
        for k, eu in enumerate(sc.eus):
            harvest = phys.total_harvest(float(x[k]), t_b, k, sc).total
            fixed = eu.backcom_circuit_power * t_b[k] + eu.at_circuit_power * t_a[k]
            overdraft = fixed + P[k] + eu.capacitance * T * f[k] ** 3 - harvest
            if overdraft > 0.0 and P[k] > 0.0:
                P[k] = max(P[k] - overdraft, 0.0)

    return Allocation(t_b=t_b, x=x, t_a=t_a, P=P, f=f, tau=np.full(sc.n_eus, T))


def identify_active_set(
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    bits_override: set[int] | None = None,
) -> ActiveSet:
    sc = problem.scenario
    T = sc.block_length
    n = sc.n_eus
    act = ActiveSet()
    act.x_state = {k: "off" for k in range(n)}
    act.f_state = {k: "off" for k in range(n)}
    res = residuals(alloc, sc)
    obj_scale = max(
        1.0,
        abs(objective(alloc, sc)),
        max(eu.weight for eu in sc.eus) * sc.bandwidth * T,
    )

    for k, eu in enumerate(sc.eus):
        harvest = phys.total_harvest(float(alloc.x[k]), alloc.t_b, k, sc).total
        consume = harvest + res.energy_deficit[k]
        scale = max(harvest, consume, 1e-6)
        if not problem.pin_at and alloc.t_a[k] > _T_POS * T:
            # keep the slot basic even when a feasibility snap shed its
            # transmit energy; at near-optimal duals its net price is zero,
            # so no profitability probe would ever re-add it
            act.ta_pos.add(k)
            act.p_pos.add(k)
        if alloc.t_b[k] > _T_POS * T:
            act.tb_pos.add(k)
            if not problem.pin_x:
                ratio = float(alloc.x[k] / alloc.t_b[k])
                if ratio >= 1.0 - _EDGE:
                    act.x_state[k] = "cap"
                elif ratio > _EDGE:
                    act.x_state[k] = "int"
        if not problem.pin_f:
            if alloc.f[k] >= eu.f_max * (1.0 - 1e-9):
                act.f_state[k] = "cap"
            elif alloc.f[k] > 1e-6 * eu.f_max:
                act.f_state[k] = "int"
        # a clearly positive incoming multiplier marks the constraint active
        # even when the primal residual sits just outside the window
        if harvest + consume > 0.0 and (
            res.energy_deficit[k] >= -1e-7 * scale
            or duals.energy[k] * scale / obj_scale > 1e-4
        ):
            act.energy_act.add(k)
        if eu.l_min > 0.0 and (
            res.bits_shortfall[k] >= -1e-6 * max(eu.l_min, 1.0)
            or (
                # multiplier hint: only when the primal is near-binding too,
                # else subgradient dust would force a spurious equality
                duals.bits[k] > 1e-4 * max(1.0, eu.weight)
                and res.bits_shortfall[k] >= -1e-2 * max(eu.l_min, 1.0)
            )
        ):
            act.bits_act.add(k)

    total = float(alloc.t_b.sum() + alloc.t_a.sum())
    act.time_act = total > 0.0 and (
        res.time_excess >= -1e-7 * T or duals.time * T / obj_scale > 1e-4
    )
    if bits_override is not None:
        act.bits_act = {k for k in bits_override if sc.eus[k].l_min > 0.0}
    return act


def _scales(alloc: Allocation, problem: Problem) -> tuple[float, np.ndarray]:
    """Objective and per-EU energy scales used to normalize the equations."""
    sc = problem.scenario
    obj_scale = max(
        1.0,
        abs(objective(alloc, sc)),
        max(eu.weight for eu in sc.eus) * sc.bandwidth * sc.block_length,
    )
    e_scale = np.empty(sc.n_eus)
    for k in range(sc.n_eus):
        harvest = phys.total_harvest(float(alloc.x[k]), alloc.t_b, k, sc).total
        e_scale[k] = max(harvest, 1e-6)
    return obj_scale, e_scale


def _bits_movable(act: ActiveSet, k: int) -> bool:
    """Whether any active variable can change EU k's bit count."""
    backcom = k in act.tb_pos and act.x_state[k] != "off"
    return backcom or k in act.ta_pos or act.f_state[k] != "off"


def _prune_unmatched(act: ActiveSet) -> None:
    """Drop bits equalities no active variable could satisfy; keeping them
    would make the Newton system singular and poison the whole pass."""
    for k in sorted(act.bits_act):
        if not _bits_movable(act, k):
            log.debug("EU %d bits row has no movable variable; dropping", k)
            act.bits_act.discard(k)


def _deriv_root(g, hi: float) -> float:
    """Positive root of a decreasing derivative on (0, hi], or hi if it stays
    positive. Seeds a freed variable at its own stationarity point so the
    first Newton trial starts with that row near zero."""
    if hi <= 0.0 or g(hi) >= 0.0:
        return hi
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _with_theta(duals: DualState, k: int, value: float) -> DualState:
    bits = duals.bits.copy()
    bits[k] = value
    return DualState(
        bits=bits, energy=duals.energy, freq_cap=duals.freq_cap,
        time=duals.time, reflect_cap=duals.reflect_cap,
    )


def _match_theta(price, t0: float, weight: float) -> float | None:
    """Smallest multiplier at which a slot's probe price reaches t0, found by
    doubling then bisection; None when no finite subsidy gets it there."""
    if price(0.0) >= t0:
        return 0.0
    hi = max(1.0, weight)
    for _ in range(40):
        if price(hi) >= t0:
            break
        hi *= 2.0
    else:
        return None
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if price(mid) >= t0:
            hi = mid
        else:
            lo = mid
    return hi


def _subsidize_unserved(
    act: ActiveSet, duals: DualState, problem: Problem
) -> DualState:
    """Give every active bit-floor row a serving slot in the basis.

    An ascent can reach a point where a floor is violated yet its multiplier
    is still zero, so no slot for that EU prices as profitable and the square
    system has no root. At a true root every used slot prices exactly at the
    time price, so the natural repair is to seed the row's multiplier at the
    break-even level of its cheapest slot type and make that slot basic."""
    sc = problem.scenario
    out = duals
    t0 = max(duals.time, 0.0)
    for k in sorted(act.bits_act):
        if k in act.tb_pos or k in act.ta_pos:
            continue
        eu = sc.eus[k]
        best: tuple[float, str] | None = None
        if not problem.pin_at:
            th = _match_theta(
                lambda v: _price_probe_at(_with_theta(out, k, v), k, sc),
                t0, eu.weight,
            )
            if th is not None:
                best = (th, "ta")
        th = _match_theta(
            lambda v: _price_probe_backcom(
                _with_theta(out, k, v), k, sc, not problem.pin_x
            ),
            t0, eu.weight,
        )
        if th is not None and (best is None or th < best[0]):
            best = (th, "tb")
        if best is None:
            continue
        log.debug("EU %d floor unserved; opening %s at theta %.3g", k, best[1], best[0])
        out = _with_theta(out, k, max(float(out.bits[k]), best[0]))
        if best[1] == "ta":
            act.ta_pos.add(k)
            act.p_pos.add(k)
        else:
            act.tb_pos.add(k)
            if not problem.pin_x:
                act.x_state[k] = "int"
    return out


def _align_warm(
    act: ActiveSet,
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    e_scale: np.ndarray,
) -> Allocation:
    """Start every basic variable on its own stationarity branch given the
    incoming duals. Ergodic averages and feasibility snaps leave variables at
    arbitrary values; a square Newton started there can land on a spurious
    root that satisfies every equality yet misprices a slot."""
    sc = problem.scenario
    T = sc.block_length
    t_b, x = alloc.t_b.copy(), alloc.x.copy()
    t_a, P, f = alloc.t_a.copy(), alloc.P.copy(), alloc.f.copy()
    for k in range(sc.n_eus):
        if k in act.tb_pos and t_b[k] <= 0.0:
            t_b[k] = 1e-3 * T
        if k in act.ta_pos and t_a[k] <= 0.0:
            t_a[k] = 1e-3 * T
        state = act.x_state.get(k)
        if state == "int":
            tb_k = float(t_b[k])
            x[k] = _deriv_root(lambda v: dL_dx(duals, v, tb_k, k, sc), tb_k)
        elif state == "cap":
            x[k] = t_b[k]
        if k in act.p_pos:
            ta_k = max(float(t_a[k]), 1e-3 * T)
            P[k] = _deriv_root(
                lambda v: dL_dP(duals, v, ta_k, k, sc), 100.0 * float(e_scale[k])
            )
        if act.f_state[k] == "int":
            f[k] = _deriv_root(
                lambda v: dL_df(duals, v, k, sc), sc.eus[k].f_max
            )
    return Allocation(t_b=t_b, x=x, t_a=t_a, P=P, f=f, tau=alloc.tau)


class _System:
    """Square KKT equality system for a fixed active set."""

    def __init__(self, act: ActiveSet, alloc: Allocation, duals: DualState,
                 problem: Problem):
        self.act = act
        self.problem = problem
        sc = problem.scenario
        self.sc = sc
        n = sc.n_eus
        T = sc.block_length
        self.obj_scale, self.e_scale = _scales(alloc, problem)

        # unknown layout: (kind, eu index, scale); fixed order for determinism
        self.layout: list[tuple[str, int, float]] = []
        fmax = [eu.f_max for eu in sc.eus]
        for k in range(n):
            if k in act.tb_pos:
                self.layout.append(("tb", k, T))
                if act.x_state[k] != "off":
                    self.layout.append(("x", k, T))
            if k in act.ta_pos:
                self.layout.append(("ta", k, T))
            if k in act.p_pos:
                self.layout.append(("P", k, max(float(alloc.P[k]), 1e-3 * self.e_scale[k])))
            if act.f_state[k] == "int":
                self.layout.append(("f", k, max(float(alloc.f[k]), 1e-3 * fmax[k])))
        for k in range(n):
            if k in act.bits_act:
                self.layout.append(("theta", k, max(float(duals.bits[k]), 0.1)))
            if k in act.energy_act:
                self.layout.append(
                    ("mu", k, max(float(duals.energy[k]), 1e-2 * self.obj_scale / self.e_scale[k]))
                )
            if act.f_state[k] == "cap":
                self.layout.append(
                    ("phi", k, max(float(duals.freq_cap[k]), 1e-2 * self.obj_scale / fmax[k]))
                )
            if act.x_state.get(k) == "cap":
                self.layout.append(
                    ("vth", k, max(float(duals.reflect_cap[k]), 1e-2 * self.obj_scale / T))
                )
        if act.time_act:
            self.layout.append(("t0", -1, max(float(duals.time), 1e-2 * self.obj_scale / T)))

        self.base_alloc = alloc
        self.base_duals = duals

    def pack(self, alloc: Allocation, duals: DualState) -> np.ndarray:
        dual_map = {
            "theta": duals.bits, "mu": duals.energy, "phi": duals.freq_cap,
            "vth": duals.reflect_cap,
        }
        prim_map = {"tb": alloc.t_b, "x": alloc.x, "ta": alloc.t_a, "P": alloc.P,
                    "f": alloc.f}
        z = np.empty(len(self.layout))
        for i, (kind, k, s) in enumerate(self.layout):
            if kind == "t0":
                z[i] = duals.time / s
            elif kind in dual_map:
                z[i] = dual_map[kind][k] / s
            else:
                z[i] = prim_map[kind][k] / s
        return z

    def unpack(self, z: np.ndarray) -> tuple[Allocation, DualState]:
        sc = self.sc
        n = sc.n_eus
        act = self.act
        t_b = np.zeros(n)
        x = np.zeros(n)
        t_a = np.zeros(n)
        P = np.zeros(n)
        f = np.zeros(n)
        theta = np.zeros(n)
        mu = np.zeros(n)
        phi = np.zeros(n)
        vth = np.zeros(n)
        t0 = 0.0
        for k in range(n):
            if act.f_state[k] == "cap":
                f[k] = sc.eus[k].f_max
        for val, (kind, k, s) in zip(z, self.layout):
            v = val * s
            if kind == "tb":
                t_b[k] = v
            elif kind == "x":
                x[k] = v
            elif kind == "ta":
                t_a[k] = v
            elif kind == "P":
                P[k] = v
            elif kind == "f":
                f[k] = v
            elif kind == "theta":
                theta[k] = v
            elif kind == "mu":
                mu[k] = v
            elif kind == "phi":
                phi[k] = v
            elif kind == "vth":
                vth[k] = v
            elif kind == "t0":
                t0 = v
        for k in range(n):
            if act.x_state.get(k) == "cap" and k in act.tb_pos and x[k] == 0.0:
                x[k] = t_b[k]
        alloc = Allocation(
            t_b=t_b, x=x, t_a=t_a, P=P, f=f,
            tau=np.full(n, sc.block_length),
        )
        duals = DualState(bits=theta, energy=mu, freq_cap=phi, time=t0,
                          reflect_cap=vth)
        return alloc, duals

    def equations(self, z: np.ndarray) -> np.ndarray:
        try:
            out = self._equations_inner(z)
        except (ValueError, ZeroDivisionError, OverflowError):
            # a wild Newton trial left the functions' domain; push it back
            return np.full(len(self.layout), 1e6)
        return np.where(np.isfinite(out), out, 1e6)

    def _equations_inner(self, z: np.ndarray) -> np.ndarray:
        sc = self.sc
        T = sc.block_length
        alloc, duals = self.unpack(z)
        # keep evaluation off the singular axes during wild Newton trials
        t_b = np.maximum(alloc.t_b, 1e-9 * T)
        t_a = np.maximum(alloc.t_a, 1e-9 * T)
        safe = Allocation(
            t_b=np.maximum(alloc.t_b, 0.0),
            x=np.minimum(np.maximum(alloc.x, 0.0), np.maximum(alloc.t_b, 0.0)),
            t_a=np.maximum(alloc.t_a, 0.0),
            P=np.maximum(alloc.P, 0.0),
            f=np.maximum(alloc.f, 0.0),
            tau=alloc.tau,
        )
        eqs = []
        for kind, k, _ in self.layout:
            if kind == "tb":
                eqs.append(
                    dL_dtb(duals, float(alloc.x[k]), float(t_b[k]), k, sc) * T
                    / self.obj_scale
                )
            elif kind == "x":
                eqs.append(
                    dL_dx(duals, float(alloc.x[k]), float(t_b[k]), k, sc) * T
                    / self.obj_scale
                )
            elif kind == "ta":
                eqs.append(
                    dL_dta(duals, float(alloc.P[k]), float(t_a[k]), k, sc) * T
                    / self.obj_scale
                )
            elif kind == "P":
                eqs.append(
                    dL_dP(duals, float(alloc.P[k]), float(t_a[k]), k, sc)
                    * self.e_scale[k] / self.obj_scale
                )
            elif kind in ("f", "phi"):
                eqs.append(
                    dL_df(duals, float(alloc.f[k]), k, sc)
                    * sc.eus[k].f_max / self.obj_scale
                )
            elif kind == "theta":
                res = self._bits(safe, k) - sc.eus[k].l_min
                eqs.append(res / self.obj_scale)
            elif kind == "mu":
                eqs.append(self._energy_gap(safe, k) / self.e_scale[k])
            elif kind == "vth":
                eqs.append((alloc.x[k] - alloc.t_b[k]) / T)
            elif kind == "t0":
                eqs.append((alloc.t_b.sum() + alloc.t_a.sum() - T) / T)
        return np.asarray(eqs)

    def _bits(self, alloc: Allocation, k: int) -> float:
        sc = self.sc
        return (
            phys.backcom_bits(float(alloc.x[k]), float(alloc.t_b[k]), sc, k)
            + phys.at_bits(float(alloc.P[k]), float(alloc.t_a[k]), sc, k)
            + phys.local_bits(float(alloc.f[k]), sc.block_length, sc.cycles_per_bit)
        )

    def _energy_gap(self, alloc: Allocation, k: int) -> float:
        sc = self.sc
        eu = sc.eus[k]
        harvest = phys.total_harvest(float(alloc.x[k]), alloc.t_b, k, sc).total
        consume = (
            eu.backcom_circuit_power * float(alloc.t_b[k])
            + float(alloc.P[k])
            + eu.at_circuit_power * float(alloc.t_a[k])
            + phys.local_energy(float(alloc.f[k]), sc.block_length, eu.capacitance)
        )
        return harvest - consume


def _price_probe_backcom(
    duals: DualState, k: int, sc: Scenario, reflect_allowed: bool
) -> float:
    """Best per-second value of a new BackCom slot: the rate/harvest terms of
    the Lagrangian are jointly homogeneous in (t_b, x), so the price at ratio
    alpha equals dL/dt_b + alpha dL/dx evaluated at t_b = 1."""
    grid = np.linspace(0.0, 1.0, 41) if reflect_allowed else np.zeros(1)
    best = -math.inf
    for alpha in grid:
        c = dL_dtb(duals, float(alpha), 1.0, k, sc) + alpha * dL_dx(
            duals, float(alpha), 1.0, k, sc
        )
        best = max(best, c)
    return best


def _price_probe_at(duals: DualState, k: int, sc: Scenario) -> float:
    """Best per-second value of a new AT slot over a log grid of powers."""
    noise = sc.bandwidth * sc.noise_density
    eu = sc.eus[k]
    if eu.h <= 0.0:
        return -math.inf
    best = dL_dta(duals, 0.0, 1.0, k, sc)
    for snr in np.logspace(-4, 9, 53):
        p = snr * noise / eu.h
        c = dL_dta(duals, p, 1.0, k, sc) + p * dL_dP(duals, p, 1.0, k, sc)
        best = max(best, c)
    return best


def _repair(
    act: ActiveSet,
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    obj_scale: float,
    e_scale: np.ndarray,
    pin_bits: bool = False,
    at_root: bool = False,
) -> tuple[ActiveSet, Allocation, bool]:
    """Adjust the active set after a Newton solve; returns (set, warm start,
    changed). With pin_bits the bit-floor rows are left exactly as given, so
    an override variant cannot collapse back into the set it is escaping.
    at_root marks duals taken from a solved system, the only state in which
    slot prices are trustworthy enough to evict a mispriced slot."""
    sc = problem.scenario
    T = sc.block_length
    n = sc.n_eus
    changed = False
    # residuals only accepts physical points; a wild Newton candidate may not be
    safe, _ = _sanitize(alloc, duals, problem)
    res = residuals(safe, sc)
    t_b = alloc.t_b.copy()
    x = alloc.x.copy()
    t_a = alloc.t_a.copy()
    P = alloc.P.copy()
    f = alloc.f.copy()

    def drop_tb(k: int) -> None:
        act.tb_pos.discard(k)
        act.x_state[k] = "off"
        t_b[k] = 0.0
        x[k] = 0.0

    def drop_ta(k: int) -> None:
        act.ta_pos.discard(k)
        act.p_pos.discard(k)
        t_a[k] = 0.0
        P[k] = 0.0

    for k, eu in enumerate(sc.eus):
        if k in act.tb_pos and t_b[k] < -_REPAIR_TOL * T:
            drop_tb(k)
            changed = True
        if k in act.ta_pos and (t_a[k] < -_REPAIR_TOL * T or P[k] < -_REPAIR_TOL * e_scale[k]):
            drop_ta(k)
            changed = True
        if act.x_state.get(k) == "int":
            if x[k] < -_REPAIR_TOL * T:
                act.x_state[k] = "off"
                x[k] = 0.0
                changed = True
            elif x[k] > t_b[k] * (1.0 + _REPAIR_TOL):
                act.x_state[k] = "cap"
                x[k] = t_b[k]
                changed = True
        if act.f_state[k] == "int":
            if f[k] < -_REPAIR_TOL * eu.f_max:
                act.f_state[k] = "off"
                f[k] = 0.0
                changed = True
            elif f[k] > eu.f_max * (1.0 + _REPAIR_TOL):
                act.f_state[k] = "cap"
                f[k] = eu.f_max
                changed = True
        # negative multipliers: the constraint is not active after all
        if not pin_bits and k in act.bits_act and duals.bits[k] < -_REPAIR_TOL:
            act.bits_act.discard(k)
            changed = True
        if k in act.energy_act and duals.energy[k] < -_REPAIR_TOL * obj_scale / e_scale[k]:
            act.energy_act.discard(k)
            changed = True
        if act.f_state[k] == "cap" and duals.freq_cap[k] < -_REPAIR_TOL * obj_scale / eu.f_max:
            act.f_state[k] = "int"
            changed = True
        if act.x_state.get(k) == "cap" and duals.reflect_cap[k] < -_REPAIR_TOL * obj_scale / T:
            act.x_state[k] = "int"
            changed = True
    if act.time_act and duals.time < -_REPAIR_TOL * obj_scale / T:
        act.time_act = False
        changed = True

    if not changed and at_root and act.time_act and duals.time > 0.0:
        # a basic slot whose best-recipe price sits strictly below the time
        # price cannot be part of an optimal basis; noisy multipliers keep
        # such slots alive at dust lengths to subsidize a phantom constraint
        for k in sorted(act.tb_pos):
            c = _price_probe_backcom(duals, k, sc, not problem.pin_x)
            if (duals.time - c) * T / obj_scale > 1e-3:
                drop_tb(k)
                changed = True
        for k in sorted(act.ta_pos):
            c = _price_probe_at(duals, k, sc)
            if (duals.time - c) * T / obj_scale > 1e-3:
                drop_ta(k)
                changed = True

    if not changed:
        # violated inactive constraints / profitable dropped variables
        for k, eu in enumerate(sc.eus):
            if (
                not pin_bits
                and k not in act.bits_act
                and eu.l_min > 0.0
                and res.bits_shortfall[k] > _REPAIR_TOL * max(eu.l_min, 1.0)
            ):
                act.bits_act.add(k)
                changed = True
            if k not in act.energy_act and res.energy_deficit[k] > _REPAIR_TOL * e_scale[k]:
                act.energy_act.add(k)
                changed = True
            if k in act.tb_pos and act.x_state[k] == "off" and not problem.pin_x:
                tb_k = float(max(t_b[k], 1e-9))
                if dL_dx(duals, 0.0, tb_k, k, sc) * T / obj_scale > _REPAIR_TOL:
                    act.x_state[k] = "int"
                    x[k] = _deriv_root(lambda v: dL_dx(duals, v, tb_k, k, sc), tb_k)
                    changed = True
            if act.f_state[k] == "off" and not problem.pin_f:
                if dL_df(duals, 0.0, k, sc) * eu.f_max / obj_scale > _REPAIR_TOL:
                    act.f_state[k] = "int"
                    f[k] = _deriv_root(lambda v: dL_df(duals, v, k, sc), eu.f_max)
                    changed = True
            if k not in act.tb_pos:
                c = _price_probe_backcom(duals, k, sc, not problem.pin_x)
                if c * T / obj_scale > _REPAIR_TOL:
                    act.tb_pos.add(k)
                    if not problem.pin_x:
                        act.x_state[k] = "int"
                        t_b[k] = 1e-3 * T
                        x[k] = 0.5 * t_b[k]
                    else:
                        t_b[k] = 1e-3 * T
                    changed = True
            if k not in act.ta_pos and not problem.pin_at:
                c = _price_probe_at(duals, k, sc)
                if c * T / obj_scale > _REPAIR_TOL:
                    act.ta_pos.add(k)
                    act.p_pos.add(k)
                    t_a[k] = 1e-3 * T
                    ta_k = float(t_a[k])
                    P[k] = _deriv_root(
                        lambda v: dL_dP(duals, v, ta_k, k, sc), float(e_scale[k])
                    )
                    changed = True
        if not act.time_act:
            total = t_b.sum() + t_a.sum()
            if total - T > _REPAIR_TOL * T:
                act.time_act = True
                changed = True

    warm = Allocation(t_b=t_b, x=x, t_a=t_a, P=P, f=f,
                      tau=np.full(n, sc.block_length))
    return act, warm, changed


def _evict_worst_slot(
    act: ActiveSet,
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    obj_scale: float,
) -> bool:
    """Last-resort escape when a pass fails and no standard repair applies:
    drop the basic slot whose best-recipe price sits furthest below the time
    price. The root Newton keeps missing often exists only without that slot,
    and if the eviction is wrong a later repair pass re-adds the slot."""
    sc = problem.scenario
    T = sc.block_length
    t0 = duals.time
    if not act.time_act or t0 <= 0.0:
        return False
    worst: tuple[str, int] | None = None
    worst_gap = 1e-3
    for k in sorted(act.tb_pos):
        c = _price_probe_backcom(duals, k, sc, not problem.pin_x)
        gap = (t0 - c) * T / obj_scale
        if gap > worst_gap:
            worst, worst_gap = ("tb", k), gap
    for k in sorted(act.ta_pos):
        c = _price_probe_at(duals, k, sc)
        gap = (t0 - c) * T / obj_scale
        if gap > worst_gap:
            worst, worst_gap = ("ta", k), gap
    if worst is None:
        return False
    kind, k = worst
    log.debug("evicting mispriced %s slot of EU %d (gap %.3g)", kind, k, worst_gap)
    if kind == "tb":
        act.tb_pos.discard(k)
        act.x_state[k] = "off"
        alloc.t_b[k] = 0.0
        alloc.x[k] = 0.0
    else:
        act.ta_pos.discard(k)
        act.p_pos.discard(k)
        alloc.t_a[k] = 0.0
        alloc.P[k] = 0.0
    return True


def _sanitize(alloc: Allocation, duals: DualState, problem: Problem):
    """Clip the sub-tolerance negatives Newton leaves behind."""
    sc = problem.scenario
    t_b = np.maximum(alloc.t_b, 0.0)
    x = np.minimum(np.maximum(alloc.x, 0.0), t_b)
    t_a = np.maximum(alloc.t_a, 0.0)
    P = np.maximum(alloc.P, 0.0)
    f = np.maximum(alloc.f, 0.0)
    alloc = Allocation(t_b=t_b, x=x, t_a=t_a, P=P, f=f,
                       tau=np.full(sc.n_eus, sc.block_length))
    duals = DualState(
        bits=np.maximum(duals.bits, 0.0),
        energy=np.maximum(duals.energy, 0.0),
        freq_cap=np.maximum(duals.freq_cap, 0.0),
        time=max(duals.time, 0.0),
        reflect_cap=np.maximum(duals.reflect_cap, 0.0),
    )
    return alloc, duals


def _bits_variants(
    alloc: Allocation, duals: DualState, problem: Problem
) -> list[set[int]]:
    """Alternative bit-floor equality sets worth trying when the identified
    set fails to certify. Ascent noise can leave a floor served exactly with
    a positive multiplier even though the true optimum has it slack (or the
    reverse), so every floor row is a toggle candidate: one variant per row
    (strongest multiplier first), plus one with all of them flipped."""
    sc = problem.scenario
    clean, clean_duals = _sanitize(alloc, duals, problem)
    base = identify_active_set(clean, clean_duals, problem).bits_act
    toggles: list[tuple[float, int]] = []
    for k, eu in enumerate(sc.eus):
        if eu.l_min > 0.0:
            toggles.append((float(duals.bits[k]), k))
    toggles.sort(reverse=True)
    variants: list[set[int]] = []
    for _, k in toggles:
        variants.append(base ^ {k})
    if len(toggles) > 1:
        variants.append(base ^ {k for _, k in toggles})
    out: list[set[int]] = []
    for cand in variants:
        if cand != base and cand not in out:
            out.append(cand)
    return out[:5]


def polish(
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    max_passes: int = 12,
) -> PolishResult:
    """Refine (alloc, duals) to a first-order point of the identified active
    set, repairing the set as needed. Returns the best certified iterate seen
    (the inputs included), so a failed refinement never degrades a solution.

    Bit-floor activity is the one genuinely ambiguous identification call: a
    noisy multiplier can force a spurious equality whose square system has a
    root that misprices a slot, and the converse omission strands Newton on
    the wrong branch. Rather than trust a threshold, a failed base run is
    retried with the ambiguous rows toggled and the certificate arbitrates."""
    base = _polish_once(alloc, duals, problem, max_passes, None)
    if base.kkt_residual <= _CERT_TOL:
        return base
    best = base
    for bits in _bits_variants(alloc, duals, problem):
        log.debug("retry with bit rows %s", sorted(bits))
        cand = _polish_once(alloc, duals, problem, max_passes, bits)
        if cand.kkt_residual < best.kkt_residual:
            best = cand
        if best.kkt_residual <= _CERT_TOL:
            break
    return best


def _polish_once(
    alloc: Allocation,
    duals: DualState,
    problem: Problem,
    max_passes: int,
    bits_override: set[int] | None,
) -> PolishResult:
    best_alloc, best_duals = alloc, duals
    best_res = kkt_residual(alloc, duals, problem)
    act = identify_active_set(alloc, duals, problem, bits_override)
    pin_bits = bits_override is not None
    warm_alloc, warm_duals = _sanitize(alloc, duals, problem)
    # structural pre-repair: the incoming primal may have dropped resources
    # its own duals price as profitable (say, a bits-bound EU with no slot
    # after an aggressive feasibility snap); grow the set before any solve
    obj_scale, e_scale = _scales(warm_alloc, problem)
    act, warm_alloc, _ = _repair(
        act, warm_alloc, warm_duals, problem, obj_scale, e_scale, pin_bits
    )
    warm_duals = _subsidize_unserved(act, warm_duals, problem)
    _prune_unmatched(act)
    warm_alloc = _align_warm(act, warm_alloc, warm_duals, problem, e_scale)
    seen = {act.signature()}
    converged = False
    passes = 0
    for passes in range(1, max_passes + 1):
        # repairs can leave sub-tolerance negatives or x a hair above t_b,
        # outside the physical functions' domain; start each pass clean
        warm_alloc, warm_duals = _sanitize(warm_alloc, warm_duals, problem)
        system = _System(act, warm_alloc, warm_duals, problem)
        if not system.layout:
            converged = True
            break
        z0 = system.pack(warm_alloc, warm_duals)
        # default xtol leaves ~1e-8 equation residue, too loose for the
        # feasibility snap downstream; drive it near machine precision
        sol = scipy.optimize.root(
            system.equations, z0, method="hybr", options={"xtol": 1e-14}
        )
        norm = float(np.max(np.abs(system.equations(sol.x))))
        # hybr can stall with a stale trust region well before convergence;
        # restarting at the stalled point rebuilds the finite-difference
        # Jacobian and usually finishes the job
        for _ in range(3):
            if sol.success or norm <= _NEWTON_TOL:
                break
            nxt = scipy.optimize.root(
                system.equations, sol.x, method="hybr", options={"xtol": 1e-14}
            )
            nxt_norm = float(np.max(np.abs(system.equations(nxt.x))))
            if nxt_norm >= norm:
                break
            sol, norm = nxt, nxt_norm
        newton_ok = sol.success or norm <= _NEWTON_TOL
        if newton_ok:
            cand_alloc, cand_duals = system.unpack(sol.x)
            clean_alloc, clean_duals = _sanitize(cand_alloc, cand_duals, problem)
            res = kkt_residual(clean_alloc, clean_duals, problem)
            log.debug("pass %d: solved norm %.2e, residual %.3e", passes, norm, res)
            if res < best_res:
                best_alloc, best_duals, best_res = clean_alloc, clean_duals, res
            act, warm_alloc, changed = _repair(
                act, cand_alloc, cand_duals, problem,
                system.obj_scale, system.e_scale, pin_bits, at_root=True,
            )
            warm_duals = cand_duals
            if not changed:
                converged = True
                break
        else:
            # a failed solve leaves meaningless multipliers, but its primal
            # part still shows which variables went negative; pair it with
            # the pre-Newton duals, which are the last sane ones
            log.debug("newton pass %d failed: %s (norm %.2e)", passes, sol.message, norm)
            cand_alloc, _ = system.unpack(sol.x)
            act, warm_alloc, changed = _repair(
                act, cand_alloc, warm_duals, problem,
                system.obj_scale, system.e_scale, pin_bits,
            )
            if not changed:
                changed = _evict_worst_slot(
                    act, warm_alloc, warm_duals, problem, system.obj_scale
                )
            if not changed:
                break
        warm_duals = _subsidize_unserved(act, warm_duals, problem)
        _prune_unmatched(act)
        sig = act.signature()
        if sig in seen:
            log.debug("active-set cycle after pass %d", passes)
            break
        seen.add(sig)
    return PolishResult(
        allocation=best_alloc,
        duals=best_duals,
        kkt_residual=best_res,
        converged=converged,
        passes=passes,
    )
