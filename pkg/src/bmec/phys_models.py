"""Physical-layer building blocks: harvesting, throughput, local compute.

The throughput and harvest functions are the perspective (jointly concave)
forms used by the convex program: every rate/energy is expressed per block as
t * fn(ratio / t), extended by continuity to 0 at t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import EhParams, Scenario

__all__ = [
    "EnergyBudget",
    "harvested_power",
    "idle_harvest_power",
    "backcom_harvest_energy",
    "total_harvest",
    "backcom_bits",
    "at_bits",
    "local_bits",
    "local_energy",
]

# Values this far below zero (absolute, after scaling by the natural term
# magnitude) are treated as float noise and clipped; anything worse is a bug.
_NEG_NOISE = 1e-12


def _clip_noise(value: float, scale: float, what: str) -> float:
    if value >= 0.0:
        return value
    if value >= -_NEG_NOISE * max(1.0, scale):
        return 0.0
    raise ValueError(f"{what} is negative beyond noise tolerance: {value!r}")


def harvested_power(p_in: float, eh: EhParams) -> float:
    """DC power captured by the non-linear harvester for RF input `p_in` (W).

    (c*p + d)/(p + v) - d/v: zero at zero input, concave increasing,
    saturating at c - d/v.
    """
    if p_in < 0:
        raise ValueError("harvester input power must be >= 0")
    value = (eh.c * p_in + eh.d) / (p_in + eh.v) - eh.d / eh.v
    return _clip_noise(value, eh.d / eh.v, "harvested power")


def idle_harvest_power(scenario: Scenario, k: int) -> float:
    """Harvest rate of EU k while another EU's backscatter slot runs (full
    PB signal incident, nothing reflected)."""
    eu = scenario.eus[k]
    return harvested_power(scenario.pb_power * eu.g, eu.eh)


def backcom_harvest_energy(
    x: float, t_b: float, pb_power: float, g: float, eh: EhParams
) -> float:
    """Energy harvested during the EU's own backscatter slot.

    `x` is reflected time-share mass (alpha * t_b); the harvester sees the
    unreflected remainder. Perspective form: t_b * F((1 - x/t_b) * P * g),
    defined as 0 at t_b = 0.
    """
    if t_b < 0:
        raise ValueError("t_b must be >= 0")
    if t_b == 0.0:
        return 0.0
    x = _clip_noise(x, t_b, "reflected mass x")
    if x > t_b * (1.0 + _NEG_NOISE):
        raise ValueError("x must not exceed t_b")
    share = min(x / t_b, 1.0)
    return t_b * harvested_power((1.0 - share) * pb_power * g, eh)


@dataclass(frozen=True)
class EnergyBudget:
    """Per-EU harvested energy split by origin (joules)."""

    own_slot: float  # during the EU's backscatter slot
    idle: float  # during the other EUs' slots

    @property
    def total(self) -> float:
        return self.own_slot + self.idle


def total_harvest(
    x: float, t_b_all: np.ndarray | list[float], k: int, scenario: Scenario
) -> EnergyBudget:
    """Energy available to EU k given every EU's backscatter time.

    During its own slot t_b_all[k] the EU harvests from the unreflected
    fraction; during the other EUs' slots it harvests the full PB signal.
    """
    eu = scenario.eus[k]
    t_b_all = np.asarray(t_b_all, dtype=float)
    own = backcom_harvest_energy(x, float(t_b_all[k]), scenario.pb_power, eu.g, eu.eh)
    idle_time = float(t_b_all.sum() - t_b_all[k])
    idle = idle_harvest_power(scenario, k) * _clip_noise(idle_time, 1.0, "idle time")
    return EnergyBudget(own_slot=own, idle=idle)


def backcom_bits(x: float, t_b: float, scenario: Scenario, k: int) -> float:
    """Bits offloaded by backscattering during slot t_b with reflected mass x.

    t_b * B * log2(1 + xi * x * P * g * h / (t_b * B * sigma2)); 0 at t_b = 0.
    """
    if t_b < 0:
        raise ValueError("t_b must be >= 0")
    if t_b == 0.0:
        return 0.0
    x = _clip_noise(x, t_b, "reflected mass x")
    if x > t_b * (1.0 + _NEG_NOISE):
        raise ValueError("x must not exceed t_b")
    eu = scenario.eus[k]
    noise = scenario.bandwidth * scenario.noise_density
    snr = scenario.backcom_gap * scenario.pb_power * eu.g * eu.h * x / (t_b * noise)
    return t_b * scenario.bandwidth * math.log2(1.0 + snr)


def at_bits(P: float, t_a: float, scenario: Scenario, k: int) -> float:
    """Bits offloaded by active transmission with energy mass P over t_a.

    t_a * B * log2(1 + P * h / (t_a * B * sigma2)); 0 at t_a = 0.
    """
    if t_a < 0:
        raise ValueError("t_a must be >= 0")
    if t_a == 0.0:
        return 0.0
    P = _clip_noise(P, 1.0, "transmit energy P")
    eu = scenario.eus[k]
    noise = scenario.bandwidth * scenario.noise_density
    return t_a * scenario.bandwidth * math.log2(1.0 + P * eu.h / (t_a * noise))


def local_bits(f: float, tau: float, cycles_per_bit: float) -> float:
    """Bits computed locally at frequency f over execution time tau."""
    if f < 0 or tau < 0:
        raise ValueError("f and tau must be >= 0")
    return f * tau / cycles_per_bit


def local_energy(f: float, tau: float, capacitance: float) -> float:
    """Dynamic CPU energy: capacitance * f^3 * tau."""
    if f < 0 or tau < 0:
        raise ValueError("f and tau must be >= 0")
    return capacitance * f**3 * tau
