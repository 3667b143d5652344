"""Network scenario description: system constants, per-device profiles, channels.

All quantities are SI: seconds, hertz, watts, joules, bits. Conversions from
dB-style config fields happen exactly once, at parse time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "EhParams",
    "EuProfile",
    "Scenario",
    "ChannelGeometry",
    "dbm_to_watts",
    "db_to_linear",
    "default_eh_params",
    "default_scenario",
    "default_geometry",
    "realize_channels",
    "with_channels",
    "validate",
    "scenario_from_mapping",
    "ConfigError",
]

FADING_LAWS = ("rayleigh", "unit")


def dbm_to_watts(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


@dataclass(frozen=True)
class EhParams:
    """Non-linear harvester curve parameters (c, d, v).

    Harvested power for input p is (c*p + d)/(p + v) - d/v, which is 0 at
    p = 0 and saturates at c - d/v. Valid iff v > 0 and c*v - d >= 0.
    """

    c: float = 2.463
    d: float = 1.635
    v: float = 0.826

    @property
    def saturation(self) -> float:
        return self.c - self.d / self.v


@dataclass(frozen=True)
class EuProfile:
    """One edge user: channels, harvester, circuit powers, compute limits."""

    g: float  # PB -> EU power gain
    h: float  # EU -> MEC power gain
    eh: EhParams = field(default_factory=EhParams)
    weight: float = 1.0
    backcom_circuit_power: float = 1e-4  # W, drawn while its backscatter slot runs
    at_circuit_power: float = 1e-3  # W, drawn while actively transmitting
    capacitance: float = 1e-26  # effective switched capacitance coefficient
    f_max: float = 5e8  # Hz
    l_min: float = 2e4  # bits


@dataclass(frozen=True)
class Scenario:
    """Immutable problem instance for one transmission block."""

    eus: tuple[EuProfile, ...]
    block_length: float = 1.0  # s
    bandwidth: float = 1e5  # Hz
    noise_density: float = 1e-15  # W/Hz (-120 dBm/Hz)
    pb_power: float = 3.0  # W
    backcom_gap: float = 10.0 ** (-1.5)  # performance gap of backscatter detection
    cycles_per_bit: float = 1000.0

    @property
    def n_eus(self) -> int:
        return len(self.eus)


@dataclass(frozen=True)
class ChannelGeometry:
    """Distance-based channel description; gains follow d^(-beta) with fading."""

    d0: float  # PB -> EU distance, m
    d1: float  # EU -> MEC distance, m
    path_loss_exponent: float = 3.0
    fading: str = "rayleigh"  # one of FADING_LAWS


def default_eh_params() -> EhParams:
    return EhParams(c=2.463, d=1.635, v=0.826)


def default_geometry() -> list[ChannelGeometry]:
    """Four-EU reference layout (distances in metres)."""
    d0 = (12.0, 10.0, 15.0, 13.0)
    d1 = (30.0, 35.0, 20.0, 25.0)
    return [ChannelGeometry(d0=a, d1=b) for a, b in zip(d0, d1)]


def default_scenario() -> Scenario:
    """Reference four-EU instance with deterministic (unit-fading) channels."""
    eus = tuple(
        EuProfile(g=geo.d0 ** -geo.path_loss_exponent, h=geo.d1 ** -geo.path_loss_exponent)
        for geo in default_geometry()
    )
    return Scenario(eus=eus)


def realize_channels(
    geometries: list[ChannelGeometry], seed: int
) -> list[tuple[float, float]]:
    """Draw one (g, h) pair per geometry entry.

    "rayleigh" multiplies each path-loss gain by an independent unit-mean
    exponential power fade; "unit" uses the path loss alone. The draw order is
    fixed (g then h, per entry) so a seed pins the whole realization.
    """
    rng = np.random.default_rng(seed)
    out = []
    for geo in geometries:
        if geo.fading not in FADING_LAWS:
            raise ValueError(f"unknown fading law: {geo.fading!r}")
        base_g = geo.d0 ** -geo.path_loss_exponent
        base_h = geo.d1 ** -geo.path_loss_exponent
        if geo.fading == "rayleigh":
            base_g *= rng.exponential(1.0)
            base_h *= rng.exponential(1.0)
        out.append((base_g, base_h))
    return out


def with_channels(scenario: Scenario, gains: list[tuple[float, float]]) -> Scenario:
    if len(gains) != scenario.n_eus:
        raise ValueError("one (g, h) pair per EU required")
    eus = tuple(
        replace(eu, g=float(g), h=float(h)) for eu, (g, h) in zip(scenario.eus, gains)
    )
    return replace(scenario, eus=eus)


def validate(scenario: Scenario) -> list[str]:
    """Return a list of violation messages; empty means the scenario is usable."""
    bad: list[str] = []
    if scenario.block_length <= 0:
        bad.append("block_length must be > 0")
    if scenario.bandwidth <= 0:
        bad.append("bandwidth must be > 0")
    if scenario.noise_density <= 0:
        bad.append("noise_density must be > 0")
    if scenario.pb_power <= 0:
        bad.append("pb_power must be > 0")
    if not 0 < scenario.backcom_gap <= 1:
        bad.append("backcom_gap must be in (0, 1]")
    if scenario.cycles_per_bit <= 0:
        bad.append("cycles_per_bit must be > 0")
    if scenario.n_eus == 0:
        bad.append("at least one EU required")
    for k, eu in enumerate(scenario.eus):
        tag = f"eu[{k}]"
        if eu.g < 0 or eu.h < 0:
            bad.append(f"{tag}: channel gains must be >= 0")
        if eu.weight <= 0:
            bad.append(f"{tag}: weight must be > 0")
        if eu.eh.v <= 0:
            bad.append(f"{tag}: harvester v must be > 0")
        elif eu.eh.c * eu.eh.v - eu.eh.d < 0:
            bad.append(f"{tag}: harvester requires c*v - d >= 0")
        if eu.backcom_circuit_power < 0 or eu.at_circuit_power < 0:
            bad.append(f"{tag}: circuit powers must be >= 0")
        if eu.capacitance <= 0:
            bad.append(f"{tag}: capacitance must be > 0")
        if eu.f_max <= 0:
            bad.append(f"{tag}: f_max must be > 0")
        if eu.l_min < 0:
            bad.append(f"{tag}: l_min must be >= 0")
    return bad


class ConfigError(ValueError):
    """Raised for malformed configuration documents, with every problem listed."""


def _power_field(section: dict, stem: str, default: float, errors: list[str]) -> float:
    """Read `<stem>_watts` or `<stem>_dbm` (exactly one) from a config section."""
    w_key, d_key = f"{stem}_watts", f"{stem}_dbm"
    if w_key in section and d_key in section:
        errors.append(f"give only one of {w_key} / {d_key}")
        return default
    if w_key in section:
        return float(section[w_key])
    if d_key in section:
        return dbm_to_watts(float(section[d_key]))
    return default


def scenario_from_mapping(doc: dict) -> tuple[Scenario, list[ChannelGeometry]]:
    """Build (Scenario, geometries) from a parsed config document.

    Sections: system, eus[], geometry[], fading. Unknown keys are rejected;
    missing ones fall back to the reference defaults. Power-valued fields
    accept either a `_watts` or a `_dbm` suffixed key.
    """
    errors: list[str] = []
    known = {"system", "eus", "geometry", "fading", "sweep"}
    for key in doc:
        if key not in known:
            errors.append(f"unknown top-level section: {key!r}")

    system = dict(doc.get("system", {}))
    fading = dict(doc.get("fading", {}))
    law = fading.pop("law", "rayleigh")
    default_beta = float(fading.pop("path_loss_exponent", 3.0))
    if law not in FADING_LAWS:
        errors.append(f"fading.law must be one of {FADING_LAWS}")
    if fading:
        errors.append(f"unknown fading keys: {sorted(fading)}")

    geo_docs = doc.get("geometry")
    if geo_docs is None:
        geometries = [replace(g, fading=law) for g in default_geometry()]
    else:
        geometries = []
        for i, entry in enumerate(geo_docs):
            extra = set(entry) - {"d0_m", "d1_m", "path_loss_exponent"}
            if extra:
                errors.append(f"geometry[{i}]: unknown keys {sorted(extra)}")
            try:
                geometries.append(
                    ChannelGeometry(
                        d0=float(entry["d0_m"]),
                        d1=float(entry["d1_m"]),
                        path_loss_exponent=float(
                            entry.get("path_loss_exponent", default_beta)
                        ),
                        fading=law,
                    )
                )
            except KeyError as missing:
                errors.append(f"geometry[{i}]: missing key {missing}")

    eu_docs = doc.get("eus")
    if eu_docs is None:
        eu_docs = [{}] * len(geometries)
    if len(eu_docs) == 1 and len(geometries) > 1:
        eu_docs = list(eu_docs) * len(geometries)
    if len(eu_docs) != len(geometries):
        errors.append(
            f"eus ({len(eu_docs)}) and geometry ({len(geometries)}) lengths differ"
        )

    eu_keys = {
        "weight",
        "backcom_circuit_power_watts",
        "backcom_circuit_power_dbm",
        "at_circuit_power_watts",
        "at_circuit_power_dbm",
        "capacitance",
        "f_max_hz",
        "l_min_bits",
        "eh",
        "g",
        "h",
    }
    eus = []
    for i, (entry, geo) in enumerate(zip(eu_docs, geometries)):
        extra = set(entry) - eu_keys
        if extra:
            errors.append(f"eus[{i}]: unknown keys {sorted(extra)}")
        eh_doc = entry.get("eh", {})
        eh = EhParams(
            c=float(eh_doc.get("c", 2.463)),
            d=float(eh_doc.get("d", 1.635)),
            v=float(eh_doc.get("v", 0.826)),
        )
        # Direct gains override the geometry-derived ones (handy for replaying
        # a recorded realization through the config file).
        g = float(entry.get("g", geo.d0 ** -geo.path_loss_exponent))
        h = float(entry.get("h", geo.d1 ** -geo.path_loss_exponent))
        eus.append(
            EuProfile(
                g=g,
                h=h,
                eh=eh,
                weight=float(entry.get("weight", 1.0)),
                backcom_circuit_power=_power_field(
                    entry, "backcom_circuit_power", 1e-4, errors
                ),
                at_circuit_power=_power_field(entry, "at_circuit_power", 1e-3, errors),
                capacitance=float(entry.get("capacitance", 1e-26)),
                f_max=float(entry.get("f_max_hz", 5e8)),
                l_min=float(entry.get("l_min_bits", 2e4)),
            )
        )

    sys_keys = {
        "block_length_s",
        "bandwidth_hz",
        "noise_density_watts",
        "noise_density_dbm",
        "pb_power_watts",
        "pb_power_dbm",
        "backcom_gap",
        "backcom_gap_db",
        "cycles_per_bit",
    }
    extra = set(system) - sys_keys
    if extra:
        errors.append(f"system: unknown keys {sorted(extra)}")
    if "backcom_gap" in system and "backcom_gap_db" in system:
        errors.append("give only one of backcom_gap / backcom_gap_db")
    if "backcom_gap_db" in system:
        gap = db_to_linear(float(system["backcom_gap_db"]))
    else:
        gap = float(system.get("backcom_gap", 10.0 ** (-1.5)))

    scenario = Scenario(
        eus=tuple(eus),
        block_length=float(system.get("block_length_s", 1.0)),
        bandwidth=float(system.get("bandwidth_hz", 1e5)),
        noise_density=_power_field(system, "noise_density", 1e-15, errors),
        pb_power=_power_field(system, "pb_power", 3.0, errors),
        backcom_gap=gap,
        cycles_per_bit=float(system.get("cycles_per_bit", 1000.0)),
    )
    errors.extend(validate(scenario))
    if errors:
        raise ConfigError("; ".join(errors))
    return scenario, geometries
