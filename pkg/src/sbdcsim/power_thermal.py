"""Solar harvest, battery state of charge, radiator heat rejection and energy zones."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .tasks import ALL_CLASSES, TaskClass

MAX_PHYSICS_DT_S = 10.0


class EnergyZone(enum.IntEnum):
    """Operational zone; the integer order is Red < Yellow < Green."""

    RED = 0
    YELLOW = 1
    GREEN = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "EnergyZone":
        return cls[text.upper()]


@dataclass(frozen=True)
class PowerSpec:
    panel_area_m2: float = 4.0
    panel_efficiency: float = 0.3
    battery_capacity_Wh: float = 1500.0
    p_idle_W: float = 150.0
    p_compute_max_W: float = 850.0
    p_tx_W_per_bps: float = 2e-7
    tx_budget_W: float = 200.0

    def __post_init__(self) -> None:
        for name in ("panel_area_m2", "battery_capacity_Wh", "p_idle_W", "p_compute_max_W", "p_tx_W_per_bps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.panel_efficiency <= 1:
            raise ValueError("panel_efficiency must lie in (0, 1]")
        if self.tx_budget_W < 0:
            raise ValueError("tx_budget_W must be >= 0")

    @property
    def max_load_W(self) -> float:
        return self.p_idle_W + self.p_compute_max_W + self.tx_budget_W


@dataclass(frozen=True)
class ThermalSpec:
    radiator_area_m2: float = 6.0
    emissivity: float = 0.85
    sink_temperature_K: float = 255.0
    max_radiator_temperature_K: float = 320.0
    heat_capacity_J_per_K: float = 5.0e4

    def __post_init__(self) -> None:
        if not 0 < self.emissivity <= 1:
            raise ValueError("emissivity must lie in (0, 1]")
        if not 0 <= self.sink_temperature_K < self.max_radiator_temperature_K:
            raise ValueError("need 0 <= sink_temperature_K < max_radiator_temperature_K")
        if not self.radiator_area_m2 > 0 or not self.heat_capacity_J_per_K > 0:
            raise ValueError("radiator area and heat capacity must be positive")


@dataclass(frozen=True)
class ZonePolicy:
    r_green: float = 0.40
    r_red: float = 0.15
    forecast_margin_s: float = 600.0
    thermal_gate: float = 0.10

    def __post_init__(self) -> None:
        if not 0 < self.r_red < self.r_green < 1:
            raise ValueError("ZonePolicy requires 0 < r_red < r_green < 1")
        if self.forecast_margin_s < 0 or not 0 <= self.thermal_gate <= 1:
            raise ValueError("invalid forecast margin or thermal gate")


class ZoneForecast(NamedTuple):
    eclipse_remaining_s: float = 0.0
    time_to_next_contact_s: float = 0.0
    projected_load_W: float = 0.0


@dataclass(frozen=True)
class PowerThermalState:
    soc_Wh: float
    radiator_temperature_K: float
    harvest_W: float = 0.0
    load_W: float = 0.0
    zone: EnergyZone = EnergyZone.GREEN
    thermal_headroom: float = 1.0
    # bookkeeping for the last integration step
    clamp_excess_Wh: float = 0.0
    clamp_deficit_Wh: float = 0.0
    deficit: bool = False


def harvest_power(
    spec: PowerSpec, eclipsed: bool, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> float:
    if eclipsed:
        return 0.0
    return spec.panel_efficiency * spec.panel_area_m2 * constants.solar_constant


def _net_radiation(spec: ThermalSpec, T: float, constants: PhysicalConstants) -> float:
    return spec.emissivity * constants.sigma * spec.radiator_area_m2 * (T**4 - spec.sink_temperature_K**4)


def radiated_power(spec: ThermalSpec, T_K: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    if T_K < spec.sink_temperature_K:
        raise ValueError("radiator temperature below the sink temperature is outside the model")
    return _net_radiation(spec, T_K, constants)


def radiator_flux(spec: ThermalSpec, T_K: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Net rejected flux per square metre of radiator (W/m^2)."""
    return radiated_power(spec, T_K, constants) / spec.radiator_area_m2


def required_radiator_area(
    dissipation_W: float, spec: ThermalSpec, T_K: float = 300.0, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> float:
    return dissipation_W / radiator_flux(spec, T_K, constants)


def equilibrium_temperature(
    spec: ThermalSpec, dissipation_W: float, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> float:
    """Temperature at which the radiator rejects exactly ``dissipation_W``."""
    k = spec.emissivity * constants.sigma * spec.radiator_area_m2
    return (dissipation_W / k + spec.sink_temperature_K**4) ** 0.25


def thermal_headroom(spec: ThermalSpec, load_W: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    cap = radiated_power(spec, spec.max_radiator_temperature_K, constants)
    return min(1.0, max(0.0, (cap - load_W) / cap))


def stable_dt_limit(spec: ThermalSpec, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    k = 4.0 * spec.emissivity * constants.sigma * spec.radiator_area_m2 * spec.max_radiator_temperature_K**3
    return spec.heat_capacity_J_per_K / k


def step_energy_thermal(
    state: PowerThermalState,
    power_spec: PowerSpec,
    thermal_spec: ThermalSpec,
    load_W: float,
    eclipsed: bool,
    dt_s: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> PowerThermalState:
    """Advance battery and radiator by one explicit Euler step.

    All electrical load is dissipated as heat. The zone is carried over
    unchanged; callers re-evaluate it with :func:`compute_zone`.
    """
    if not dt_s > 0:
        raise ValueError("dt_s must be > 0")
    if dt_s >= stable_dt_limit(thermal_spec, constants):
        raise ValueError("dt_s violates the explicit-Euler stability limit of the thermal model")
    harvest = harvest_power(power_spec, eclipsed, constants)
    cap = power_spec.battery_capacity_Wh
    raw = state.soc_Wh + (harvest - load_W) * dt_s / 3600.0
    excess = max(0.0, raw - cap)
    deficit = max(0.0, -raw)
    soc = min(cap, max(0.0, raw))
    T = state.radiator_temperature_K
    T_new = T + dt_s * (load_W - _net_radiation(thermal_spec, T, constants)) / thermal_spec.heat_capacity_J_per_K
    if not (math.isfinite(soc) and math.isfinite(T_new)) or T_new <= 0:
        raise FloatingPointError("energy/thermal integration produced a non-physical state")
    return replace(
        state,
        soc_Wh=soc,
        radiator_temperature_K=T_new,
        harvest_W=harvest,
        load_W=load_W,
        thermal_headroom=thermal_headroom(thermal_spec, load_W, constants),
        clamp_excess_Wh=excess,
        clamp_deficit_Wh=deficit,
        deficit=deficit > 0 or (soc == 0.0 and load_W > harvest),
    )


def compute_zone(
    state: PowerThermalState,
    power_spec: PowerSpec,
    policy: ZonePolicy,
    forecast: ZoneForecast = ZoneForecast(),
) -> EnergyZone:
    if min(forecast) < 0:
        raise ValueError("forecast fields must be >= 0")
    cap = power_spec.battery_capacity_Wh
    window = forecast.eclipse_remaining_s + policy.forecast_margin_s
    soc_proj = state.soc_Wh - forecast.projected_load_W * window / 3600.0
    if state.soc_Wh <= 0.0 or soc_proj < policy.r_red * cap:
        return EnergyZone.RED
    if soc_proj >= policy.r_green * cap and state.thermal_headroom >= policy.thermal_gate:
        return EnergyZone.GREEN
    return EnergyZone.YELLOW


_ALLOWED = {
    EnergyZone.GREEN: ALL_CLASSES,
    EnergyZone.YELLOW: frozenset(
        {TaskClass.REAL_TIME_INFERENCE, TaskClass.INTERRUPTIBLE_COMPRESSION, TaskClass.HOUSEKEEPING}
    ),
    EnergyZone.RED: frozenset({TaskClass.HOUSEKEEPING}),
}


def allowed_task_classes(zone: EnergyZone) -> frozenset[TaskClass]:
    return _ALLOWED[EnergyZone(zone)]


def zone_permits(zone: EnergyZone, task_class: TaskClass, lightweight: bool = True) -> bool:
    """Class admission including Yellow's lightweight-inference restriction."""
    zone = EnergyZone(zone)
    if task_class not in _ALLOWED[zone]:
        return False
    if zone is EnergyZone.YELLOW and task_class is TaskClass.REAL_TIME_INFERENCE:
        return lightweight
    return True


def is_lightweight(demand_units: float, derated_capacity: float, fraction: float = 0.1, window_s: float = 60.0) -> bool:
    """A task is lightweight when it needs at most ``fraction`` of the node over ``window_s``."""
    return demand_units <= fraction * derated_capacity * window_s


def eclipse_remaining(t: float, windows, margin_s: float) -> float:
    """Seconds of eclipse the battery must bridge, seen from time ``t``.

    Inside an eclipse this is the time left in it; otherwise it is the time
    until the end of an eclipse that begins within ``margin_s``, else 0.
    ``windows`` must be sorted (start, end) pairs.
    """
    for s, e in windows:
        if e <= t:
            continue
        if s <= t:
            return e - t
        return e - t if s - t <= margin_s else 0.0
    return 0.0
