"""Scenario files: YAML documents validated against a strict schema.

Unknown keys are rejected and every default is materialised so a run's
summary records the complete configuration it used.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constants import GEO_ALTITUDE_KM, PhysicalConstants
from .orbits import CircularOrbit, Layer
from .power_thermal import PowerSpec, ThermalSpec, ZonePolicy
from .routing import CostWeights


class ScenarioError(ValueError):
    """Schema or consistency violation; ``issues`` holds one message per problem."""

    def __init__(self, issues: list[str]):
        super().__init__("\n".join(issues))
        self.issues = issues


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ConstantsModel(_Model):
    mu_earth: float = 398600.4418
    R_E: float = 6371.0
    c: float = 299792.458
    solar_constant: float = 1361.0
    sigma: float = 5.670374419e-8

    @model_validator(mode="after")
    def _check(self):
        PhysicalConstants(**self.model_dump())
        return self


class SunConfig(_Model):
    mode: Literal["fixed", "ecliptic"] = "fixed"
    direction: tuple[float, float, float] | None = None
    initial_longitude_deg: float = 90.0


class ShellConfig(_Model):
    name: str
    layer: Literal["LEO", "MEO", "GEO"]
    altitude_km: float
    inclination_deg: float = 53.0
    planes: int = Field(1, ge=1)
    sats_per_plane: int = Field(1, ge=1)
    raan_spread_deg: float = 360.0
    raan_offset_deg: float = 0.0
    phase_offset_deg: float = 0.0
    phasing_deg: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        CircularOrbit(self.altitude_km, self.inclination_deg, 0.0, 0.0, Layer(self.layer))
        return self


class LunarConfig(_Model):
    owlt_s: float = Field(1.28, ge=0)
    rate_bps: float = Field(1e6, gt=0)
    window_on_s: float = Field(6 * 3600.0, gt=0)
    window_off_s: float = Field(6 * 3600.0, ge=0)
    compute_capacity: float = Field(200.0, gt=0)


class ConstellationConfig(_Model):
    shells: list[ShellConfig] = Field(min_length=1)
    isl_topology: Literal["ring_cross", "full_mesh"] = "ring_cross"
    lunar: LunarConfig | None = None

    @field_validator("shells")
    @classmethod
    def _unique(cls, v):
        names = [s.name for s in v]
        if len(set(names)) != len(names):
            raise ValueError("shell names must be unique")
        return v


class GroundStationConfig(_Model):
    name: str
    latitude_deg: float = Field(ge=-90, le=90)
    longitude_deg: float
    min_elevation_deg: float = Field(10.0, ge=0, lt=90)
    role: Literal["gateway", "access"] = "gateway"


class LinksConfig(_Model):
    isl_bps: float = Field(1e9, gt=0)
    feeder_bps: float = Field(2e8, gt=0)
    access_bps: float = Field(5e7, gt=0)
    contact_step_s: float = Field(10.0, gt=0)


class PowerConfig(_Model):
    panel_area_m2: float = 4.0
    panel_efficiency: float = 0.3
    battery_capacity_Wh: float = 1500.0
    p_idle_W: float = 150.0
    p_compute_max_W: float = 850.0
    p_tx_W_per_bps: float = 2e-7
    tx_budget_W: float = 200.0

    @model_validator(mode="after")
    def _check(self):
        PowerSpec(**self.model_dump())
        return self


class ThermalConfig(_Model):
    radiator_area_m2: float = 6.0
    emissivity: float = 0.85
    sink_temperature_K: float = 255.0
    max_radiator_temperature_K: float = 320.0
    heat_capacity_J_per_K: float = 5.0e4
    initial_temperature_K: float = 290.0

    @model_validator(mode="after")
    def _check(self):
        ThermalSpec(**{k: v for k, v in self.model_dump().items() if k != "initial_temperature_K"})
        if self.initial_temperature_K < self.sink_temperature_K:
            raise ValueError("initial radiator temperature must be >= sink temperature")
        return self


class NodeSpecConfig(_Model):
    compute_capacity: float = Field(100.0, ge=0)
    storage_bits: float = Field(1e13, gt=0)
    isl_terminals: int = Field(4, ge=0)
    max_concurrent: int = Field(4, ge=1)
    energy_per_unit_Wh: float = Field(0.005, ge=0)
    tid_tolerance_krad: Union[float, tuple[float, float]] = 50.0
    initial_dose_krad: float = Field(0.0, ge=0)
    dose_rate_krad_per_year: float = Field(1.0, ge=0)
    seu_rate_per_s: float = Field(0.0, ge=0)
    initial_soc_fraction: float = Field(0.9, ge=0, le=1)
    power: PowerConfig = PowerConfig()
    thermal: ThermalConfig = ThermalConfig()

    @field_validator("tid_tolerance_krad")
    @classmethod
    def _tol(cls, v):
        lo, hi = (v, v) if isinstance(v, (int, float)) else v
        if not 0 < lo <= hi:
            raise ValueError("TID tolerance must be > 0 (range given as [low, high])")
        return v


_LAYER_DEFAULTS = {
    "LEO": {},
    "MEO": {"compute_capacity": 200.0, "dose_rate_krad_per_year": 10.0},
    "GEO": {"compute_capacity": 500.0, "dose_rate_krad_per_year": 3.0,
            "power": {"panel_area_m2": 12.0, "battery_capacity_Wh": 6000.0, "p_compute_max_W": 2500.0},
            "thermal": {"radiator_area_m2": 18.0, "heat_capacity_J_per_K": 1.5e5}},
}


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


class NodeSpecsConfig(_Model):
    """Per-layer specs; keys given in a file are merged over the layer's defaults."""

    LEO: NodeSpecConfig = NodeSpecConfig(**_LAYER_DEFAULTS["LEO"])
    MEO: NodeSpecConfig = NodeSpecConfig(**_LAYER_DEFAULTS["MEO"])
    GEO: NodeSpecConfig = NodeSpecConfig(**_LAYER_DEFAULTS["GEO"])

    @model_validator(mode="before")
    @classmethod
    def _layer_defaults(cls, data):
        if isinstance(data, dict):
            data = {k: _merge(_LAYER_DEFAULTS.get(k, {}), v) if isinstance(v, dict) else v for k, v in data.items()}
        return data


class NodeOverride(_Model):
    node: str
    compute_capacity: float | None = Field(None, ge=0)
    max_concurrent: int | None = Field(None, ge=1)
    tid_tolerance_krad: float | None = Field(None, gt=0)
    initial_dose_krad: float | None = Field(None, ge=0)
    dose_rate_krad_per_year: float | None = Field(None, ge=0)
    seu_rate_per_s: float | None = Field(None, ge=0)
    initial_soc_fraction: float | None = Field(None, ge=0, le=1)
    power: PowerConfig | None = None
    thermal: ThermalConfig | None = None


class TemplateConfig(_Model):
    task_class: Literal["RealTimeInference", "InterruptibleCompression", "BulkTraining", "StorageRetrieval", "Housekeeping"] = "RealTimeInference"
    input_bits: float = Field(2e6, ge=0)
    compute_demand_units: float = Field(20.0, ge=0)
    output_bits: float = Field(1e4, ge=0)
    deadline_s: float | None = Field(60.0, gt=0)
    replication_k: int = Field(1, ge=1)


class CohortConfig(_Model):
    name: str
    latitude_deg: float = Field(ge=-90, le=90)
    longitude_deg: float
    population: int = Field(ge=0)
    rate_low_per_s: float = Field(1e-4, ge=0)
    rate_high_per_s: float = Field(5e-4, ge=0)
    switch_low_to_high_per_s: float = Field(1e-3, gt=0)
    switch_high_to_low_per_s: float = Field(1e-3, gt=0)
    min_elevation_deg: float = Field(10.0, ge=0, lt=90)
    template: TemplateConfig = TemplateConfig()

    @model_validator(mode="after")
    def _rates(self):
        if self.rate_high_per_s < self.rate_low_per_s:
            raise ValueError("rate_high_per_s must be >= rate_low_per_s")
        return self


class EoConfig(_Model):
    satellites: Union[Literal["all", "leo"], list[str]] = "leo"
    start_s: float = Field(0.0, ge=0)
    end_s: float | None = Field(None, gt=0)
    interval_s: float = Field(1800.0, gt=0)
    input_bits: float = Field(2e9, gt=0)
    compression_ratio: float = Field(20.0, ge=1)
    compute_units_per_bit: float = Field(1e-8, ge=0)


class BulkConfig(_Model):
    origin: str
    start_s: float = Field(0.0, ge=0)
    interval_s: float = Field(3600.0, gt=0)
    input_bits: float = Field(1e8, ge=0)
    compute_demand_units: float = Field(20000.0, ge=0)
    output_bits: float = Field(1e6, ge=0)
    replication_k: int = Field(1, ge=1)


class HousekeepingConfig(_Model):
    interval_s: float = Field(600.0, gt=0)
    compute_demand_units: float = Field(5.0, ge=0)


class WorkloadsConfig(_Model):
    eo: EoConfig | None = None
    bulk: BulkConfig | None = None
    housekeeping: HousekeepingConfig | None = HousekeepingConfig()


class ZonePolicyConfig(_Model):
    r_green: float = 0.40
    r_red: float = 0.15
    forecast_margin_s: float = 600.0
    thermal_gate: float = 0.10

    @model_validator(mode="after")
    def _check(self):
        if not self.r_red < self.r_green:
            raise ValueError("ZonePolicy invariant violated: r_red must be < r_green")
        ZonePolicy(**self.model_dump())
        return self


class CostWeightsConfig(_Model):
    w_latency: float = 1.0
    w_energy: float = 0.1
    w_risk: float = 100.0

    @model_validator(mode="after")
    def _check(self):
        CostWeights(self.w_latency, self.w_energy, self.w_risk)
        return self


class OutageConfig(_Model):
    outage_rate_per_s: float = Field(0.0, ge=0)
    reacquisition_mean_s: float = Field(5.0, ge=0)


class SlaConfig(_Model):
    quantile: float = Field(0.95, gt=0, lt=1)
    latency_bound_s: dict[str, float] = {"RealTimeInference": 60.0}
    max_miss_fraction: float = Field(0.1, ge=0, le=1)
    weight_multiplier: float = Field(2.0, ge=1)
    max_multiplier: float = Field(8.0, ge=1)


class OrchestratorConfig(_Model):
    geo_epoch_s: float = Field(300.0, gt=0)
    planning_horizon_s: float | None = None
    meo_epoch_s: float = Field(60.0, gt=0)
    rebalance_threshold: float = Field(2.0, ge=1)
    table_validity_s: float = Field(900.0, gt=0)
    watchdog: bool = True
    watchdog_epoch_s: float = Field(60.0, gt=0)
    dose_threshold: float = Field(0.9, gt=0, le=1)
    risk_threshold: float = Field(0.05, gt=0, lt=1)
    replication_risk_threshold: float = Field(0.05, gt=0, lt=1)
    control_bundle_bits: float = Field(8000.0, gt=0)
    max_forwards: int = Field(3, ge=0)
    sla: SlaConfig = SlaConfig()


class EngineConfig(_Model):
    physics_dt_s: float = Field(10.0, gt=0, le=10.0)
    slot_s: float = Field(30.0, gt=0)
    checkpoint_interval_s: float = Field(60.0, gt=0)
    telemetry_bits: float = Field(1000.0, ge=0)
    retry_interval_s: float = Field(60.0, gt=0)


class BlackoutConfig(_Model):
    start_s: float = Field(ge=0)
    end_s: float

    @model_validator(mode="after")
    def _order(self):
        if not self.end_s > self.start_s:
            raise ValueError("blackout end_s must be > start_s")
        return self


class ScenarioModel(_Model):
    name: str = "scenario"
    horizon_s: float = Field(gt=0)
    seed: int = Field(0, ge=0)
    mode: Literal["relay_only", "in_orbit_compute"] = "in_orbit_compute"
    constants: ConstantsModel = ConstantsModel()
    sun: SunConfig = SunConfig()
    earth_rotation: bool = True
    constellation: ConstellationConfig
    ground_stations: list[GroundStationConfig] = []
    links: LinksConfig = LinksConfig()
    node_specs: NodeSpecsConfig = NodeSpecsConfig()
    node_overrides: list[NodeOverride] = []
    cohorts: list[CohortConfig] = []
    workloads: WorkloadsConfig = WorkloadsConfig()
    zone_policy: ZonePolicyConfig = ZonePolicyConfig()
    cost_weights: CostWeightsConfig = CostWeightsConfig()
    outage_model: OutageConfig = OutageConfig()
    orchestrator: OrchestratorConfig = OrchestratorConfig()
    engine: EngineConfig = EngineConfig()
    feeder_blackouts: list[BlackoutConfig] = []

    @model_validator(mode="after")
    def _consistency(self):
        names = [g.name for g in self.ground_stations]
        if len(set(names)) != len(names):
            raise ValueError("ground station names must be unique")
        if self.workloads.bulk is not None and self.workloads.bulk.origin not in names:
            raise ValueError(f"bulk origin {self.workloads.bulk.origin!r} is not a ground station")
        for s in self.constellation.shells:
            if s.layer == "GEO" and s.altitude_km != GEO_ALTITUDE_KM:
                raise ValueError("GEO shells must sit at 35786 km")
        return self


@dataclass(frozen=True)
class Scenario:
    model: ScenarioModel
    source_hash: str
    path: str | None = None

    @property
    def materialized(self) -> dict:
        return self.model.model_dump(mode="json")

    def with_seed(self, seed: int) -> "Scenario":
        return Scenario(self.model.model_copy(update={"seed": int(seed)}), self.source_hash, self.path)


# --- loading -------------------------------------------------------------------


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    """Map key paths of a composed YAML node tree to 1-based line numbers."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_index(v, path + (key,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


def _locate(lines: dict[tuple, int], loc: tuple) -> int | None:
    loc = tuple(x for x in loc if not (isinstance(x, str) and x.startswith(("function-", "constrained-"))))
    while loc:
        if loc in lines:
            return lines[loc]
        loc = loc[:-1]
    return lines.get(())


def format_issues(err: ValidationError, lines: dict[tuple, int] | None = None) -> list[str]:
    issues = []
    for e in err.errors():
        loc = tuple(x for x in e["loc"] if not (isinstance(x, str) and x in ("float", "tuple[float, float]", "list[str]", "str")))
        where = ".".join(str(x) for x in loc) or "<root>"
        line = _locate(lines or {}, loc)
        prefix = f"line {line}: " if line else ""
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        issues.append(f"{prefix}{where}: {msg}")
    return issues


def scenario_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_scenario(text: str, path: str | None = None) -> Scenario:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"YAML syntax error: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ScenarioError(["scenario must be a mapping at the top level"])
    lines = _line_index(root) if root is not None else {}
    try:
        model = ScenarioModel.model_validate(raw)
    except ValidationError as exc:
        raise ScenarioError(format_issues(exc, lines)) from exc
    return Scenario(model, scenario_hash(text.encode()), path)


def load_scenario(path: str | Path) -> Scenario:
    """Read and validate a scenario file. Raises OSError or :class:`ScenarioError`."""
    text = Path(path).read_text()
    return parse_scenario(text, str(path))


def scenario_from_dict(data: dict, tag: str = "") -> Scenario:
    try:
        model = ScenarioModel.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(format_issues(exc)) from exc
    canonical = json.dumps(data, sort_keys=True, default=str).encode()
    return Scenario(model, scenario_hash(canonical + tag.encode()))


# --- parameter overrides for sweeps ---------------------------------------------


def _paths(data: Any, prefix=()) -> list[tuple]:
    out = []
    if isinstance(data, dict):
        for k, v in data.items():
            out.append(prefix + (k,))
            out += _paths(v, prefix + (k,))
    elif isinstance(data, list):
        for i, v in enumerate(data):
            out += _paths(v, prefix + (i,))
    return out


def resolve_key(materialized: dict, key: str) -> list[tuple]:
    """Paths addressed by ``key``: a dotted path, or a bare name matching every occurrence."""
    if "." in key:
        parts = tuple(int(p) if p.isdigit() else p for p in key.split("."))
        node = materialized
        for p in parts:
            if isinstance(node, dict) and p in node:
                node = node[p]
            elif isinstance(node, list) and isinstance(p, int) and p < len(node):
                node = node[p]
            else:
                return []
        return [parts]
    return [p for p in _paths(materialized) if p[-1] == key]


def with_override(scn: Scenario, key: str, value: Any) -> Scenario:
    data = copy.deepcopy(scn.materialized)
    paths = resolve_key(data, key)
    if not paths:
        raise ScenarioError([f"unknown parameter {key!r}"])
    for path in paths:
        node = data
        for p in path[:-1]:
            node = node[p]
        node[path[-1]] = value
    try:
        model = ScenarioModel.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(format_issues(exc)) from exc
    return Scenario(model, scenario_hash((scn.source_hash + f"|{key}={value!r}").encode()), scn.path)


def coerce_value(text: str) -> Any:
    """Interpret a command-line value the way YAML would."""
    return yaml.safe_load(text)
