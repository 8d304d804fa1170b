"""Deterministic discrete-event simulation of the constellation.

One run is strictly sequential: a single event heap ordered by
``(time, priority, sequence)`` interleaves fixed-step physics with traffic,
control and bundle events. Parallelism exists only across runs (sweeps).
"""

from __future__ import annotations

import bisect
import concurrent.futures
import csv
import heapq
import io
import json
import logging
import math
import zlib
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .constants import PhysicalConstants
from .contact_graph import (
    ConstellationGeometry,
    Contact,
    ContactKind,
    GroundNode,
    LinkRates,
    LunarNode,
    NodeForecast,
    NodeInfo,
    OutageModel,
    SatelliteNode,
    TimeExpandedGraph,
    apply_outages,
    availability,
    build_contact_plan,
    dump_contacts,
    remove_contacts,
)
from .node_model import (
    Node,
    NodeHealth,
    NodeSpec,
    TaskExecution,
    accumulate_dose,
    apply_seu_faults,
    execute_step,
    failure_risk,
    risk_rate,
    sample_seu_faults,
)
from .orbits import (
    CircularOrbit,
    GroundStation,
    Layer,
    SunModel,
    eclipse_windows,
    elevation_and_range,
    positions,
    station_positions,
)
from .orchestrator import (
    CLASS_ROLE,
    AccessAudit,
    Action,
    ControllerTier,
    Flag,
    MigrationPlan,
    MigrationTrigger,
    NodeSnapshot,
    PlanningContext,
    PrecomputedTable,
    RunningInfo,
    SlaPolicy,
    build_tables,
    degradation_watchdog,
    forecast_node,
    geo_global_plan,
    leo_local_decide,
    meo_regional_rebalance,
    sla_monitor,
)
from .power_thermal import (
    EnergyZone,
    PowerSpec,
    PowerThermalState,
    ThermalSpec,
    ZoneForecast,
    ZonePolicy,
    compute_zone,
    eclipse_remaining,
    is_lightweight,
    step_energy_thermal,
    thermal_headroom,
    zone_permits,
)
from .routing import (
    CostWeights,
    NoFeasiblePlacement,
    NoRoute,
    Reservations,
    Route,
    earliest_delivery_route,
    earliest_delivery_to_any,
    place_task,
)
from .scenario import Scenario, ScenarioModel, with_override
from .tasks import GLOBAL_CLASSES, Task, TaskClass
from .traffic import HandsetCohort, Mmpp, TaskTemplate, generate_arrivals, generate_eo_workload, periodic_schedule

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.PCG64/SeedSequence-crc32-v1"
PRIORITY_PHYSICS, PRIORITY_CONTROL, PRIORITY_TRAFFIC, PRIORITY_COMPLETION = 0, 1, 2, 3


class InvariantViolation(RuntimeError):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"invariant '{invariant}' violated: {detail}")
        self.invariant = invariant


# --- events and random streams ----------------------------------------------------


@dataclass(order=True)
class Event:
    time_s: float
    priority: int
    sequence: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Total order on (time, priority, sequence); refuses to run time backwards."""

    def __init__(self) -> None:
        self._heap: list[Event] = []
        self._seq = 0
        self.last_time = -math.inf

    def push(self, time_s: float, priority: int, kind: str, payload: Any = None) -> Event:
        ev = Event(float(time_s), priority, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        if ev.time_s < self.last_time:
            raise InvariantViolation("event_causality", f"event at {ev.time_s} after {self.last_time}")
        self.last_time = ev.time_s
        return ev

    def peek_time(self) -> float:
        return self._heap[0].time_s if self._heap else math.inf

    def __len__(self) -> int:
        return len(self._heap)

    def __iter__(self):
        return iter(self._heap)


class RngStreams:
    """Named generators split from one master seed.

    ``stream(name, *keys)`` seeds PCG64 with ``SeedSequence(seed,
    spawn_key=(crc32(name), *keys))``; the same (name, keys) always gives
    the same generator object within a run.
    """

    NAMES = ("traffic", "outages", "seu", "tid_tolerance")

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._cache: dict[tuple, np.random.Generator] = {}

    def stream(self, name: str, *keys: int) -> np.random.Generator:
        k = (name,) + tuple(int(x) for x in keys)
        if k not in self._cache:
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),) + k[1:])
            self._cache[k] = np.random.Generator(np.random.PCG64(ss))
        return self._cache[k]


# --- world construction -------------------------------------------------------------


@dataclass
class World:
    names: list[str]
    layers: list[Layer]
    geometry: ConstellationGeometry
    orbits: dict[int, CircularOrbit]
    gateways: list[int]
    ground: dict[int, GroundNode]
    lunar: int | None
    plan: list[Contact]
    eclipses: dict[int, list[tuple[float, float]]]

    @property
    def ids(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def of_layer(self, layer: Layer) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l is layer]


_WORLD_CACHE: dict[str, World] = {}


def _geometry_key(m: ScenarioModel) -> str:
    d = m.model_dump(mode="json")
    keep = {k: d[k] for k in ("horizon_s", "constants", "sun", "earth_rotation", "constellation", "ground_stations", "links")}
    return json.dumps(keep, sort_keys=True)


def build_world(m: ScenarioModel) -> World:
    """Node ids, names, nominal contact plan and eclipse windows (seed-independent)."""
    key = _geometry_key(m)
    if key in _WORLD_CACHE:
        return _WORLD_CACHE[key]
    consts = PhysicalConstants(**m.constants.model_dump())
    sun = SunModel(m.sun.mode, *( (tuple(m.sun.direction),) if m.sun.direction else ()), initial_longitude_deg=m.sun.initial_longitude_deg)
    names: list[str] = []
    layers: list[Layer] = []
    sats: list[SatelliteNode] = []
    orbits: dict[int, CircularOrbit] = {}
    for shell in m.constellation.shells:
        for p in range(shell.planes):
            raan = shell.raan_offset_deg + p * shell.raan_spread_deg / shell.planes
            for s in range(shell.sats_per_plane):
                phase = shell.phase_offset_deg + s * 360.0 / shell.sats_per_plane + p * shell.phasing_deg
                nid = len(names)
                orbit = CircularOrbit(shell.altitude_km, shell.inclination_deg, raan, phase, Layer(shell.layer))
                name = f"{shell.name}-p{p}-s{s}"
                sats.append(SatelliteNode(nid, orbit, (shell.name, p), s, name))
                orbits[nid] = orbit
                names.append(name)
                layers.append(orbit.layer)
    ground: dict[int, GroundNode] = {}
    for g in m.ground_stations:
        nid = len(names)
        ground[nid] = GroundNode(nid, GroundStation(g.latitude_deg, g.longitude_deg, g.min_elevation_deg), g.role, g.name)
        names.append(g.name)
        layers.append(Layer.GROUND)
    lunar = None
    lunar_node = None
    if m.constellation.lunar is not None:
        lc = m.constellation.lunar
        lunar = len(names)
        lunar_node = LunarNode(lunar, lc.owlt_s, lc.rate_bps, lc.window_on_s, lc.window_off_s, "lunar")
        names.append("lunar")
        layers.append(Layer.LUNAR)
    geometry = ConstellationGeometry(sats, list(ground.values()), lunar_node, sun, m.earth_rotation, consts)
    rates = LinkRates(m.links.isl_bps, m.links.feeder_bps, m.links.access_bps)
    plan = build_contact_plan(geometry, m.horizon_s, m.links.contact_step_s, rates, m.constellation.isl_topology)
    eclipses = {s.node_id: eclipse_windows(s.orbit, sun, m.horizon_s, m.links.contact_step_s, consts) for s in sats}
    gateways = sorted(i for i, g in ground.items() if g.role == "gateway")
    world = World(names, layers, geometry, orbits, gateways, ground, lunar, plan, eclipses)
    _WORLD_CACHE[key] = world
    return world


# --- ledger --------------------------------------------------------------------------

TASK_COLUMNS = (
    "task_id", "workload", "task_class", "origin", "arrival_s", "status", "reason", "exec_node",
    "exec_start_s", "exec_end_s", "completion_s", "latency_s", "deadline_met", "migrations", "replicas", "forwards",
)
ENERGY_COLUMNS = (
    "t_s", "node", "soc_Wh", "harvest_W", "load_W", "radiator_K", "zone", "utilization",
    "active_non_housekeeping", "clamp_excess_Wh", "clamp_deficit_Wh", "dose_fraction",
)
LINK_COLUMNS = ("bundle", "task_id", "purpose", "contact", "src", "dst", "kind", "tx_start_s", "tx_end_s", "arrival_s", "bits")
ORCH_COLUMNS = ("t_s", "tier", "action", "task_id", "nodes", "detail")


def _csv_bytes(columns: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue().encode()


@dataclass
class MetricsLedger:
    header: dict
    tasks: list[tuple]
    energy: list[tuple]
    links: list[tuple]
    orchestration: list[tuple]
    summary: dict

    def files(self) -> dict[str, bytes]:
        summary = {"header": self.header, "summary": self.summary}
        return {
            "tasks.csv": _csv_bytes(TASK_COLUMNS, self.tasks),
            "energy.csv": _csv_bytes(ENERGY_COLUMNS, self.energy),
            "links.csv": _csv_bytes(LINK_COLUMNS, self.links),
            "orchestration.csv": _csv_bytes(ORCH_COLUMNS, self.orchestration),
            "summary.json": (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode(),
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, data in self.files().items():
            p = out / name
            p.write_bytes(data)
            paths.append(p)
        return paths


def merge_ledgers(*parts: Mapping[tuple, dict]) -> dict[tuple, dict]:
    """Commutative, associative union of keyed run summaries.

    Each part maps ``(point_label, seed)`` to a summary; a key present in
    several parts must carry identical summaries.
    """
    out: dict[tuple, dict] = {}
    for part in parts:
        for k, v in part.items():
            if k in out and out[k] != v:
                raise ValueError(f"conflicting results for {k}")
            out[k] = v
    return dict(sorted(out.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])))


# --- runtime records ------------------------------------------------------------------


@dataclass
class TaskRecord:
    task: Task
    status: str = "scheduled"  # scheduled|waiting|active|completed|missed
    reason: str = ""
    exec_node: int | None = None
    exec_start: float | None = None
    exec_end: float | None = None
    completion: float | None = None
    migrations: int = 0
    replicas: int = 1
    forwards: int = 0
    serving: int | None = None

    @property
    def terminal(self) -> bool:
        return self.status in ("completed", "missed")


@dataclass
class Bundle:
    bundle_id: int
    task_id: int
    purpose: str  # input|forward|result|transfer|migrate|placement|control|relay
    src: int
    dst: int
    bits: float
    progress: float = 0.0
    table: PrecomputedTable | None = None


def _percentile(values: Sequence[float], q: float) -> float | None:
    if not values:
        return None
    return float(np.quantile(np.asarray(values, dtype=float), q, method="higher"))


class Simulation:
    """State and event handlers for one run."""

    def __init__(self, scenario: Scenario, contacts: Sequence[Contact] | None = None,
                 watchdog: bool | None = None) -> None:
        self.scenario = scenario
        m = self.m = scenario.model
        self.rng = RngStreams(m.seed)
        self.world = build_world(m)
        w = self.world
        self.n = len(w.names)
        self.horizon = float(m.horizon_s)
        self.mode = m.mode
        self.dt = float(m.engine.physics_dt_s)
        self.policy = ZonePolicy(**m.zone_policy.model_dump())
        self.weights = CostWeights(**m.cost_weights.model_dump())
        self.orc = m.orchestrator
        self.watchdog_enabled = self.orc.watchdog if watchdog is None else watchdog
        self.nominal_plan = sorted(contacts, key=Contact.sort_key) if contacts is not None else list(w.plan)
        outage = OutageModel(m.outage_model.outage_rate_per_s, m.outage_model.reacquisition_mean_s)
        realized = apply_outages(self.nominal_plan, outage, self.rng.stream("outages"))
        self.blackouts = [(b.start_s, b.end_s) for b in m.feeder_blackouts]
        for s, e in self.blackouts:
            realized = remove_contacts(realized, ContactKind.FEEDER, s, e)
        self.realized_plan = realized
        self.isl_availability = availability(self.nominal_plan, realized, ContactKind.ISL)

        self._build_nodes()
        slots = max(1, int(math.ceil(self.horizon / m.engine.slot_s - 1e-9)))
        flat = [NodeForecast.constant(slots, EnergyZone.GREEN, 0.0) for _ in range(self.n)]
        self.graph = TimeExpandedGraph(self.infos, realized, m.engine.slot_s, slots, flat,
                                       outage_rate_per_s=m.outage_model.outage_rate_per_s,
                                       thermal_gate=self.policy.thermal_gate)
        self._plan_starts = [c.start_s for c in realized]
        self._plan_maxdur = max((c.duration_s for c in realized), default=0.0)
        self.reservations = Reservations()
        self.queue = EventQueue()
        self.audit = AccessAudit()
        self.records: dict[int, TaskRecord] = {}
        self.dependents: dict[int, list[int]] = {}
        self.bundles: dict[int, Bundle] = {}
        self._bundle_seq = 0
        self.held: list[Bundle] = []
        self._retry_pending = False
        self.geo_pending: list[tuple[int, int]] = []
        self.tables: dict[int, PrecomputedTable] = {}
        self.degraded: set[int] = set()
        self.tx_segments: dict[int, list[tuple[float, float, float]]] = {i: [] for i in range(self.n)}
        self.energy_rows: list[tuple] = []
        self.link_rows: list[tuple] = []
        self.orch_rows: list[tuple] = []
        self.flags: dict[str, int] = {f.value: 0 for f in Flag}
        self.red_violations = 0
        self.red_node_steps = 0
        self.sla_multiplier = 1.0
        self.sla_window: list[tuple[TaskClass, float | None]] = []
        self.last_plan_graph = None
        self.last_plan_time = None
        self.energy_acc = {i: [0.0, 0.0, 0.0, 0.0] for i in self.power}  # harvest J, load J, excess Wh, deficit Wh
        self.soc0 = {i: st.soc_Wh for i, st in self.power.items()}
        self.compute_energy_J = 0.0
        self.geo_controller = min(w.of_layer(Layer.GEO), default=None)
        self.meo_controllers = w.of_layer(Layer.MEO)
        self.leo = w.of_layer(Layer.LEO)
        self.handovers = 0
        self.leo_completions: list[float] = []
        self._feeder_windows: dict[int, list[tuple[float, float]]] | None = None

    # -- setup -------------------------------------------------------------------------

    def _build_nodes(self) -> None:
        m, w = self.m, self.world
        overrides = {o.node: o for o in m.node_overrides}
        unknown = sorted(set(overrides) - set(w.names))
        if unknown:
            from .scenario import ScenarioError

            raise ScenarioError([f"node_overrides: unknown node {u!r}" for u in unknown])
        self.nodes: dict[int, Node] = {}
        self.specs: dict[int, NodeSpec] = {}
        self.power: dict[int, PowerThermalState] = {}
        self.zone: dict[int, EnergyZone] = {}
        self.infos: list[NodeInfo] = []
        for i, (name, layer) in enumerate(zip(w.names, w.layers)):
            if layer is Layer.GROUND:
                self.infos.append(NodeInfo(i, layer, name, compute=False, nominal_capacity=0.0))
                continue
            if layer is Layer.LUNAR:
                lc = m.constellation.lunar
                spec = NodeSpec(i, layer, lc.compute_capacity, name=name)
                self.specs[i] = spec
                self.nodes[i] = Node(spec)
                self.infos.append(NodeInfo(i, layer, name, True, lc.compute_capacity, 0.0, 0.0, 0.0,
                                           0.1 * lc.compute_capacity * 60.0))
                continue
            cfg = getattr(m.node_specs, layer.value)
            o = overrides.get(name)
            get = lambda k: getattr(o, k) if o is not None and getattr(o, k) is not None else getattr(cfg, k)  # noqa: E731
            pw = get("power")
            th = get("thermal")
            power = PowerSpec(**pw.model_dump())
            thermal = ThermalSpec(**{k: v for k, v in th.model_dump().items() if k != "initial_temperature_K"})
            tol = get("tid_tolerance_krad")
            if not isinstance(tol, (int, float)):
                lo, hi = tol
                tol = float(self.rng.stream("tid_tolerance", i).uniform(lo, hi)) if hi > lo else float(lo)
            health = NodeHealth(get("initial_dose_krad"), float(tol), get("seu_rate_per_s"))
            cap = get("compute_capacity")
            spec = NodeSpec(i, layer, cap, cfg.storage_bits, cfg.isl_terminals, power, thermal, get("max_concurrent"), name)
            self.specs[i] = spec
            self.nodes[i] = Node(spec, health, get("dose_rate_krad_per_year"))
            soc = get("initial_soc_fraction") * power.battery_capacity_Wh
            st = PowerThermalState(soc, th.initial_temperature_K, thermal_headroom=thermal_headroom(thermal, power.p_idle_W))
            st = replace(st, zone=compute_zone(st, power, self.policy, self._zone_forecast(i, 0.0, power.p_idle_W)))
            self.power[i] = st
            self.zone[i] = st.zone
            self.infos.append(NodeInfo(i, layer, name, cap > 0, cap, cfg.energy_per_unit_Wh, power.p_tx_W_per_bps,
                                       risk_rate(health), 0.1 * cap * 60.0))

    def _zone_forecast(self, i: int, t: float, load: float) -> ZoneForecast:
        ecl = self.world.eclipses.get(i, [])
        return ZoneForecast(eclipse_remaining(t, ecl, self.policy.forecast_margin_s), 0.0, load)

    def _eclipsed(self, i: int, t: float) -> bool:
        for s, e in self.world.eclipses.get(i, ()):
            if s > t:
                return False
            if t < e:
                return True
        return False

    def _generate_tasks(self) -> list[Task]:
        m, w = self.m, self.world
        tasks: list[Task] = []
        next_id = 0
        consts = w.geometry.constants
        leo_orbits = [(i, w.orbits[i]) for i in self.leo]
        self.cohorts = []
        self._cohort_of: dict[int, int] = {}
        for ci, c in enumerate(m.cohorts):
            tpl = TaskTemplate(TaskClass(c.template.task_class), c.template.input_bits, c.template.compute_demand_units,
                               c.template.output_bits, c.template.deadline_s, c.template.replication_k)
            cohort = HandsetCohort(ci, c.latitude_deg, c.longitude_deg, c.population,
                                   Mmpp(c.rate_low_per_s, c.rate_high_per_s, c.switch_low_to_high_per_s, c.switch_high_to_low_per_s),
                                   c.min_elevation_deg, tpl)
            new = generate_arrivals(cohort, (0.0, self.horizon), self.rng.stream("traffic", 0, ci), next_id)
            new = [replace(t, workload=f"dhts:{c.name}") for t in new]
            next_id += len(new)
            tasks += new
            for t in new:
                self._cohort_of[t.task_id] = ci
            grid = np.arange(0.0, self.horizon + self.dt, self.dt)
            gs = station_positions(cohort.station, grid, m.earth_rotation, consts)
            elev = np.empty((len(leo_orbits), len(grid)))
            rng = np.empty_like(elev)
            for k, (_, orbit) in enumerate(leo_orbits):
                elev[k], rng[k] = elevation_and_range(positions(orbit, grid, consts), gs)
            self.cohorts.append((cohort, grid, elev, rng))
        eo = m.workloads.eo
        if eo is not None:
            if eo.satellites in ("all", "leo"):
                sats = self.leo if eo.satellites == "leo" else sorted(w.orbits)
            else:
                ids = w.ids
                missing = [s for s in eo.satellites if s not in ids]
                if missing:
                    from .scenario import ScenarioError

                    raise ScenarioError([f"workloads.eo.satellites: unknown node {s!r}" for s in missing])
                sats = sorted(ids[s] for s in eo.satellites)
            until = self.horizon if eo.end_s is None else min(self.horizon, eo.end_s)
            sched = periodic_schedule(eo.start_s, eo.interval_s, until, eo.input_bits)
            for s in sats:
                new = generate_eo_workload(s, sched, eo.compression_ratio, eo.compute_units_per_bit, next_id)
                next_id += len(new)
                tasks += new
        bulk = m.workloads.bulk
        if bulk is not None:
            origin = w.ids[bulk.origin]
            for t, _ in periodic_schedule(bulk.start_s, bulk.interval_s, self.horizon, bulk.input_bits):
                tasks.append(Task(next_id, TaskClass.BULK_TRAINING, t, origin, bulk.input_bits, bulk.compute_demand_units,
                                  bulk.output_bits, None, bulk.replication_k, "bulk"))
                next_id += 1
        hk = m.workloads.housekeeping
        if hk is not None:
            for s in sorted(self.power):
                for t, _ in periodic_schedule(0.0, hk.interval_s, self.horizon, 0.0):
                    tasks.append(Task(next_id, TaskClass.HOUSEKEEPING, t, s, 0.0, hk.compute_demand_units, 0.0,
                                      None, 1, "housekeeping", ships_result=False))
                    next_id += 1
        return tasks

    # -- logging helpers ------------------------------------------------------------------

    def _orch(self, t: float, tier: str, action: str, task_id: int | None = None, nodes: Sequence[int] = (), detail: str = "") -> None:
        self.orch_rows.append((t, tier, action, "" if task_id is None else task_id, " ".join(str(x) for x in nodes), detail))

    def _flag(self, t: float, tier: str, flag: Flag, subject: int | None = None, detail: str = "") -> None:
        self.flags[flag.value] += 1
        self._orch(t, tier, f"flag:{flag.value}", subject, (), detail)

    # -- routing ----------------------------------------------------------------------------

    def _blocked(self) -> set[int]:
        return {i for i, nd in self.nodes.items() if not nd.alive}

    def _send(self, t: float, bundle_args: dict, dsts: Sequence[int]) -> bool:
        """Route a bundle from ``src`` to the best of ``dsts`` over the realized plan."""
        src = bundle_args["src"]
        bits = bundle_args["bits"]
        if bundle_args.get("purpose") in ("result", "transfer", "relay"):
            bits = bits + self.m.engine.telemetry_bits
        b = Bundle(self._bundle_seq, dst=-1, **{**bundle_args, "bits": bits})
        self._bundle_seq += 1
        if src in dsts:
            b.dst = src
            self.bundles[b.bundle_id] = b
            self.queue.push(t, PRIORITY_COMPLETION, "bundle", b.bundle_id)
            return True
        try:
            route = earliest_delivery_to_any(self.graph, src, dsts, t, max(bits, 1.0), self.reservations, self._blocked())
        except NoRoute:
            b.dst = dsts[0] if len(dsts) == 1 else -1
            self.held.append((b, tuple(dsts)))
            self._schedule_retry(t)
            return False
        self._commit(b, route)
        return True

    def _commit(self, b: Bundle, route: Route) -> None:
        b.dst = route.hops[-1].dst
        self.reservations.apply_route(route)
        self.bundles[b.bundle_id] = b
        for h in route.hops:
            c = self.graph.contacts[h.contact]
            if h.src in self.power:
                for s, e in h.segments:
                    self.tx_segments[h.src].append((s, e, c.rate_bps))
            self.link_rows.append((b.bundle_id, b.task_id, b.purpose, h.contact, h.src, h.dst, c.kind.value,
                                   h.tx_start, h.tx_end, h.arrival, h.bits))
        prio = PRIORITY_CONTROL if b.purpose == "control" else PRIORITY_COMPLETION
        self.queue.push(route.delivery_time, prio, "bundle", b.bundle_id)

    def _schedule_retry(self, t: float) -> None:
        if not self._retry_pending:
            self._retry_pending = True
            self.queue.push(t + self.m.engine.retry_interval_s, PRIORITY_CONTROL, "retry")

    def _retry(self, t: float) -> None:
        self._retry_pending = False
        held, self.held = self.held, []
        for b, dsts in held:
            rec = self.records.get(b.task_id)
            if rec is not None and rec.terminal and b.purpose != "control":
                continue
            if b.purpose == "control" and b.table is not None and b.table.valid_until < t:
                continue
            try:
                route = earliest_delivery_to_any(self.graph, b.src, dsts, t, max(b.bits, 1.0), self.reservations, self._blocked())
            except NoRoute:
                self.held.append((b, dsts))
                continue
            self._commit(b, route)
        if self.held:
            self._schedule_retry(t)

    def _reachable(self, a: int, b: int, t: float) -> bool:
        try:
            earliest_delivery_route(self.graph, a, b, t, 1.0, self.reservations, self._blocked())
            return True
        except NoRoute:
            return False

    # -- task lifecycle ------------------------------------------------------------------------

    def _complete(self, rec: TaskRecord, t: float) -> None:
        if rec.terminal:
            return
        rec.status = "completed"
        rec.completion = t
        self._cancel_copies(rec.task.task_id)
        self.sla_window.append((rec.task.task_class, t - rec.task.arrival_time_s))
        for dep in self.dependents.pop(rec.task.task_id, []):
            self._release(self.records[dep], t)

    def _miss(self, rec: TaskRecord, t: float, reason: str) -> None:
        if rec.terminal:
            return
        rec.status = "missed"
        rec.reason = reason
        rec.completion = None
        self._cancel_copies(rec.task.task_id)
        self.sla_window.append((rec.task.task_class, None))
        for dep in self.dependents.pop(rec.task.task_id, []):
            self._miss(self.records[dep], t, "dependency_missed")

    def _cancel_copies(self, tid: int) -> None:
        for nd in self.nodes.values():
            if any(e.task_id == tid for e in nd.running):
                nd.running = [e for e in nd.running if e.task_id != tid]
            if any(e.task_id == tid for e in nd.queue):
                nd.queue = deque(e for e in nd.queue if e.task_id != tid)
        self.geo_pending = [(x, n) for x, n in self.geo_pending if x != tid]

    def _release(self, rec: TaskRecord, t: float) -> None:
        """A dependent task becomes active where its parent ran."""
        parent = self.records[rec.task.depends_on]
        at = parent.exec_node if parent.exec_node is not None else rec.task.origin
        self.queue.push(max(t, self.queue.last_time), PRIORITY_TRAFFIC, "arrival", (rec.task.task_id, at))

    def _arrival(self, t: float, tid: int, at: int | None) -> None:
        rec = self.records[tid]
        task = rec.task
        if rec.terminal:
            return
        if at is None:
            serving = self._serving(task, t)
            if serving is None:
                self._miss(rec, t, "no_coverage")
                return
            sat, slant = serving
            rec.serving = sat
            # handset uplink: serialisation plus propagation, then the task appears on board
            delay = task.input_bits / self.m.links.access_bps + slant / self.world.geometry.constants.c
            self.queue.push(t + delay, PRIORITY_TRAFFIC, "arrival", (tid, sat))
            return
        rec.status = "active"
        if at in self.nodes and not self.nodes[at].alive:
            self._miss(rec, t, "node_failure")
            return
        if task.task_class is TaskClass.HOUSEKEEPING:
            self._execute_or_queue(at, TaskExecution(task, at, t, available_from=t), t)
            return
        if self.mode == "relay_only":
            self._relay(rec, at, t)
            return
        if task.is_pure_transfer:
            if not self.world.gateways:
                self._miss(rec, t, "no_gateway")
                return
            if task.input_bits == 0 or at in self.world.gateways:
                rec.exec_node = at
                self._complete(rec, t)
                return
            self._send(t, dict(task_id=tid, purpose="transfer", src=at, bits=task.input_bits), self.world.gateways)
            return
        if task.task_class in GLOBAL_CLASSES and self.geo_controller is not None:
            self.geo_pending.append((tid, at))
            self._orch(t, ControllerTier.GEO_GLOBAL.value, "pending", tid, (at,))
            return
        if self.world.layers[at] is Layer.GROUND:
            # ground-originated work without a global planner goes to the nearest compute node
            cands = [i for i, nd in self.nodes.items() if nd.alive and nd.capacity > 0 and i not in self.degraded]
            if not cands:
                self._miss(rec, t, "no_compute")
                return
            self._send(t, dict(task_id=tid, purpose="placement", src=at, bits=task.input_bits), cands)
            return
        self._local(rec, at, t)

    def _serving(self, task: Task, t: float) -> tuple[int, float] | None:
        """Max-elevation live LEO over the task's cohort and its slant range (km)."""
        cohort, grid, elev, rng = self.cohorts[self._cohort_of[task.task_id]]
        k = min(len(grid) - 1, int(round(t / self.dt)))
        best, best_el = None, -math.inf
        for row, sid in enumerate(self.leo):
            if not self.nodes[sid].alive:
                continue
            el = elev[row, k]
            if el >= cohort.min_elevation_deg and el > best_el:
                best, best_el = (sid, float(rng[row, k])), el
        return best

    def _relay(self, rec: TaskRecord, at: int, t: float) -> None:
        task = rec.task
        if at in self.world.gateways or task.input_bits == 0:
            rec.exec_node = at
            self._complete(rec, t)
            return
        if task.task_class is TaskClass.STORAGE_RETRIEVAL and task.depends_on is not None:
            # the raw product already went down; the ground derives this output in place
            rec.exec_node = self.records[task.depends_on].exec_node
            self._complete(rec, t)
            return
        if not self.world.gateways:
            self._miss(rec, t, "no_gateway")
            return
        self._send(t, dict(task_id=task.task_id, purpose="relay", src=at, bits=task.input_bits), self.world.gateways)

    def _lightweight(self, node: int, task: Task) -> bool:
        return is_lightweight(task.compute_demand_units, self.nodes[node].capacity)

    def _can_start(self, node: int, ex: TaskExecution) -> bool:
        nd = self.nodes[node]
        if not nd.alive or nd.capacity <= 0 or len(nd.running) >= nd.spec.max_concurrent:
            return False
        cls = ex.task.task_class
        if node in self.degraded and cls is not TaskClass.HOUSEKEEPING:
            return False
        return zone_permits(self.zone.get(node, EnergyZone.GREEN), cls, self._lightweight(node, ex.task))

    def _start(self, node: int, ex: TaskExecution, t: float) -> None:
        nd = self.nodes[node]
        ex.node_id = node
        ex.available_from = t
        nd.running.append(ex)
        rec = self.records[ex.task_id]
        rec.exec_node = node
        if rec.exec_start is None:
            rec.exec_start = t

    def _execute_or_queue(self, node: int, ex: TaskExecution, t: float) -> None:
        if node not in self.nodes:
            self._miss(self.records[ex.task_id], t, "no_compute")
            return
        if not self.nodes[node].alive:
            self._miss(self.records[ex.task_id], t, "node_failure")
            return
        if self._can_start(node, ex):
            self._start(node, ex, t)
        else:
            ex.node_id = node
            self.nodes[node].queue.append(ex)

    def _snapshot(self, i: int, t: float) -> NodeSnapshot:
        nd = self.nodes[i]
        st = self.power.get(i)
        return NodeSnapshot(
            i, self.world.layers[i], t, self.zone.get(i, EnergyZone.GREEN), nd.capacity, nd.spec.compute_capacity,
            nd.spec.max_concurrent - len(nd.running) if nd.alive else 0,
            tuple(e.task for e in nd.queue),
            tuple(RunningInfo(e.task, e.progress, e.checkpoint_progress) for e in nd.running),
            nd.health, nd.alive, i in self.degraded,
            st.soc_Wh if st else 0.0, st.load_W if st and st.load_W else (nd.spec.power.p_idle_W if nd.spec.power else 0.0),
            st.thermal_headroom if st else 1.0, nd.spec.power, nd.spec.thermal,
        )

    def _local(self, rec: TaskRecord, at: int, t: float, progress: float = 0.0) -> None:
        task = rec.task
        ex = TaskExecution(task, at, t, progress, progress, available_from=t)
        if self.world.layers[at] is not Layer.LEO:
            self._execute_or_queue(at, ex, t)
            return
        snap = self._snapshot(at, t)
        d = leo_local_decide(snap, task, self.tables.get(at), t, self._lightweight(at, task),
                             unreachable=self._blocked(), audit=self.audit)
        tier = ControllerTier.LEO_LOCAL.value
        if d.flag is Flag.STALE_TABLE:
            self._flag(t, tier, Flag.STALE_TABLE, task.task_id, f"node={at}")
        if d.action is Action.EXECUTE:
            self._start(at, ex, t)
            self._orch(t, tier, "execute", task.task_id, (at,))
        elif d.action is Action.FORWARD and rec.forwards < self.orc.max_forwards:
            rec.forwards += 1
            self._orch(t, tier, "forward", task.task_id, (at, d.next_hop))
            self._send(t, dict(task_id=task.task_id, purpose="forward", src=at, bits=task.input_bits, progress=progress),
                       (d.next_hop,))
        else:
            ex.node_id = at
            self.nodes[at].queue.append(ex)
            self._orch(t, tier, "queue", task.task_id, (at,))

    def _bundle(self, t: float, bid: int) -> None:
        b = self.bundles.pop(bid)
        if b.purpose == "control":
            cur = self.tables.get(b.dst)
            if cur is None or b.table.issued_at >= cur.issued_at:
                self.tables[b.dst] = b.table
                self._orch(t, ControllerTier.GEO_GLOBAL.value, "table_install", None, (b.dst,),
                           f"valid_until={b.table.valid_until!r}")
            return
        rec = self.records[b.task_id]
        if rec.terminal:
            return
        if b.purpose in ("result", "transfer", "relay"):
            if b.purpose == "relay":
                rec.exec_node = b.dst
            self._complete(rec, t)
            return
        if b.dst in self.nodes and not self.nodes[b.dst].alive:
            if not self._live_copies(b.task_id, exclude_bundle=bid):
                self._miss(rec, t, "node_failure")
            return
        if b.purpose == "forward":
            self._local(rec, b.dst, t, b.progress)
        else:  # migrate, placement
            ex = TaskExecution(rec.task, b.dst, t, b.progress, b.progress, available_from=t)
            self._execute_or_queue(b.dst, ex, t)

    def _live_copies(self, tid: int, exclude_bundle: int | None = None) -> int:
        n = 0
        for nd in self.nodes.values():
            n += sum(1 for e in nd.running if e.task_id == tid) + sum(1 for e in nd.queue if e.task_id == tid)
        n += sum(1 for b in self.bundles.values() if b.task_id == tid and b.purpose != "control" and b.bundle_id != exclude_bundle)
        n += sum(1 for b, _ in self.held if b.task_id == tid and b.purpose != "control")
        n += sum(1 for x, _ in self.geo_pending if x == tid)
        return n

    def _compute_done(self, ex: TaskExecution, node: int, tau: float, t: float) -> None:
        rec = self.records[ex.task_id]
        if rec.terminal:
            return
        rec.exec_end = tau
        rec.exec_node = node
        if self.world.layers[node] is Layer.LEO and ex.task.task_class is not TaskClass.HOUSEKEEPING:
            self.leo_completions.append(tau)
        task = ex.task
        if task.ships_result and task.output_bits > 0 and task.task_class is not TaskClass.HOUSEKEEPING:
            if not self.world.gateways:
                self._complete(rec, tau)
                return
            self._send(t, dict(task_id=task.task_id, purpose="result", src=node, bits=task.output_bits), self.world.gateways)
        else:
            self._complete(rec, tau)

    # -- physics ------------------------------------------------------------------------------

    def _tx_load(self, i: int, a: float, b: float) -> float:
        segs = self.tx_segments[i]
        if not segs:
            return 0.0
        p = self.specs[i].power.p_tx_W_per_bps if self.specs[i].power else 0.0
        energy = 0.0
        keep = []
        for s, e, rate in segs:
            ov = min(e, b) - max(s, a)
            if ov > 0:
                energy += p * rate * ov
            if e > b:
                keep.append((s, e, rate))
        self.tx_segments[i] = keep
        return energy / (b - a)

    def _physics(self, t: float) -> None:
        dt = self.dt
        a = t - dt
        ckpt = self.m.engine.checkpoint_interval_s
        for i in sorted(self.nodes):
            nd = self.nodes[i]
            tx = self._tx_load(i, a, t)
            zone_during = self.zone.get(i, EnergyZone.GREEN)
            was_alive = nd.alive
            if nd.alive:
                out = execute_step(nd, dt, a, tx, ckpt)
            else:
                out = None
            active_nh = 0
            if out is not None:
                active_nh = sum(1 for tid in out.progressed if self.records[tid].task.task_class is not TaskClass.HOUSEKEEPING)
            if i in self.power:
                spec = self.specs[i]
                st = self.power[i]
                if zone_during is EnergyZone.RED:
                    self.red_node_steps += 1
                    if active_nh:
                        self.red_violations += active_nh
                load = out.energy_load_W if out is not None else spec.power.p_idle_W + tx
                if out is not None:
                    self.compute_energy_J += spec.power.p_compute_max_W * out.utilization * dt
                ecl = self._eclipsed(i, a + 0.5 * dt)
                new = step_energy_thermal(st, spec.power, spec.thermal, load, ecl, dt, self.world.geometry.constants)
                if new.clamp_deficit_Wh > 0:
                    raise InvariantViolation("non_negative_soc",
                                             f"node {self.world.names[i]} battery would reach {-new.clamp_deficit_Wh!r} Wh at t={t}")
                acc = self.energy_acc[i]
                acc[0] += new.harvest_W * dt
                acc[1] += load * dt
                acc[2] += new.clamp_excess_Wh
                acc[3] += new.clamp_deficit_Wh
                zone = compute_zone(new, spec.power, self.policy, self._zone_forecast(i, t, load))
                if not nd.alive:
                    zone = EnergyZone.RED
                self.power[i] = replace(new, zone=zone)
                self.zone[i] = zone
                self.energy_rows.append((t, i, new.soc_Wh, new.harvest_W, load, new.radiator_temperature_K, zone_during.label,
                                         out.utilization if out else 0.0, active_nh, new.clamp_excess_Wh,
                                         new.clamp_deficit_Wh, nd.health.dose_fraction))
            # radiation
            if nd.alive and nd.dose_rate_krad_per_year > 0:
                nd.health = accumulate_dose(nd.health, nd.dose_rate_krad_per_year, dt)
            if nd.alive and nd.health.seu_rate_per_s > 0:
                k = sample_seu_faults(nd.health, dt, self.rng.stream("seu", i))
                if k:
                    hit = apply_seu_faults(nd.running, k, self.rng.stream("seu", i))
                    self._orch(t, "Node", "seu_rollback", None, (i,), " ".join(map(str, hit)))
            if out is not None:
                for ex, tau in out.completed:
                    self._compute_done(ex, i, tau, t)
            if was_alive and not nd.alive:
                self._node_failed(i, t)
                continue
            if self.zone.get(i) is EnergyZone.RED:
                self._suspend(i, t)
            self._drain_queue(i, t)

    def _node_failed(self, i: int, t: float) -> None:
        nd = self.nodes[i]
        self._orch(t, "Node", "node_failure", None, (i,))
        victims = [e.task_id for e in nd.running] + [e.task_id for e in nd.queue]
        nd.running = []
        nd.queue = deque()
        for tid in victims:
            if not self._live_copies(tid):
                self._miss(self.records[tid], t, "node_failure")

    def _suspend(self, i: int, t: float) -> None:
        nd = self.nodes[i]
        keep, moved = [], []
        for e in nd.running:
            (keep if e.task.task_class is TaskClass.HOUSEKEEPING else moved).append(e)
        if not moved:
            return
        nd.running = keep
        for e in reversed(moved):
            e.rollback()
            nd.queue.appendleft(e)
        self._orch(t, "Node", "suspend_red", None, (i,), " ".join(str(e.task_id) for e in moved))

    def _drain_queue(self, i: int, t: float) -> None:
        nd = self.nodes[i]
        if not nd.queue:
            return
        rest = deque()
        while nd.queue:
            e = nd.queue.popleft()
            rec = self.records[e.task_id]
            dl = e.task.absolute_deadline
            if e.task.task_class.delay_sensitive and dl is not None and dl < t:
                if self._live_copies(e.task_id) == 0:
                    self._miss(rec, t, "deadline")
                continue
            if self._can_start(i, e):
                self._start(i, e, t)
            else:
                rest.append(e)
        nd.queue = rest

    # -- control ------------------------------------------------------------------------------

    def _planning_context(self) -> PlanningContext:
        o = self.orc
        return PlanningContext(
            self.infos, self._window_contacts, self.world.eclipses, self.world.gateways, self.policy, self.weights,
            self.m.engine.slot_s, o.geo_epoch_s, o.planning_horizon_s or 2 * o.geo_epoch_s, o.table_validity_s,
            1e6, o.replication_risk_threshold, self.m.outage_model.outage_rate_per_s, self.horizon,
        )

    @property
    def _window_contacts(self) -> list[Contact]:
        return self.realized_plan

    def _contacts_between(self, a: float, b: float) -> list[Contact]:
        lo = bisect.bisect_left(self._plan_starts, a - self._plan_maxdur)
        hi = bisect.bisect_right(self._plan_starts, b)
        return [c for c in self.realized_plan[lo:hi] if c.end_s > a]

    def _ground_gap_end(self, i: int, t: float) -> float:
        """End of the first interval after ``t`` in which node ``i`` has no feeder contact."""
        if self._feeder_windows is None:
            self._feeder_windows = {}
            for c in self.realized_plan:
                if c.kind is ContactKind.FEEDER:
                    self._feeder_windows.setdefault(c.src, []).append((c.start_s, c.end_s))
        wins = self._feeder_windows.get(i, [])
        cur = t
        for s, e in wins:
            if e <= cur:
                continue
            if s > cur:
                return s  # gap [cur, s)
            cur = e
        return self.horizon

    def _snapshots(self, t: float) -> list[NodeSnapshot]:
        return [self._snapshot(i, t) for i in sorted(self.nodes)]

    def _plan(self, t: float, initial: bool = False) -> None:
        horizon = self.orc.planning_horizon_s or 2 * self.orc.geo_epoch_s
        if self.geo_controller is None:
            horizon = self.horizon
        ctx = replace(self._planning_context(), contacts=self._contacts_between(t, t + horizon), horizon_s=horizon)
        validity = {x: self._ground_gap_end(x, t) for x in self.leo}
        if self.geo_controller is None:
            validity = {x: self.horizon for x in self.leo}
        pending = [(self.records[tid].task, at) for tid, at in self.geo_pending]
        plan = geo_global_plan(self.geo_controller if self.geo_controller is not None else -1, self._snapshots(t), ctx, t,
                               pending, self.sla_multiplier, Reservations(), validity_until=validity, audit=self.audit)
        self.last_plan_graph = plan.graph
        self.last_plan_time = t
        tier = ControllerTier.GEO_GLOBAL.value
        self._orch(t, tier, "plan", None, (), f"tables={len(plan.tables)} pending={len(pending)} mult={self.sla_multiplier!r}")
        for flag, subject in plan.flags:
            self._flag(t, tier, flag, subject)
        for x, table in sorted(plan.tables.items()):
            if initial or x == self.geo_controller:
                self.tables[x] = table
                continue
            b = Bundle(self._bundle_seq, -1, "control", self.geo_controller, x, self.orc.control_bundle_bits, table=table)
            self._bundle_seq += 1
            try:
                route = earliest_delivery_route(self.graph, self.geo_controller, x, t, b.bits, self.reservations, self._blocked())
            except NoRoute:
                self._orch(t, tier, "table_undeliverable", None, (x,))
                continue
            self._commit(b, route)
        placed = set()
        for task, decisions in plan.placements:
            at = next(a for tid, a in self.geo_pending if tid == task.task_id)
            rec = self.records[task.task_id]
            rec.replicas = len(decisions)
            placed.add(task.task_id)
            for d in decisions:
                self._orch(t, tier, "place", task.task_id, (at, d.execution_node),
                           f"cost={d.total_cost!r} risk={d.risk!r} completion={d.estimated_completion_s!r}")
                if d.execution_node == at:
                    self._execute_or_queue(at, TaskExecution(task, at, t, available_from=t), t)
                else:
                    self._send(t, dict(task_id=task.task_id, purpose="placement", src=at, bits=task.input_bits),
                               (d.execution_node,))
        self.geo_pending = [(tid, at) for tid, at in self.geo_pending if tid not in placed]

    def _geo_epoch(self, t: float) -> None:
        if self.geo_controller is not None and not self.nodes[self.geo_controller].alive:
            alive = [g for g in self.world.of_layer(Layer.GEO) if self.nodes[g].alive]
            self.geo_controller = min(alive, default=None)
        if self.geo_controller is None:
            return
        if self.sla_window:
            policy = SlaPolicy(self.orc.sla.quantile, {TaskClass(k): v for k, v in self.orc.sla.latency_bound_s.items()},
                               self.orc.sla.max_miss_fraction, self.orc.sla.weight_multiplier, self.orc.sla.max_multiplier)
            rep = sla_monitor(self.sla_window, policy, self.sla_multiplier)
            if not rep.compliant:
                self._flag(t, ControllerTier.GEO_GLOBAL.value, Flag.SLA_RISK, None,
                           "breach=" + ",".join(c.value for c in rep.breaches) + f" miss={rep.miss_fraction!r}")
            self.sla_multiplier = rep.next_multiplier
            self.sla_window = []
        self._plan(t)

    def _meo_epoch(self, t: float) -> None:
        for m in self.meo_controllers:
            if not self.nodes[m].alive:
                continue
            footprint = sorted({c.src for c in self._contacts_between(t, t) if c.dst == m and c.start_s <= t
                                and self.world.layers[c.src] is Layer.LEO})
            if len(footprint) < 2:
                continue
            snaps = [self._snapshot(i, t) for i in footprint]

            def feasible(task: Task, node: int) -> bool:
                return (self.nodes[node].alive and node not in self.degraded and self.nodes[node].capacity > 0
                        and zone_permits(self.zone[node], task.task_class, self._lightweight(node, task)))

            res = meo_regional_rebalance(m, snaps, self.orc.rebalance_threshold, feasible,
                                         lambda a, b: self._reachable(a, b, t), self.audit)
            tier = ControllerTier.MEO_REGIONAL.value
            for flag, subject in res.flags:
                self._flag(t, tier, flag, subject)
            for p in res.plans:
                self._migrate(p, t, tier)

    def _migrate(self, p: MigrationPlan, t: float, tier: str) -> None:
        nd = self.nodes[p.from_node]
        ex = next((e for e in nd.queue if e.task_id == p.task_id), None)
        if ex is None:
            ex = next((e for e in nd.running if e.task_id == p.task_id), None)
            if ex is None:
                return
            nd.running.remove(ex)
        else:
            nd.queue.remove(ex)
        rec = self.records[p.task_id]
        rec.migrations += 1
        self._orch(t, tier, "migrate", p.task_id, (p.from_node, p.to_node),
                   f"trigger={p.trigger.value} progress={p.checkpoint_progress!r}")
        self._send(t, dict(task_id=p.task_id, purpose="migrate", src=p.from_node, bits=max(rec.task.input_bits, 1.0),
                           progress=p.checkpoint_progress), (p.to_node,))

    def _watchdog(self, t: float) -> None:
        if not self.watchdog_enabled:
            return
        sats = [self._snapshot(i, t) for i in sorted(self.nodes)]
        tier = ControllerTier.MEO_REGIONAL if self.meo_controllers else ControllerTier.GEO_GLOBAL
        graph_cache: dict[str, TimeExpandedGraph] = {}

        def graph() -> TimeExpandedGraph:
            if "g" not in graph_cache:
                horizon = self.orc.planning_horizon_s or 2 * self.orc.geo_epoch_s
                ctx = replace(self._planning_context(), contacts=self._contacts_between(t, t + horizon), horizon_s=horizon)
                plan_snaps = [replace(s, degraded=True) if (s.health.dose_fraction > self.orc.dose_threshold) else s for s in sats]
                n_slots = max(1, int(math.ceil(min(horizon, max(ctx.slot_s, self.horizon - t)) / ctx.slot_s - 1e-9)))
                fcs = []
                by_id = {s.node_id: s for s in plan_snaps}
                for info in self.infos:
                    s = by_id.get(info.node_id)
                    fcs.append(NodeForecast.constant(n_slots, EnergyZone.GREEN, 0.0) if s is None
                               else forecast_node(s, self.world.eclipses.get(info.node_id, ()), self.policy, t, ctx.slot_s, n_slots))
                graph_cache["g"] = TimeExpandedGraph(self.infos, ctx.contacts, ctx.slot_s, n_slots, fcs, t,
                                                     ctx.outage_rate_per_s, self.policy.thermal_gate)
            return graph_cache["g"]

        at_risk_ids = {s.node_id for s in sats if s.alive and (
            s.health.dose_fraction > self.orc.dose_threshold
            or failure_risk(s.health, self.orc.watchdog_epoch_s) > self.orc.risk_threshold)}
        if not at_risk_ids:
            return

        def place(task: Task, src: int) -> int | None:
            g = graph()
            cands = [i for i in sorted(self.nodes) if i != src and i not in at_risk_ids and i not in self.degraded
                     and self.nodes[i].alive and self.nodes[i].capacity > 0]
            if not cands:
                return None
            ex = next((e for e in self.nodes[src].running + list(self.nodes[src].queue) if e.task_id == task.task_id), None)
            remaining = task.compute_demand_units * (1.0 - (ex.checkpoint_progress if ex else 0.0))
            try:
                d = place_task(task, g, self.weights, cands, source=src, t0=t, destinations=None,
                               blocked=self._blocked(), demand=remaining)
            except (NoFeasiblePlacement, ValueError):
                return None
            return d.execution_node

        def fallback(task: Task, src: int) -> int | None:
            cands = [i for i in sorted(self.nodes) if i not in at_risk_ids and i not in self.degraded and self.nodes[i].alive
                     and self.nodes[i].capacity > 0]
            if not cands:
                return None
            try:
                r = earliest_delivery_to_any(self.graph, src, cands, t, max(task.input_bits, 1.0), self.reservations, self._blocked())
            except NoRoute:
                return None
            return r.hops[-1].dst if r.hops else None

        res = degradation_watchdog(sats, place, fallback, self.orc.dose_threshold, self.orc.risk_threshold,
                                   self.orc.watchdog_epoch_s, tier, self.audit)
        for node in res.degraded_nodes:
            if node not in self.degraded:
                self.degraded.add(node)
                self._orch(t, tier.value, "degraded", None, (node,), f"dose={self.nodes[node].health.dose_fraction!r}")
        for node, tid in res.checkpointed:
            ex = next((e for e in self.nodes[node].running if e.task_id == tid), None)
            if ex is not None:
                ex.checkpoint()
                self._orch(t, tier.value, "checkpoint", tid, (node,), f"progress={ex.progress!r}")
        for flag, subject in res.flags:
            self._flag(t, tier.value, flag, subject)
        for p in res.plans:
            ex = next((e for e in self.nodes[p.from_node].running if e.task_id == p.task_id), None)
            progress = ex.checkpoint_progress if ex is not None and ex.task.task_class.checkpointable else 0.0
            self._migrate(replace(p, checkpoint_progress=progress), t, tier.value)

    # -- main loop ------------------------------------------------------------------------------

    def run(self) -> MetricsLedger:
        tasks = self._generate_tasks()
        for t in tasks:
            self.records[t.task_id] = TaskRecord(t)
            if t.depends_on is not None:
                self.records[t.task_id].status = "waiting"
                self.dependents.setdefault(t.depends_on, []).append(t.task_id)
            else:
                at = None if t.task_id in self._cohort_of else t.origin
                self.queue.push(t.arrival_time_s, PRIORITY_TRAFFIC, "arrival", (t.task_id, at))
        self._log_handovers()
        q = self.queue
        k = 1
        while k * self.dt <= self.horizon + 1e-9:
            q.push(k * self.dt, PRIORITY_PHYSICS, "physics")
            k += 1
        if self.mode == "in_orbit_compute":
            self._plan(0.0, initial=True)
            if self.geo_controller is not None:
                for t in np.arange(self.orc.geo_epoch_s, self.horizon, self.orc.geo_epoch_s):
                    q.push(float(t), PRIORITY_CONTROL, "geo")
            if self.meo_controllers:
                for t in np.arange(self.orc.meo_epoch_s, self.horizon, self.orc.meo_epoch_s):
                    q.push(float(t), PRIORITY_CONTROL, "meo")
            if self.watchdog_enabled:
                for t in np.arange(self.orc.watchdog_epoch_s, self.horizon, self.orc.watchdog_epoch_s):
                    q.push(float(t), PRIORITY_CONTROL, "watchdog")
        handlers: dict[str, Callable] = {
            "physics": lambda ev: self._physics(ev.time_s),
            "arrival": lambda ev: self._arrival(ev.time_s, *ev.payload),
            "bundle": lambda ev: self._bundle(ev.time_s, ev.payload),
            "geo": lambda ev: self._geo_epoch(ev.time_s),
            "meo": lambda ev: self._meo_epoch(ev.time_s),
            "watchdog": lambda ev: self._watchdog(ev.time_s),
            "retry": lambda ev: self._retry(ev.time_s),
        }
        while q and q.peek_time() <= self.horizon + 1e-9:
            ev = q.pop()
            handlers[ev.kind](ev)
        return self._ledger()

    def _log_handovers(self) -> None:
        from .traffic import detect_handover

        for cohort, grid, elev, _ in self.cohorts:
            prev = None
            ok = elev >= cohort.min_elevation_deg
            masked = np.where(ok, elev, -np.inf)
            best = np.argmax(masked, axis=0)
            for j in range(len(grid)):
                cur = self.leo[best[j]] if ok[best[j], j] else None
                ev = detect_handover(prev, cur, grid[j], cohort.cohort_id)
                if ev is not None:
                    self.handovers += 1
                    self._orch(float(grid[j]), ControllerTier.LEO_LOCAL.value, "handover", None, (ev.from_sat, ev.to_sat),
                               f"cohort={cohort.cohort_id}")
                if cur is not None:
                    prev = cur

    # -- results ---------------------------------------------------------------------------------

    def check_conservation(self) -> dict[str, int]:
        """Every generated task is completed, missed or in flight, and located consistently."""
        resident = Counter(e.task_id for nd in self.nodes.values() for e in list(nd.running) + list(nd.queue))
        elsewhere = Counter(b.task_id for b in self.bundles.values() if b.purpose != "control")
        elsewhere.update(b.task_id for b, _ in self.held if b.purpose != "control")
        elsewhere.update(x for x, _ in self.geo_pending)
        counts = {"completed": 0, "missed": 0, "in_flight": 0}
        for tid, rec in self.records.items():
            copies = resident[tid] + elsewhere[tid]
            if rec.terminal:
                counts[rec.status] += 1
                if resident[tid]:
                    raise InvariantViolation("task_conservation", f"finished task {tid} still resident on a node")
            else:
                counts["in_flight"] += 1
                if rec.status == "active" and copies == 0:
                    raise InvariantViolation("task_conservation", f"task {tid} is active but has no location")
                if copies > rec.task.replication_k:
                    raise InvariantViolation("task_conservation", f"task {tid} has {copies} copies > k")
        if sum(counts.values()) != len(self.records):
            raise InvariantViolation("task_conservation", "generated != completed + missed + in_flight")
        return counts

    def energy_residuals(self) -> dict[int, float]:
        """Per node |Δsoc − ∫(harvest − load)dt − (deficit − excess)| in Wh."""
        out = {}
        for i, (h, l, exc, dfc) in self.energy_acc.items():
            dsoc = self.power[i].soc_Wh - self.soc0[i]
            out[i] = abs(dsoc - (h - l) / 3600.0 - (dfc - exc))
        return out

    def _ledger(self) -> MetricsLedger:
        counts = self.check_conservation()
        residuals = self.energy_residuals()
        cap = {i: self.specs[i].power.battery_capacity_Wh for i in residuals}
        rows = []
        lat_by_wl: dict[str, list[float]] = {}
        ds_total = ds_bad = 0
        for tid in sorted(self.records):
            r = self.records[tid]
            t = r.task
            lat = None if r.completion is None else r.completion - t.arrival_time_s
            dl = t.absolute_deadline
            met = None
            if t.task_class.delay_sensitive and dl is not None and r.terminal:
                met = r.status == "completed" and r.completion <= dl
                ds_total += 1
                ds_bad += not met
            if lat is not None and t.task_class is not TaskClass.HOUSEKEEPING:
                lat_by_wl.setdefault(t.workload.split(":")[0], []).append(lat)
            rows.append((tid, t.workload, t.task_class.value,
                         r.serving if t.origin < 0 else t.origin, t.arrival_time_s, r.status, r.reason, r.exec_node,
                         r.exec_start, r.exec_end, r.completion, lat, "" if met is None else int(met), r.migrations,
                         r.replicas, r.forwards))
        feeder = [row for row in self.link_rows if row[6] == ContactKind.FEEDER.value]
        feeder_bits = float(sum(row[10] for row in feeder))
        feeder_control = float(sum(row[10] for row in feeder if row[2] == "control"))
        all_lat = [x for v in lat_by_wl.values() for x in v]
        completed_nh = sum(1 for r in self.records.values() if r.status == "completed" and r.task.task_class is not TaskClass.HOUSEKEEPING)
        m = self.m
        blackout_tp = {f"{s!r}-{e!r}": sum(1 for x in self.leo_completions if s <= x <= e) for s, e in self.blackouts}
        summary = {
            "tasks_generated": len(self.records),
            **{f"tasks_{k}": v for k, v in counts.items()},
            "completion_rate": counts["completed"] / len(self.records) if self.records else None,
            "feeder_bits": feeder_bits,
            "feeder_bits_data": feeder_bits - feeder_control,
            "feeder_bits_control": feeder_control,
            "latency_mean_s": float(np.mean(all_lat)) if all_lat else None,
            "latency_p95_s": _percentile(all_lat, 0.95),
            "latency_p95_by_workload_s": {k: _percentile(v, 0.95) for k, v in sorted(lat_by_wl.items())},
            "latency_mean_by_workload_s": {k: float(np.mean(v)) for k, v in sorted(lat_by_wl.items())},
            "deadline_miss_rate": ds_bad / ds_total if ds_total else None,
            "energy_per_completed_task_Wh": (self.compute_energy_J / 3600.0 / completed_nh) if completed_nh else None,
            "migrations": sum(r.migrations for r in self.records.values()),
            "flags": dict(sorted(self.flags.items())),
            "red_zone_node_steps": self.red_node_steps,
            "red_zone_violations": self.red_violations,
            "energy_residual_max_Wh": max(residuals.values(), default=0.0),
            "energy_residual_max_fraction": max((residuals[i] / cap[i] for i in residuals), default=0.0),
            "isl_availability": self.isl_availability,
            "handovers": self.handovers,
            "leo_local_completions": len(self.leo_completions),
            "leo_completions_in_blackouts": blackout_tp,
            "watchdog": self.watchdog_enabled,
            "audit": {f"{t}:{s}": n for (t, s), n in sorted(self.audit.counts.items())},
            "contact_plan_sha256": _sha(dump_contacts(self.nominal_plan)),
        }
        header = {
            "scenario": m.name,
            "scenario_sha256": self.scenario.source_hash,
            "seed": m.seed,
            "rng": RNG_ALGORITHM,
            "mode": m.mode,
            "materialized": self.scenario.materialized,
        }
        return MetricsLedger(header, rows, self.energy_rows, self.link_rows, self.orch_rows, summary)


def _sha(text: str) -> str:
    import hashlib

    return hashlib.sha256(text.encode()).hexdigest()


def run(scenario: Scenario, contacts: Sequence[Contact] | None = None, watchdog: bool | None = None) -> MetricsLedger:
    """Simulate ``scenario`` to its horizon and return the metrics ledger."""
    return Simulation(scenario, contacts, watchdog).run()


# --- sweeps ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    point: tuple[tuple[str, Any], ...]
    seed: int
    summary: dict | None
    error: str | None = None
    ledger: MetricsLedger | None = None

    @property
    def label(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.point)


def _sweep_one(args) -> SweepResult:
    scenario, point, seed, keep = args
    try:
        scn = scenario
        for k, v in point:
            scn = with_override(scn, k, v)
        scn = scn.with_seed(seed)
        led = run(scn)
        return SweepResult(point, seed, led.summary, None, led if keep else None)
    except Exception as exc:  # reported per point, sweep continues
        return SweepResult(point, seed, None, f"{type(exc).__name__}: {exc}")


def grid_points(grid: Mapping[str, Sequence[Any]]) -> list[tuple[tuple[str, Any], ...]]:
    import itertools

    if not grid:
        raise ValueError("parameter grid must be non-empty")
    keys = list(grid)
    return [tuple(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def sweep(scenario: Scenario, grid: Mapping[str, Sequence[Any]], seeds: Sequence[int], workers: int = 1,
          order: Sequence[int] | None = None, keep_ledgers: bool = False) -> list[SweepResult]:
    """One run per (grid point, seed); results come back sorted by (point index, seed)."""
    points = grid_points(grid)
    jobs = [(scenario, p, s, keep_ledgers) for p in points for s in seeds]
    idx = list(range(len(jobs))) if order is None else list(order)
    if sorted(idx) != list(range(len(jobs))):
        raise ValueError("order must be a permutation of the job indices")
    results: dict[int, SweepResult] = {}
    if workers <= 1:
        for i in idx:
            results[i] = _sweep_one(jobs[i])
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_sweep_one, jobs[i]): i for i in idx}
            for f in concurrent.futures.as_completed(futs):
                results[futs[f]] = f.result()
    return [results[i] for i in range(len(jobs))]


def aggregate(results: Iterable[SweepResult]) -> dict[tuple, dict]:
    return merge_ledgers(*({(r.label, r.seed): (r.summary if r.error is None else {"error": r.error})} for r in results))


# --- mode comparison -----------------------------------------------------------------------


def compare_modes(scenario: Scenario, modes: Sequence[str] = ("relay_only", "in_orbit_compute"),
                  contacts: Sequence[Contact] | None = None) -> dict:
    """Run the same scenario under each mode and pair the headline metrics."""
    ledgers = {}
    for mode in modes:
        scn = Scenario(scenario.model.model_copy(update={"mode": mode}), scenario.source_hash, scenario.path)
        ledgers[mode] = run(scn, contacts)
    plans = {ledgers[m].summary["contact_plan_sha256"] for m in modes}
    if len(plans) != 1:
        raise InvariantViolation("geometry_identity", "modes produced different contact plans")
    keys = ("feeder_bits", "feeder_bits_data", "feeder_bits_control", "latency_mean_s", "latency_p95_s", "latency_p95_by_workload_s", "deadline_miss_rate",
            "energy_per_completed_task_Wh", "migrations", "tasks_completed", "tasks_missed", "tasks_in_flight")
    report = {
        "scenario": scenario.model.name,
        "scenario_sha256": scenario.source_hash,
        "seed": scenario.model.seed,
        "contact_plan_sha256": plans.pop(),
        "modes": {m: {k: ledgers[m].summary[k] for k in keys} for m in modes},
    }
    if "relay_only" in ledgers and "in_orbit_compute" in ledgers:
        a = ledgers["relay_only"].summary["feeder_bits"]
        b = ledgers["in_orbit_compute"].summary["feeder_bits"]
        report["feeder_reduction_factor"] = a / b if b else None
    report["_ledgers"] = ledgers
    return report
