"""Three-tier control: LEO-local tables, MEO regional balancing, GEO global planning.

Controllers are pure functions over snapshots. They return plans and flags
and never mutate simulation state; the engine applies what they emit.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .contact_graph import (
    Contact,
    NodeForecast,
    NodeInfo,
    TimeExpandedGraph,
    build_time_expanded_graph,
)
from .node_model import NodeHealth, failure_risk
from .orbits import Layer
from .power_thermal import (
    EnergyZone,
    PowerSpec,
    PowerThermalState,
    ThermalSpec,
    ZoneForecast,
    ZonePolicy,
    compute_zone,
    eclipse_remaining,
    harvest_power,
    thermal_headroom,
    zone_permits,
)
from .routing import (
    CostWeights,
    NoFeasiblePlacement,
    NoRoute,
    PlacementDecision,
    Reservations,
    earliest_delivery_to_any,
    place_task,
    replicate_decision,
)
from .tasks import ALL_CLASSES, Task, TaskClass


class ControllerTier(str, enum.Enum):
    LEO_LOCAL = "LeoLocal"
    MEO_REGIONAL = "MeoRegional"
    GEO_GLOBAL = "GeoGlobal"


_TIER_OF_LAYER = {Layer.LEO: ControllerTier.LEO_LOCAL, Layer.MEO: ControllerTier.MEO_REGIONAL, Layer.GEO: ControllerTier.GEO_GLOBAL}


def tier_for_layer(layer: Layer) -> ControllerTier | None:
    """Controller hosted by a node of ``layer``; ground and lunar nodes host none."""
    return _TIER_OF_LAYER.get(Layer(layer))


class Flag(str, enum.Enum):
    STALE_TABLE = "StaleTable"
    SLA_RISK = "SlaRisk"
    DEGRADED_VIEW = "DegradedView"
    UNPROTECTED_TASK = "UnprotectedTask"
    DEGRADED_REPLICATION = "DegradedReplication"


class MigrationTrigger(str, enum.Enum):
    DEGRADATION_FORECAST = "DegradationForecast"
    RED_ZONE = "RedZone"
    NODE_FAILURE = "NodeFailure"
    SLA_RISK = "SlaRisk"


class Action(str, enum.Enum):
    EXECUTE = "execute"
    FORWARD = "forward"
    QUEUE = "queue"


# destination role a class is steered toward when it cannot run where it is
CLASS_ROLE = {
    TaskClass.REAL_TIME_INFERENCE: "compute",
    TaskClass.INTERRUPTIBLE_COMPRESSION: "compute",
    TaskClass.BULK_TRAINING: "geo",
    TaskClass.STORAGE_RETRIEVAL: "gateway",
    TaskClass.HOUSEKEEPING: "compute",
}
RESULT_ROLE = "gateway"


class AccessAudit:
    """Counts state reads per (tier, scope) so tests can check tier containment."""

    def __init__(self) -> None:
        self.counts: Counter = Counter()

    def record(self, tier: ControllerTier, scope: str, n: int = 1) -> None:
        self.counts[(tier.value, scope)] += n

    def scopes(self, tier: ControllerTier) -> set[str]:
        return {s for (t, s), n in self.counts.items() if t == tier.value and n}


def _audit(audit: AccessAudit | None, tier: ControllerTier, scope: str, n: int = 1) -> None:
    if audit is not None:
        audit.record(tier, scope, n)


# --- data types ----------------------------------------------------------------


class TableEntry(NamedTuple):
    next_hop: int | None
    fallback: int | None
    target: int | None


@dataclass(frozen=True)
class PrecomputedTable:
    node_id: int
    valid_from: float
    valid_until: float
    entries: Mapping[tuple[TaskClass, str], TableEntry]
    issued_at: float = 0.0

    def __post_init__(self) -> None:
        if not self.valid_until > self.valid_from:
            raise ValueError("table validity window must be non-empty")
        missing = [c for c in ALL_CLASSES if (c, CLASS_ROLE[c]) not in self.entries]
        if missing:
            raise ValueError(f"table for node {self.node_id} lacks entries for {sorted(m.value for m in missing)}")

    def valid_at(self, t: float) -> bool:
        return self.valid_from <= t <= self.valid_until

    def lookup(self, task_class: TaskClass, role: str | None = None) -> TableEntry:
        return self.entries[(task_class, CLASS_ROLE[task_class] if role is None else role)]

    def same_entries(self, other: "PrecomputedTable") -> bool:
        return dict(self.entries) == dict(other.entries)

    def dump(self) -> str:
        lines = [f"# table node={self.node_id} valid=[{self.valid_from!r},{self.valid_until!r}]"]
        for (cls, role), e in sorted(self.entries.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            lines.append(f"{cls.value} {role} next={e.next_hop} fallback={e.fallback} target={e.target}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SlaPolicy:
    quantile: float = 0.95
    latency_bound_s: Mapping[TaskClass, float] = field(
        default_factory=lambda: {TaskClass.REAL_TIME_INFERENCE: 60.0}
    )
    max_miss_fraction: float = 0.1
    weight_multiplier: float = 2.0
    max_multiplier: float = 8.0

    def __post_init__(self) -> None:
        if not 0 < self.quantile < 1:
            raise ValueError("SLA quantile must lie in (0, 1)")
        if any(not b > 0 for b in self.latency_bound_s.values()):
            raise ValueError("SLA latency bounds must be > 0")
        if not 0 <= self.max_miss_fraction <= 1:
            raise ValueError("max_miss_fraction must lie in [0, 1]")
        if not 1 <= self.weight_multiplier <= self.max_multiplier:
            raise ValueError("need 1 <= weight_multiplier <= max_multiplier")


@dataclass(frozen=True)
class MigrationPlan:
    task_id: int
    from_node: int
    to_node: int
    checkpoint_progress: float
    trigger: MigrationTrigger
    transfer_route: tuple = ()


class RunningInfo(NamedTuple):
    task: Task
    progress: float
    checkpoint_progress: float


@dataclass(frozen=True)
class NodeSnapshot:
    """What a controller may know about one node at ``time_s``."""

    node_id: int
    layer: Layer
    time_s: float = 0.0
    zone: EnergyZone = EnergyZone.GREEN
    capacity: float = 0.0
    nominal_capacity: float = 0.0
    free_slots: int = 0
    queue: tuple[Task, ...] = ()
    running: tuple[RunningInfo, ...] = ()
    health: NodeHealth = NodeHealth()
    alive: bool = True
    degraded: bool = False
    soc_Wh: float = 0.0
    projected_load_W: float = 0.0
    thermal_headroom: float = 1.0
    power: PowerSpec | None = None
    thermal: ThermalSpec | None = None

    @property
    def queue_length(self) -> int:
        return len(self.queue)


class LocalDecision(NamedTuple):
    action: Action
    next_hop: int | None = None
    flag: Flag | None = None


# --- LEO -------------------------------------------------------------------------


def leo_local_decide(
    node: NodeSnapshot,
    task: Task,
    table: PrecomputedTable | None,
    t: float,
    lightweight: bool = True,
    unreachable: Iterable[int] = (),
    audit: AccessAudit | None = None,
) -> LocalDecision:
    """Execute, forward per table, or queue, using only local state and the table."""
    _audit(audit, ControllerTier.LEO_LOCAL, "local")
    if table is None or not table.valid_at(t):
        return LocalDecision(Action.QUEUE, None, Flag.STALE_TABLE)
    cls = task.task_class
    if node.zone is EnergyZone.RED and cls is not TaskClass.HOUSEKEEPING:
        return LocalDecision(Action.QUEUE)
    can_run = (
        node.alive
        and not node.degraded
        and node.capacity > 0
        and zone_permits(node.zone, cls, lightweight)
        and (task.compute_demand_units > 0 or cls is TaskClass.HOUSEKEEPING)
    )
    if can_run and node.free_slots > 0:
        return LocalDecision(Action.EXECUTE)
    if cls is TaskClass.HOUSEKEEPING:
        return LocalDecision(Action.QUEUE)
    entry = table.lookup(cls)
    blocked = set(unreachable)
    for hop in (entry.next_hop, entry.fallback):
        if hop is not None and hop != node.node_id and hop not in blocked:
            return LocalDecision(Action.FORWARD, hop)
    return LocalDecision(Action.QUEUE)


# --- MEO -------------------------------------------------------------------------


@dataclass
class RebalanceResult:
    plans: list[MigrationPlan]
    flags: list[tuple[Flag, int]]


def _ratio(hi: int, lo: int) -> float:
    if hi == 0:
        return 0.0
    return math.inf if lo == 0 else hi / lo


def meo_regional_rebalance(
    controller_id: int,
    snapshots: Sequence[NodeSnapshot],
    threshold: float = 2.0,
    feasible: Callable[[Task, int], bool] | None = None,
    reachable: Callable[[int, int], bool] | None = None,
    audit: AccessAudit | None = None,
) -> RebalanceResult:
    """Move newest queued interruptible tasks from the most to the least loaded footprint node.

    Nodes are ordered by (queue length, node id). Moves stop once the
    max/min queue ratio is within ``threshold``, when the spread is below
    two tasks, or when no feasible move remains.
    """
    if not threshold >= 1:
        raise ValueError("threshold must be >= 1")
    _audit(audit, ControllerTier.MEO_REGIONAL, "footprint", len(snapshots))
    feasible = feasible or (lambda task, node: True)
    reachable = reachable or (lambda a, b: True)
    by_id = {s.node_id: s for s in snapshots if s.alive and s.layer is Layer.LEO}
    queues = {i: list(s.queue) for i, s in by_id.items()}
    plans: list[MigrationPlan] = []
    flags: list[tuple[Flag, int]] = []
    exhausted: set[int] = set()
    while len(queues) >= 2:
        order = sorted(queues, key=lambda i: (len(queues[i]), i))
        lo_len = len(queues[order[0]])
        donors = [i for i in order if i not in exhausted]
        if not donors:
            break
        hi = donors[-1]
        hi_len = len(queues[hi])
        if _ratio(hi_len, lo_len) <= threshold or hi_len - lo_len < 2:
            break
        movable = [task for task in reversed(queues[hi]) if task.task_class.interruptible]
        if not movable:
            flags.append((Flag.SLA_RISK, hi))
            exhausted.add(hi)
            continue
        moved = False
        for task in movable:
            for tgt in order:
                if tgt == hi or len(queues[tgt]) > hi_len - 2:
                    continue
                if not feasible(task, tgt) or not reachable(hi, tgt):
                    continue
                queues[hi].remove(task)
                queues[tgt].append(task)
                plans.append(MigrationPlan(task.task_id, hi, tgt, 0.0, MigrationTrigger.SLA_RISK))
                moved = True
                break
            if moved:
                break
        if not moved:
            exhausted.add(hi)
    return RebalanceResult(plans, flags)


# --- GEO -------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanningContext:
    """Static knowledge available to the global planner."""

    nodes: Sequence[NodeInfo]
    contacts: Sequence[Contact]
    eclipses: Mapping[int, Sequence[tuple[float, float]]]
    gateways: Sequence[int]
    policy: ZonePolicy = ZonePolicy()
    weights: CostWeights = CostWeights()
    slot_s: float = 30.0
    epoch_s: float = 300.0
    horizon_s: float = 600.0
    table_validity_s: float = 900.0
    nominal_bits: float = 1e6
    risk_threshold: float = 0.05
    outage_rate_per_s: float = 0.0
    scenario_end_s: float = math.inf


def forecast_node(
    snap: NodeSnapshot,
    eclipses: Sequence[tuple[float, float]],
    policy: ZonePolicy,
    t0: float,
    slot_s: float,
    n_slots: int,
    k_seu: float = 1.0,
    k_tid: float = 1e-6,
) -> NodeForecast:
    """Per-slot zone, capacity, headroom and risk, projecting the battery at constant load."""
    risk = (snap.health.seu_rate_per_s * k_seu + k_tid * snap.health.dose_fraction) if snap.alive else 0.0
    cap = snap.capacity if (snap.alive and not snap.degraded) else 0.0
    if snap.power is None:
        return NodeForecast.constant(n_slots, EnergyZone.GREEN, cap, 1.0, risk)
    zones = np.empty(n_slots, dtype=np.int8)
    headroom = snap.thermal_headroom
    if snap.thermal is not None:
        headroom = thermal_headroom(snap.thermal, snap.projected_load_W)
    soc = snap.soc_Wh
    full = snap.power.battery_capacity_Wh
    for k in range(n_slots):
        t = t0 + k * slot_s
        state = PowerThermalState(soc, 0.0, thermal_headroom=headroom)
        fc = ZoneForecast(eclipse_remaining(t, eclipses, policy.forecast_margin_s), 0.0, snap.projected_load_W)
        zones[k] = int(compute_zone(state, snap.power, policy, fc))
        mid = t + 0.5 * slot_s
        eclipsed = any(s <= mid < e for s, e in eclipses)
        soc = min(full, max(0.0, soc + (harvest_power(snap.power, eclipsed) - snap.projected_load_W) * slot_s / 3600.0))
    if not snap.alive:
        zones[:] = int(EnergyZone.RED)
    return NodeForecast(zones, np.full(n_slots, cap), np.full(n_slots, headroom), np.full(n_slots, risk))


def _permits_over(graph: TimeExpandedGraph, node: int, cls: TaskClass, k0: int, k1: int, light: bool) -> bool:
    if graph.capacity[node, k0] <= 0:
        return False
    return all(zone_permits(EnergyZone(int(z)), cls, light) for z in graph.zone[node, k0:k1 + 1])


@dataclass
class GeoPlan:
    time_s: float
    tables: dict[int, PrecomputedTable]
    placements: list[tuple[Task, list[PlacementDecision]]]
    unplaced: list[Task]
    flags: list[tuple[Flag, int]]
    graph: TimeExpandedGraph


def build_tables(
    graph: TimeExpandedGraph,
    ctx: PlanningContext,
    t: float,
    leo_nodes: Sequence[int],
    blocked: Iterable[int] = (),
    validity_until: Mapping[int, float] | None = None,
) -> dict[int, PrecomputedTable]:
    """Per-class next hops toward the nearest node able to serve each class."""
    blocked = set(blocked)
    k0 = graph.slot_of(t)
    k1 = graph.slot_of(min(graph.t_end, t + ctx.table_validity_s) - 1e-9)
    n = len(graph.nodes)
    geo = [i for i in range(n) if graph.nodes[i].layer is Layer.GEO and i not in blocked]
    role_sets: dict[tuple[TaskClass, str], frozenset[int]] = {}
    for cls in TaskClass:
        role = CLASS_ROLE[cls]
        if role == "compute":
            light = cls is not TaskClass.REAL_TIME_INFERENCE
            members = frozenset(
                i for i in range(n)
                if graph.nodes[i].compute and i not in blocked and _permits_over(graph, i, cls, k0, k1, light)
                and graph.nodes[i].layer is not Layer.LUNAR
            )
        elif role == "geo":
            members = frozenset(geo) or frozenset(ctx.gateways)
        else:
            members = frozenset(ctx.gateways)
        role_sets[(cls, role)] = members
    role_sets[(TaskClass.REAL_TIME_INFERENCE, RESULT_ROLE)] = frozenset(ctx.gateways)
    tables = {}
    for x in sorted(leo_nodes):
        cache: dict[frozenset, TableEntry] = {}
        entries = {}
        for key, members in role_sets.items():
            targets = members - {x}
            if targets not in cache:
                cache[targets] = _entry(graph, x, targets, t, ctx.nominal_bits, blocked)
            entries[key] = cache[targets]
        for cls in TaskClass:
            entries.setdefault((cls, RESULT_ROLE), entries[(TaskClass.REAL_TIME_INFERENCE, RESULT_ROLE)])
        until = t + ctx.table_validity_s
        if validity_until is not None:
            until = max(until, validity_until.get(x, until))
        tables[x] = PrecomputedTable(x, t, until, entries, issued_at=t)
    return tables


def _entry(graph: TimeExpandedGraph, x: int, targets: frozenset, t: float, bits: float, blocked: set) -> TableEntry:
    if not targets:
        return TableEntry(None, None, None)
    try:
        route = earliest_delivery_to_any(graph, x, targets, t, bits, blocked=blocked)
    except NoRoute:
        return TableEntry(None, None, None)
    if not route.hops:
        return TableEntry(None, None, x)
    nxt = route.hops[0].dst
    fallback = None
    for ci in graph.contacts_from(x, t):
        d = graph.contacts[ci].dst
        if d != nxt and d not in blocked and graph.nodes[d].layer is not Layer.GROUND:
            fallback = d
            break
    return TableEntry(nxt, fallback, route.hops[-1].dst)


def geo_global_plan(
    controller_id: int,
    snapshots: Sequence[NodeSnapshot],
    ctx: PlanningContext,
    t: float,
    pending: Sequence[tuple[Task, int]] = (),
    weight_multiplier: float = 1.0,
    reservations: Reservations | None = None,
    last_snapshot_time: float | None = None,
    validity_until: Mapping[int, float] | None = None,
    audit: AccessAudit | None = None,
) -> GeoPlan:
    """Rebuild forecasts and the planning graph, recompute tables, place pending global tasks.

    ``pending`` holds ``(task, current_node)`` pairs; tasks are placed
    sequentially in deadline order against shared reservations.
    """
    _audit(audit, ControllerTier.GEO_GLOBAL, "global", len(snapshots))
    flags: list[tuple[Flag, int]] = []
    if last_snapshot_time is not None and t - last_snapshot_time > 2 * ctx.epoch_s:
        flags.append((Flag.DEGRADED_VIEW, controller_id))
    horizon = min(ctx.horizon_s, max(ctx.slot_s, ctx.scenario_end_s - t))
    n_slots = max(1, int(math.ceil(horizon / ctx.slot_s - 1e-9)))
    by_id = {s.node_id: s for s in snapshots}
    forecasts = []
    for info in ctx.nodes:
        snap = by_id.get(info.node_id)
        if snap is None:
            forecasts.append(NodeForecast.constant(n_slots, EnergyZone.GREEN, 0.0))
        else:
            forecasts.append(forecast_node(snap, ctx.eclipses.get(info.node_id, ()), ctx.policy, t, ctx.slot_s, n_slots))
    graph = build_time_expanded_graph(
        ctx.contacts, forecasts, ctx.slot_s, ctx.nodes, t_start=t, horizon_s=n_slots * ctx.slot_s,
        outage_rate_per_s=ctx.outage_rate_per_s, thermal_gate=ctx.policy.thermal_gate,
    )
    dead = {s.node_id for s in snapshots if not s.alive}
    leo = [s.node_id for s in snapshots if s.layer is Layer.LEO and s.alive]
    tables = build_tables(graph, ctx, t, leo, dead, validity_until)
    weights = ctx.weights.with_latency_multiplier(weight_multiplier)
    res = Reservations() if reservations is None else reservations
    placements: list[tuple[Task, list[PlacementDecision]]] = []
    unplaced: list[Task] = []
    compute_nodes = [
        i.node_id for i in ctx.nodes
        if i.compute and i.node_id not in dead and not by_id.get(i.node_id, NodeSnapshot(i.node_id, i.layer)).degraded
    ]
    order = sorted(pending, key=lambda p: (p[0].absolute_deadline is None, p[0].absolute_deadline or 0.0, p[0].task_id))
    for task, at in order:
        try:
            d = place_task(task, graph, weights, compute_nodes, source=at, t0=t, destinations=ctx.gateways,
                           reservations=res, blocked=dead)
        except (NoFeasiblePlacement, ValueError):
            unplaced.append(task)
            continue
        decisions, degraded = replicate_decision(
            task, d, graph, weights, ctx.risk_threshold, compute_nodes, source=at, t0=t,
            destinations=ctx.gateways, reservations=res, blocked=dead,
        )
        if degraded:
            flags.append((Flag.DEGRADED_REPLICATION, task.task_id))
        for dec in decisions:
            res.apply(dec)
        placements.append((task, decisions))
    return GeoPlan(t, tables, placements, unplaced, flags, graph)


# --- watchdog and SLA --------------------------------------------------------------


@dataclass
class WatchdogResult:
    plans: list[MigrationPlan]
    checkpointed: list[tuple[int, int]]
    degraded_nodes: list[int]
    flags: list[tuple[Flag, int]]


def degradation_watchdog(
    snapshots: Sequence[NodeSnapshot],
    place: Callable[[Task, int], int | None],
    replicate: Callable[[Task, int], int | None] | None = None,
    dose_threshold: float = 0.9,
    risk_threshold: float = 0.05,
    epoch_s: float = 60.0,
    tier: ControllerTier = ControllerTier.GEO_GLOBAL,
    audit: AccessAudit | None = None,
) -> WatchdogResult:
    """Checkpoint and evacuate work from nodes forecast to degrade.

    ``place(task, from_node)`` returns a target node or ``None``;
    ``replicate`` is the fallback when no single target is feasible.
    """
    _audit(audit, tier, "global" if tier is ControllerTier.GEO_GLOBAL else "footprint", len(snapshots))
    plans: list[MigrationPlan] = []
    checkpointed: list[tuple[int, int]] = []
    degraded: list[int] = []
    flags: list[tuple[Flag, int]] = []
    for snap in sorted(snapshots, key=lambda s: s.node_id):
        if not snap.alive:
            continue
        at_risk = snap.health.dose_fraction > dose_threshold or failure_risk(snap.health, epoch_s) > risk_threshold
        if not at_risk:
            continue
        degraded.append(snap.node_id)
        work = [(r.task, r.progress if r.task.task_class.checkpointable else 0.0) for r in snap.running]
        work += [(task, 0.0) for task in snap.queue]
        for task, progress in work:
            if task.task_class.checkpointable and progress > 0:
                checkpointed.append((snap.node_id, task.task_id))
            target = place(task, snap.node_id)
            if target is None and replicate is not None:
                target = replicate(task, snap.node_id)
            if target is None:
                flags.append((Flag.UNPROTECTED_TASK, task.task_id))
                continue
            plans.append(MigrationPlan(task.task_id, snap.node_id, target, progress,
                                       MigrationTrigger.DEGRADATION_FORECAST))
    return WatchdogResult(plans, checkpointed, degraded, flags)


@dataclass(frozen=True)
class SlaReport:
    quantiles: Mapping[TaskClass, float]
    breaches: tuple[TaskClass, ...]
    miss_fraction: float
    compliant: bool
    next_multiplier: float


def sla_monitor(
    window: Sequence[tuple[TaskClass, float | None]],
    policy: SlaPolicy = SlaPolicy(),
    current_multiplier: float = 1.0,
) -> SlaReport:
    """Compare per-class latency quantiles of ``window`` against the policy.

    Window items are ``(class, latency_s)``; a ``None`` latency is a miss.
    """
    if not window:
        raise ValueError("SLA window must be non-empty")
    by_class: dict[TaskClass, list[float]] = {}
    misses = 0
    for cls, lat in window:
        if lat is None:
            misses += 1
        else:
            by_class.setdefault(TaskClass(cls), []).append(float(lat))
    quantiles = {
        cls: float(np.quantile(np.asarray(v), policy.quantile, method="higher")) for cls, v in sorted(by_class.items(), key=lambda kv: kv[0].value)
    }
    breaches = tuple(cls for cls, q in quantiles.items() if cls in policy.latency_bound_s and q > policy.latency_bound_s[cls])
    miss_fraction = misses / len(window)
    compliant = not breaches and miss_fraction <= policy.max_miss_fraction
    mult = 1.0 if compliant else min(policy.max_multiplier, max(1.0, current_multiplier) * policy.weight_multiplier)
    return SlaReport(quantiles, breaches, miss_fraction, compliant, mult)
