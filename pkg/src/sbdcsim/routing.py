"""Earliest-delivery routing and joint compute placement over a time-expanded graph.

Paths are sequences of contacts. Every hop transmits as early as possible
after the bundle is ready, skipping intervals already reserved on the
contact, so a contact sequence fully determines its timing. Bundles are
atomic; a transmission may span several slots of the same contact.

Ties are broken by ``(time, hop_count, key)`` for routes and by
``(cost, completion, hop_count, node_id, forward_key, return_key)`` for
placements, where a key lists ``(node, slot, contact)`` per visited vertex.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .contact_graph import Contact, ContactKind, TimeExpandedGraph
from .orbits import Layer
from .power_thermal import EnergyZone, zone_permits
from .tasks import Task


class NoRoute(LookupError):
    pass


class NoFeasiblePlacement(LookupError):
    pass


@dataclass(frozen=True)
class CostWeights:
    w_latency: float = 1.0  # cost per second
    w_energy: float = 0.1  # cost per Wh
    w_risk: float = 100.0  # cost per unit probability

    def __post_init__(self) -> None:
        if min(self.w_latency, self.w_energy, self.w_risk) < 0:
            raise ValueError("cost weights must be >= 0")
        if self.w_latency == self.w_energy == self.w_risk == 0:
            raise ValueError("cost weights must not all be zero")

    def scaled(self, factor: float) -> "CostWeights":
        return CostWeights(self.w_latency * factor, self.w_energy * factor, self.w_risk * factor)

    def with_latency_multiplier(self, m: float) -> "CostWeights":
        return CostWeights(self.w_latency * m, self.w_energy, self.w_risk)


class Reservations:
    """Capacity already committed on a graph: busy link intervals and used compute units."""

    def __init__(self) -> None:
        self.busy: dict[int, list[tuple[float, float]]] = {}
        self.compute: dict[tuple[int, int], float] = {}

    def copy(self) -> "Reservations":
        r = Reservations()
        r.busy = {k: list(v) for k, v in self.busy.items()}
        r.compute = dict(self.compute)
        return r

    def link(self, contact: int) -> list[tuple[float, float]]:
        return self.busy.get(contact, [])

    def reserve_link(self, contact: int, segments: Iterable[tuple[float, float]]) -> None:
        lst = sorted(self.busy.get(contact, []) + [s for s in segments if s[1] > s[0]])
        merged: list[tuple[float, float]] = []
        for s, e in lst:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        self.busy[contact] = merged

    def reserve_compute(self, node: int, slot: int, units: float) -> None:
        self.compute[(node, slot)] = self.compute.get((node, slot), 0.0) + units

    def used_units(self, node: int, slot: int) -> float:
        return self.compute.get((node, slot), 0.0)

    def apply(self, decision: "PlacementDecision") -> None:
        for hop in decision.forward_path + decision.return_path:
            self.reserve_link(hop.contact, hop.segments)
        for slot, units in decision.compute_usage:
            self.reserve_compute(decision.execution_node, slot, units)

    def apply_route(self, route: "Route") -> None:
        for hop in route.hops:
            self.reserve_link(hop.contact, hop.segments)


_EMPTY = Reservations()


class Hop(NamedTuple):
    contact: int
    src: int
    dst: int
    tx_start: float
    tx_end: float
    arrival: float
    segments: tuple[tuple[float, float], ...]
    kind: ContactKind
    bits: float


@dataclass(frozen=True)
class Route:
    hops: tuple[Hop, ...]
    delivery_time: float
    key: tuple

    @property
    def hop_count(self) -> int:
        return len(self.hops)


@dataclass(frozen=True)
class PlacementDecision:
    task_id: int
    execution_node: int
    forward_path: tuple[Hop, ...]
    return_path: tuple[Hop, ...]
    start_slot: int
    exec_start: float
    exec_end: float
    estimated_completion_s: float
    total_cost: float
    latency_s: float
    energy_Wh: float
    risk: float
    compute_usage: tuple[tuple[int, float], ...]
    forward_key: tuple
    return_key: tuple
    replication_k: int = 1

    @property
    def hop_count(self) -> int:
        return len(self.forward_path) + len(self.return_path)

    @property
    def rank(self) -> tuple:
        return (
            self.total_cost,
            self.estimated_completion_s,
            self.hop_count,
            self.execution_node,
            self.forward_key,
            self.return_key,
        )

    @property
    def nodes(self) -> list[int]:
        seq = [h.src for h in self.forward_path] + [self.execution_node] + [h.dst for h in self.return_path]
        return seq


# --- primitives shared by the search and by exhaustive enumeration -------------


def transmit(
    contact: Contact, ready: float, bits: float, busy: Sequence[tuple[float, float]] = ()
) -> tuple[float, tuple[tuple[float, float], ...]] | None:
    """Earliest finish of a ``bits`` transmission on ``contact`` starting no sooner than ``ready``.

    Returns ``(finish, segments)`` or ``None`` if the contact closes first.
    """
    t = max(ready, contact.start_s)
    if t > contact.end_s:
        return None
    need = bits / contact.rate_bps
    segs: list[tuple[float, float]] = []
    for bs, be in busy:
        if be <= t:
            continue
        if bs > t:
            free_end = min(bs, contact.end_s)
            free = free_end - t
            if free >= need:
                segs.append((t, t + need))
                return t + need, tuple(segs)
            if free > 0:
                segs.append((t, free_end))
                need -= free
        t = max(t, be)
        if t >= contact.end_s:
            return None
    if t + need <= contact.end_s:
        segs.append((t, t + need))
        return t + need, tuple(segs)
    return None


def traverse(
    graph: TimeExpandedGraph, ci: int, ready: float, bits: float, reservations: Reservations
) -> Hop | None:
    c = graph.contacts[ci]
    r = transmit(c, ready, bits, reservations.link(ci))
    if r is None:
        return None
    finish, segs = r
    arrival = finish + c.owlt_s
    if arrival > graph.t_end:
        return None
    start = segs[0][0] if segs else max(ready, c.start_s)
    return Hop(ci, c.src, c.dst, start, finish, arrival, segs, c.kind, bits)


def hop_energy_Wh(graph: TimeExpandedGraph, hop: Hop) -> float:
    return graph.nodes[hop.src].p_tx_W_per_bps * hop.bits / 3600.0


def hop_survival(graph: TimeExpandedGraph, hop: Hop) -> float:
    if hop.kind is not ContactKind.ISL or graph.outage_rate_per_s == 0:
        return 1.0
    rate = graph.contacts[hop.contact].rate_bps
    return math.exp(-graph.outage_rate_per_s * (hop.bits / rate))


def key_element(graph: TimeExpandedGraph, node: int, t: float, contact: int = -1) -> tuple[int, int, int]:
    return (node, graph.slot_of(t), contact)


def composite_cost(weights: CostWeights, latency_s: float, energy_Wh: float, risk: float) -> float:
    return weights.w_latency * latency_s + weights.w_energy * energy_Wh + weights.w_risk * risk


def is_candidate(graph: TimeExpandedGraph, node: int, task: Task) -> bool:
    info = graph.nodes[node]
    if task.compute_demand_units == 0:
        return True
    if not info.compute or info.nominal_capacity <= 0:
        return False
    if info.layer is Layer.LUNAR and not task.task_class.delay_tolerant_ok:
        return False
    return True


def execution_window(
    graph: TimeExpandedGraph,
    node: int,
    task: Task,
    ready: float,
    reservations: Reservations = _EMPTY,
    demand: float | None = None,
) -> tuple[float, float, tuple[tuple[int, float], ...]] | None:
    """Earliest (start, end, per-slot units) for running ``task`` on ``node`` from ``ready``.

    A slot is usable when its predicted zone admits the class, thermal
    headroom meets the gate and compute units remain. Interruptible classes
    may pause across unusable slots; others need an unbroken run.
    """
    demand = task.compute_demand_units if demand is None else demand
    if ready > graph.t_end:
        return None
    if demand == 0:
        return ready, ready, ()
    info = graph.nodes[node]
    light = demand <= info.lightweight_units
    cls = task.task_class
    interruptible = cls.interruptible
    remaining = demand
    start = None
    usage: list[tuple[int, float]] = []
    for k in range(graph.slot_of(ready), graph.n_slots):
        a, b = graph.slot_bounds(k)
        ws = max(ready, a)
        rate = float(graph.capacity[node, k])
        ok = (
            ws < b
            and rate > 0
            and graph.headroom[node, k] >= graph.thermal_gate
            and zone_permits(EnergyZone(int(graph.zone[node, k])), cls, light)
        )
        avail = 0.0
        if ok:
            avail = min(rate * graph.slot_s - reservations.used_units(node, k), rate * (b - ws))
        if avail <= 0:
            if not interruptible and start is not None:
                remaining, start, usage = demand, None, []
            continue
        if start is None:
            start = ws
        if remaining <= avail:
            usage.append((k, remaining))
            return start, ws + remaining / rate, tuple(usage)
        remaining -= avail
        usage.append((k, avail))
    return None


def execution_survival(graph: TimeExpandedGraph, node: int, demand: float) -> float:
    info = graph.nodes[node]
    if demand == 0 or info.risk_rate_per_s == 0:
        return 1.0
    return math.exp(-(info.risk_rate_per_s * (demand / info.nominal_capacity)))


def route_key(graph: TimeExpandedGraph, src: int, t0: float, hops: Sequence[Hop]) -> tuple:
    return (key_element(graph, src, t0),) + tuple(key_element(graph, h.dst, h.arrival, h.contact) for h in hops)


def simulate_path(
    graph: TimeExpandedGraph,
    src: int,
    t0: float,
    contacts: Sequence[int],
    bits: float,
    reservations: Reservations = _EMPTY,
) -> tuple[Hop, ...] | None:
    """Greedy timing of an explicit contact sequence; ``None`` if infeasible."""
    hops = []
    t, node = t0, src
    for ci in contacts:
        if graph.contacts[ci].src != node:
            return None
        hop = traverse(graph, ci, t, bits, reservations)
        if hop is None:
            return None
        hops.append(hop)
        t, node = hop.arrival, hop.dst
    return tuple(hops)


def evaluate_placement(
    task: Task,
    node: int,
    forward: Sequence[int],
    back: Sequence[int],
    graph: TimeExpandedGraph,
    weights: CostWeights,
    *,
    source: int | None = None,
    t0: float | None = None,
    destinations: Sequence[int] | None = None,
    reservations: Reservations = _EMPTY,
    demand: float | None = None,
) -> PlacementDecision | None:
    """Full evaluation of one (node, forward contacts, return contacts) candidate.

    Returns ``None`` when the candidate violates zone, thermal, capacity,
    horizon or deadline constraints.
    """
    source = task.origin if source is None else source
    t0 = task.arrival_time_s if t0 is None else t0
    demand = task.compute_demand_units if demand is None else demand
    if not is_candidate(graph, node, task):
        return None
    fwd = simulate_path(graph, source, t0, forward, task.input_bits, reservations)
    if fwd is None or (fwd and fwd[-1].dst != node) or (not fwd and source != node):
        return None
    ready = fwd[-1].arrival if fwd else t0
    ex = execution_window(graph, node, task, ready, reservations, demand)
    if ex is None:
        return None
    start, end, usage = ex
    if back and (destinations is None or task.output_bits <= 0):
        return None
    ret = simulate_path(graph, node, end, back, task.output_bits, reservations)
    if ret is None:
        return None
    final_node = ret[-1].dst if ret else node
    if ret and final_node not in destinations:
        return None
    # zero-size results are delivered instantly
    if not ret and destinations is not None and node not in destinations and task.output_bits > 0:
        return None
    final = ret[-1].arrival if ret else end
    deadline = task.absolute_deadline
    if task.task_class.delay_sensitive and deadline is not None and final > deadline:
        return None
    energy = 0.0
    surv = 1.0
    for h in fwd:
        energy = energy + hop_energy_Wh(graph, h)
        surv = surv * hop_survival(graph, h)
    s_exec = execution_survival(graph, node, demand)
    e_exec = demand * graph.nodes[node].energy_per_unit_Wh
    r_energy = 0.0
    r_surv = 1.0
    for h in ret:
        r_energy = r_energy + hop_energy_Wh(graph, h)
        r_surv = r_surv * hop_survival(graph, h)
    return _decision(task, node, fwd, ret, start, end, usage, final, t0, source, graph, weights,
                     energy, surv, e_exec, s_exec, r_energy, r_surv)


def _decision(task, node, fwd, ret, start, end, usage, final, t0, source, graph, weights,
              f_energy, f_surv, e_exec, s_exec, r_energy, r_surv) -> PlacementDecision:
    energy = (f_energy + e_exec) + r_energy
    risk = 1.0 - (f_surv * s_exec) * r_surv
    latency = final - t0
    cost = composite_cost(weights, latency, energy, risk)
    return PlacementDecision(
        task_id=task.task_id,
        execution_node=node,
        forward_path=tuple(fwd),
        return_path=tuple(ret),
        start_slot=graph.slot_of(start),
        exec_start=start,
        exec_end=end,
        estimated_completion_s=final,
        total_cost=cost,
        latency_s=latency,
        energy_Wh=energy,
        risk=risk,
        compute_usage=tuple(usage),
        forward_key=route_key(graph, source, t0, fwd),
        return_key=route_key(graph, node, end, ret),
        replication_k=task.replication_k,
    )


def placement_cost(
    task: Task,
    node: int,
    path_pair: tuple[Sequence[int], Sequence[int]],
    graph: TimeExpandedGraph,
    weights: CostWeights,
    **kwargs,
) -> float | None:
    """Composite cost of one candidate, or ``None`` when it is infeasible."""
    d = evaluate_placement(task, node, path_pair[0], path_pair[1], graph, weights, **kwargs)
    return None if d is None else d.total_cost


# --- label-setting searches ----------------------------------------------------


def earliest_delivery_route(
    graph: TimeExpandedGraph,
    src: int,
    dst: int,
    t0: float,
    size_bits: float,
    reservations: Reservations = _EMPTY,
    blocked: Iterable[int] = (),
) -> Route:
    """Earliest arrival at ``dst`` with ties broken by hop count then key.

    Labels are popped in ``(time, hops, key)`` order; a label at a node is
    kept only if its ``(hops, key)`` beats every label popped there before,
    which preserves exactness for the lexicographic tie-break.
    """
    n = len(graph.nodes)
    if not (0 <= dst < n):
        raise ValueError("unknown destination node")
    return earliest_delivery_to_any(graph, src, (dst,), t0, size_bits, reservations, blocked)


def earliest_delivery_to_any(
    graph: TimeExpandedGraph,
    src: int,
    dsts: Iterable[int],
    t0: float,
    size_bits: float,
    reservations: Reservations = _EMPTY,
    blocked: Iterable[int] = (),
) -> Route:
    """Like :func:`earliest_delivery_route` but delivering to whichever of ``dsts`` is best."""
    n = len(graph.nodes)
    targets = set(dsts)
    if not (0 <= src < n) or not targets or not all(0 <= d < n for d in targets):
        raise ValueError("unknown source or destination node")
    if size_bits <= 0:
        raise ValueError("size_bits must be > 0")
    blocked = set(blocked) - {src} - targets
    key0 = (key_element(graph, src, t0),)
    if src in targets:
        return Route((), t0, key0)
    heap: list = [(t0, 0, key0, src, ())]
    best: dict[int, tuple] = {}
    bound = math.inf  # earliest arrival at any target pushed so far
    contacts = graph.contacts
    while heap:
        t, h, key, node, hops = heapq.heappop(heap)
        prev = best.get(node)
        if prev is not None and prev <= (h, key):
            continue
        best[node] = (h, key)
        if node in targets:
            return Route(hops, t, key)
        visited = {k[0] for k in key}
        for ci in graph.contacts_from(node, t, bound):
            c = contacts[ci]
            if c.dst in visited or c.dst in blocked:
                continue
            hop = traverse(graph, ci, t, size_bits, reservations)
            if hop is None or hop.arrival > bound:
                continue
            if c.dst in targets:
                bound = hop.arrival
            heapq.heappush(
                heap,
                (hop.arrival, h + 1, key + (key_element(graph, c.dst, hop.arrival, ci),), c.dst, hops + (hop,)),
            )
    raise NoRoute(f"no route {src}->{sorted(targets)} from t={t0} for {size_bits} bits")


class _Label(NamedTuple):
    time: float
    energy: float
    neg_survival: float
    hops: int
    key: tuple
    node: int
    path: tuple


def _dominates(a: _Label, b: _Label) -> bool:
    return (
        a.time <= b.time
        and a.energy <= b.energy
        and a.neg_survival <= b.neg_survival
        and (a.hops, a.key) <= (b.hops, b.key)
    )


def pareto_search(
    graph: TimeExpandedGraph,
    src: int,
    t0: float,
    bits: float,
    reservations: Reservations = _EMPTY,
    blocked: Iterable[int] = (),
    t_limit: float = math.inf,
    targets: Iterable[int] | None = None,
) -> dict[int, list[_Label]]:
    """Non-dominated labels on (time, energy, survival, (hops, key)) for every node."""
    blocked = set(blocked) - {src}
    if targets is not None:
        blocked -= set(targets)
    start = _Label(t0, 0.0, -1.0, 0, (key_element(graph, src, t0),), src, ())
    heap = [start]
    front: dict[int, list[_Label]] = {}
    while heap:
        lab = heapq.heappop(heap)
        kept = front.setdefault(lab.node, [])
        if any(_dominates(o, lab) for o in kept):
            continue
        kept.append(lab)
        visited = {k[0] for k in lab.key}
        for ci in graph.contacts_from(lab.node, lab.time, t_limit):
            c = graph.contacts[ci]
            if c.dst in visited or c.dst in blocked:
                continue
            hop = traverse(graph, ci, lab.time, bits, reservations)
            if hop is None or hop.arrival > t_limit:
                continue
            heapq.heappush(
                heap,
                _Label(
                    hop.arrival,
                    lab.energy + hop_energy_Wh(graph, hop),
                    -((-lab.neg_survival) * hop_survival(graph, hop)),
                    lab.hops + 1,
                    lab.key + (key_element(graph, c.dst, hop.arrival, ci),),
                    c.dst,
                    lab.path + (hop,),
                ),
            )
    return front


def place_task(
    task: Task,
    graph: TimeExpandedGraph,
    weights: CostWeights,
    candidates: Iterable[int],
    *,
    source: int | None = None,
    t0: float | None = None,
    destinations: Sequence[int] | None = None,
    reservations: Reservations = _EMPTY,
    blocked: Iterable[int] = (),
    demand: float | None = None,
) -> PlacementDecision:
    """Minimum-cost execution node plus forward/return paths for ``task``.

    Forward labels are searched once from the source; every non-dominated
    label arriving at a candidate is run through the compute model, and the
    return leg is searched from the resulting completion time.
    """
    source = task.origin if source is None else source
    t0 = task.arrival_time_s if t0 is None else t0
    demand = task.compute_demand_units if demand is None else demand
    cands = sorted(set(candidates))
    if not cands:
        raise ValueError("candidate set must be non-empty")
    deadline = task.absolute_deadline if task.task_class.delay_sensitive else None
    t_limit = math.inf if deadline is None else deadline
    dests = None if destinations is None else sorted(set(destinations))
    fwd_front = pareto_search(graph, source, t0, task.input_bits, reservations, blocked, t_limit, targets=cands)
    ret_cache: dict[tuple[int, float], dict[int, list[_Label]]] = {}
    best: PlacementDecision | None = None
    best_rank = None
    for x in cands:
        if not is_candidate(graph, x, task):
            continue
        for lab in fwd_front.get(x, []):
            ex = execution_window(graph, x, task, lab.time, reservations, demand)
            if ex is None:
                continue
            start, end, usage = ex
            if deadline is not None and end > deadline:
                continue
            fwd = lab.path
            f_energy = lab.energy
            f_surv = -lab.neg_survival
            e_exec = demand * graph.nodes[x].energy_per_unit_Wh
            s_exec = execution_survival(graph, x, demand)
            options: list[tuple] = []
            if dests is None or x in dests:
                options.append(((), 0.0, 1.0, end))
            if dests is not None and task.output_bits > 0:
                ck = (x, end)
                if ck not in ret_cache:
                    ret_cache[ck] = pareto_search(
                        graph, x, end, task.output_bits, reservations, blocked, t_limit, targets=dests
                    )
                for d in dests:
                    if d == x:
                        continue
                    for r in ret_cache[ck].get(d, []):
                        options.append((r.path, r.energy, -r.neg_survival, r.time))
            elif dests is not None and x not in dests:
                # zero-size results are delivered instantly
                options.append(((), 0.0, 1.0, end))
            for ret, r_energy, r_surv, final in options:
                if deadline is not None and final > deadline:
                    continue
                energy = (f_energy + e_exec) + r_energy
                risk = 1.0 - (f_surv * s_exec) * r_surv
                cost = composite_cost(weights, final - t0, energy, risk)
                rank = (
                    cost,
                    final,
                    len(fwd) + len(ret),
                    x,
                    route_key(graph, source, t0, fwd),
                    route_key(graph, x, end, ret),
                )
                if best_rank is None or rank < best_rank:
                    best_rank = rank
                    best = _decision(task, x, fwd, ret, start, end, usage, final, t0, source, graph, weights,
                                     f_energy, f_surv, e_exec, s_exec, r_energy, r_surv)
    if best is None:
        raise NoFeasiblePlacement(f"task {task.task_id}: no feasible placement among {cands}")
    return best


def replicate_decision(
    task: Task,
    primary: PlacementDecision,
    graph: TimeExpandedGraph,
    weights: CostWeights,
    risk_threshold: float,
    candidates: Iterable[int],
    k: int | None = None,
    **kwargs,
) -> tuple[list[PlacementDecision], bool]:
    """Add placements on disjoint execution nodes while the primary is too risky.

    Returns ``(decisions, degraded)``; ``degraded`` is set when fewer than
    ``k`` disjoint placements exist.
    """
    k = task.replication_k if k is None else k
    decisions = [primary]
    if primary.risk <= risk_threshold or k <= 1:
        return decisions, False
    used = {primary.execution_node}
    pool = set(candidates)
    while len(decisions) < k:
        remaining = pool - used
        if not remaining:
            return decisions, True
        try:
            d = place_task(task, graph, weights, remaining, **kwargs)
        except NoFeasiblePlacement:
            return decisions, True
        decisions.append(d)
        used.add(d.execution_node)
    return decisions, False


def combined_success(decisions: Sequence[PlacementDecision]) -> float:
    """Probability that at least one replica completes."""
    fail = 1.0
    for d in decisions:
        fail *= d.risk
    return 1.0 - fail


def decision_trace(decision: PlacementDecision) -> str:
    """One line per link hop and compute slot, for diffing against an oracle."""
    lines = [
        f"decision task={decision.task_id} node={decision.execution_node} cost={decision.total_cost!r} "
        f"completion={decision.estimated_completion_s!r} risk={decision.risk!r}"
    ]
    for leg, hops in (("fwd", decision.forward_path), ("ret", decision.return_path)):
        for h in hops:
            lines.append(
                f"{leg} contact={h.contact} {h.src}->{h.dst} tx=[{h.tx_start!r},{h.tx_end!r}] arrival={h.arrival!r}"
            )
    for slot, units in decision.compute_usage:
        lines.append(f"compute node={decision.execution_node} slot={slot} units={units!r}")
    return "\n".join(lines) + "\n"
