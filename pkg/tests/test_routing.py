import math

import numpy as np
import pytest

from sbdcsim.contact_graph import Contact, ContactKind, NodeForecast, NodeInfo, TimeExpandedGraph
from sbdcsim.power_thermal import EnergyZone
from sbdcsim.routing import (
    CostWeights,
    NoFeasiblePlacement,
    NoRoute,
    Reservations,
    combined_success,
    decision_trace,
    earliest_delivery_route,
    place_task,
    placement_cost,
    replicate_decision,
)
from sbdcsim.tasks import Task, TaskClass

from instances import random_instance


def _graph(n, contacts, n_slots=20, slot=30.0, nodes=None, forecasts=None, outage=0.0):
    nodes = nodes or [NodeInfo(i) for i in range(n)]
    forecasts = forecasts or [NodeForecast.constant(n_slots) for _ in range(n)]
    return TimeExpandedGraph(nodes, contacts, slot, n_slots, forecasts, outage_rate_per_s=outage)


def _bulk(demand=100.0, bits=1e6, out=1e4, t0=0.0, origin=0, k=1):
    return Task(1, TaskClass.BULK_TRAINING, t0, origin, bits, demand, out, replication_k=k)


def test_direct_contact():
    g = _graph(2, [Contact(0, 1, 0.0, 600.0, 1e6, 0.01)])
    r = earliest_delivery_route(g, 0, 1, 5.0, 2e5)
    assert r.delivery_time == pytest.approx(5.0 + 0.2 + 0.01)
    assert r.hop_count == 1


def test_store_and_forward_chain():
    g = _graph(3, [Contact(0, 1, 0.0, 100.0, 1e6, 0.01), Contact(1, 2, 200.0, 300.0, 1e6, 0.01)])
    r = earliest_delivery_route(g, 0, 2, 0.0, 1e6)
    assert [h.dst for h in r.hops] == [1, 2]
    assert r.hops[1].tx_start == 200.0  # waited at B
    assert r.delivery_time == pytest.approx(201.01)
    assert 200.0 <= r.delivery_time <= 300.0


def test_oversize_no_route():
    g = _graph(2, [Contact(0, 1, 0.0, 100.0, 1e6, 0.0)])
    with pytest.raises(NoRoute):
        earliest_delivery_route(g, 0, 1, 0.0, 1.01e8)


def test_single_candidate():
    g = _graph(2, [Contact(0, 1, 0.0, 600.0, 1e6, 0.0)])
    d = place_task(_bulk(), g, CostWeights(), [1])
    assert d.execution_node == 1


def test_no_feasible_placement_when_all_red():
    fc = [NodeForecast.constant(20), NodeForecast.constant(20, EnergyZone.RED)]
    g = _graph(2, [Contact(0, 1, 0.0, 600.0, 1e6, 0.0)], forecasts=fc)
    with pytest.raises(NoFeasiblePlacement):
        place_task(_bulk(), g, CostWeights(), [1])


def _desk():
    """Four-node fixture: ground source 0 and three compute satellites."""
    nodes = [
        NodeInfo(0, compute=False, p_tx_W_per_bps=1e-7),
        NodeInfo(1, nominal_capacity=10.0, energy_per_unit_Wh=0.02, p_tx_W_per_bps=2e-7, risk_rate_per_s=1e-3),
        NodeInfo(2, nominal_capacity=20.0, energy_per_unit_Wh=0.01, p_tx_W_per_bps=1e-7, risk_rate_per_s=5e-3),
        NodeInfo(3, nominal_capacity=5.0, energy_per_unit_Wh=0.005, p_tx_W_per_bps=3e-7, risk_rate_per_s=0.0),
    ]
    contacts = [
        Contact(0, 1, 0.0, 600.0, 1e6, 0.002, ContactKind.FEEDER),
        Contact(1, 0, 0.0, 600.0, 1e6, 0.002, ContactKind.FEEDER),
        Contact(0, 2, 60.0, 600.0, 1e7, 0.004, ContactKind.FEEDER),
        Contact(2, 0, 60.0, 600.0, 1e7, 0.004, ContactKind.FEEDER),
        Contact(1, 3, 30.0, 600.0, 1e8, 0.01, ContactKind.ISL),
        Contact(3, 1, 30.0, 600.0, 1e8, 0.01, ContactKind.ISL),
    ]
    return _graph(4, contacts, nodes=nodes, outage=1 / 600)


def _recompute(g, task, d, w):
    """Spreadsheet-style cost from the decision's hops."""
    info = g.nodes[d.execution_node]
    energy = sum(g.nodes[h.src].p_tx_W_per_bps * h.bits / 3600.0 for h in d.forward_path + d.return_path)
    energy += task.compute_demand_units * info.energy_per_unit_Wh
    surv = 1.0
    for h in d.forward_path + d.return_path:
        if h.kind is ContactKind.ISL:
            surv *= math.exp(-g.outage_rate_per_s * h.bits / g.contacts[h.contact].rate_bps)
    surv *= math.exp(-info.risk_rate_per_s * task.compute_demand_units / info.nominal_capacity)
    latency = d.estimated_completion_s - task.arrival_time_s
    return w.w_latency * latency + w.w_energy * energy + w.w_risk * (1 - surv)


@pytest.mark.parametrize("w", [CostWeights(), CostWeights(1.0, 1.0, 1000.0), CostWeights(0.5, 10.0, 10.0)])
def test_desk_costs_recomputed(w):
    g = _desk()
    task = _bulk(demand=100.0)
    for x in (1, 2, 3):
        d = place_task(task, g, w, [x], destinations=[0])
        assert d.total_cost == pytest.approx(_recompute(g, task, d, w), rel=1e-9)
        fwd = [h.contact for h in d.forward_path]
        ret = [h.contact for h in d.return_path]
        assert placement_cost(task, x, (fwd, ret), g, w, destinations=[0]) == pytest.approx(d.total_cost, rel=1e-12)


def test_degenerate_weights_pick_earliest_completion():
    g = _desk()
    task = _bulk(demand=100.0)
    w = CostWeights(1.0, 0.0, 0.0)
    best = place_task(task, g, w, [1, 2, 3], destinations=[0])
    per = {x: place_task(task, g, w, [x], destinations=[0]).estimated_completion_s for x in (1, 2, 3)}
    assert best.estimated_completion_s == min(per.values())
    assert best.execution_node == min(per, key=lambda x: (per[x], x))


def test_lower_risk_dominates():
    nodes = [NodeInfo(0, compute=False), NodeInfo(1, risk_rate_per_s=0.0), NodeInfo(2, risk_rate_per_s=0.0)]
    # choose rates so that execution risks are 0.1 (node 1) and 0.01 (node 2)
    demand, cap = 100.0, 10.0
    r1 = -math.log(1 - 0.1) * cap / demand
    r2 = -math.log(1 - 0.01) * cap / demand
    nodes[1] = NodeInfo(1, nominal_capacity=cap, risk_rate_per_s=r1)
    nodes[2] = NodeInfo(2, nominal_capacity=cap, risk_rate_per_s=r2)
    contacts = [Contact(0, 1, 0.0, 600.0, 1e6, 0.0), Contact(0, 2, 0.0, 600.0, 1e6, 0.0)]
    g = _graph(3, contacts, nodes=nodes)
    d = place_task(_bulk(demand), g, CostWeights(), [1, 2])
    assert d.execution_node == 2
    assert d.risk == pytest.approx(0.01)


def test_green_far_beats_yellow_near():
    n_slots = 40
    yellow = NodeForecast.constant(n_slots, EnergyZone.YELLOW)  # entering eclipse
    fc = [NodeForecast.constant(n_slots), yellow, NodeForecast.constant(n_slots), NodeForecast.constant(n_slots)]
    contacts = [
        Contact(0, 1, 0.0, 1200.0, 1e7, 0.002),  # near
        Contact(0, 2, 0.0, 1200.0, 1e7, 0.002),
        Contact(2, 3, 0.0, 1200.0, 1e7, 0.02),  # far green node two hops out
    ]
    g = _graph(4, contacts, n_slots=n_slots, forecasts=fc)
    d = place_task(_bulk(demand=200.0), g, CostWeights(), [1, 3])
    assert d.execution_node == 3
    assert len(d.forward_path) == 2


def test_deadline_soundness():
    task = Task(1, TaskClass.REAL_TIME_INFERENCE, 0.0, 0, 1e6, 100.0, 1e3, deadline_s=5.0)
    g = _graph(2, [Contact(0, 1, 0.0, 600.0, 1e6, 0.0)])
    with pytest.raises(NoFeasiblePlacement):
        place_task(task, g, CostWeights(), [1])  # needs 1 s transfer + 10 s compute
    task = Task(1, TaskClass.REAL_TIME_INFERENCE, 0.0, 0, 1e6, 100.0, 1e3, deadline_s=20.0)
    d = place_task(task, g, CostWeights(), [1])
    assert d.estimated_completion_s <= 20.0


def _risky(n=4, risk=0.2):
    demand, cap = 100.0, 10.0
    r = -math.log(1 - risk) * cap / demand
    nodes = [NodeInfo(0, compute=False)] + [NodeInfo(i, nominal_capacity=cap, risk_rate_per_s=r) for i in range(1, n)]
    contacts = [Contact(0, i, 0.0, 600.0, 1e6, 0.0) for i in range(1, n)]
    return _graph(n, contacts, nodes=nodes)


def test_replication_below_threshold():
    g = _graph(2, [Contact(0, 1, 0.0, 600.0, 1e6, 0.0)])
    t = _bulk(k=2)
    d = place_task(t, g, CostWeights(), [1])
    reps, degraded = replicate_decision(t, d, g, CostWeights(), 0.05, [1])
    assert reps == [d] and not degraded


def test_replication_two_distinct_nodes():
    g = _risky()
    t = _bulk(k=2)
    d = place_task(t, g, CostWeights(), [1, 2, 3])
    assert d.risk == pytest.approx(0.2)
    reps, degraded = replicate_decision(t, d, g, CostWeights(), 0.05, [1, 2, 3])
    assert len(reps) == 2 and not degraded
    assert len({r.execution_node for r in reps}) == 2
    assert combined_success(reps) == pytest.approx(1 - 0.2 * 0.2)
    assert combined_success(reps) >= combined_success(reps[:1])


def test_replication_degraded_when_short_of_nodes():
    g = _risky(n=2)
    t = _bulk(k=3)
    d = place_task(t, g, CostWeights(), [1])
    reps, degraded = replicate_decision(t, d, g, CostWeights(), 0.05, [1])
    assert len(reps) == 1 and degraded


def test_capacity_reservations_respected():
    g = _graph(2, [Contact(0, 1, 0.0, 10.0, 1e6, 0.0)], n_slots=10)
    res = Reservations()
    r1 = earliest_delivery_route(g, 0, 1, 0.0, 6e6, res)
    res.apply_route(r1)
    with pytest.raises(NoRoute):
        earliest_delivery_route(g, 0, 1, 0.0, 6e6, res)
    r2 = earliest_delivery_route(g, 0, 1, 0.0, 4e6, res)
    assert r2.hops[0].tx_start >= r1.hops[0].tx_end


def test_trace_format():
    g = _desk()
    d = place_task(_bulk(), g, CostWeights(), [1, 2, 3], destinations=[0])
    trace = decision_trace(d).splitlines()
    assert trace[0].startswith("decision task=1 node=")
    assert sum(line.startswith("fwd ") for line in trace) == len(d.forward_path)
    assert sum(line.startswith("compute ") for line in trace) == len(d.compute_usage)


def _placement_or_none(*args, **kw):
    try:
        return place_task(*args, **kw)
    except NoFeasiblePlacement:
        return None


@pytest.mark.parametrize("seed", range(40))
def test_weight_scaling_invariance(seed):
    g, task, w, cands, dests, res, blocked = random_instance(seed)
    kw = dict(destinations=dests, reservations=res, blocked=blocked)
    a = _placement_or_none(task, g, w, cands, **kw)
    b = _placement_or_none(task, g, w.scaled(7.5), cands, **kw)
    if a is None:
        assert b is None
    else:
        assert (a.execution_node, a.forward_key, a.return_key) == (b.execution_node, b.forward_key, b.return_key)


@pytest.mark.parametrize("seed", range(40))
def test_adding_contact_never_hurts(seed):
    g, task, w, cands, dests, res, blocked = random_instance(seed)
    rng = np.random.default_rng(10_000 + seed)
    n = len(g.nodes)
    a, b = (int(x) for x in rng.choice(n, size=2, replace=False))
    extra = Contact(a, b, 0.0, g.t_end, 1e7, 0.01)
    g2 = TimeExpandedGraph(g.nodes, list(g.contacts) + [extra], g.slot_s, g.n_slots,
                           [NodeForecast(g.zone[i], g.capacity[i], g.headroom[i], g.risk_rate[i]) for i in range(n)],
                           outage_rate_per_s=g.outage_rate_per_s, thermal_gate=g.thermal_gate)
    for dst in range(1, n):
        try:
            t1 = earliest_delivery_route(g, 0, dst, task.arrival_time_s, task.input_bits).delivery_time
        except NoRoute:
            continue
        t2 = earliest_delivery_route(g2, 0, dst, task.arrival_time_s, task.input_bits).delivery_time
        assert t2 <= t1
    kw = dict(destinations=dests, blocked=blocked)
    p1 = _placement_or_none(task, g, w, cands, **kw)
    if p1 is not None:
        assert place_task(task, g2, w, cands, **kw).total_cost <= p1.total_cost + 1e-12


@pytest.mark.parametrize("seed", range(40))
def test_no_red_slots_for_compute(seed):
    g, task, w, cands, dests, res, blocked = random_instance(seed)
    d = _placement_or_none(task, g, w, cands, destinations=dests, reservations=res, blocked=blocked)
    if d is None or task.task_class is TaskClass.HOUSEKEEPING:
        return
    for slot, units in d.compute_usage:
        assert EnergyZone(int(g.zone[d.execution_node, slot])) is not EnergyZone.RED
        assert units <= g.capacity[d.execution_node, slot] * g.slot_s - res.used_units(d.execution_node, slot) + 1e-9
