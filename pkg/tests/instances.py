"""Seeded random small instances for oracle comparisons."""

from __future__ import annotations

import numpy as np

from sbdcsim.contact_graph import Contact, ContactKind, NodeForecast, NodeInfo, TimeExpandedGraph
from sbdcsim.orbits import Layer
from sbdcsim.routing import CostWeights, Reservations
from sbdcsim.tasks import Task, TaskClass

CLASSES = [
    TaskClass.REAL_TIME_INFERENCE,
    TaskClass.INTERRUPTIBLE_COMPRESSION,
    TaskClass.BULK_TRAINING,
    TaskClass.STORAGE_RETRIEVAL,
    TaskClass.HOUSEKEEPING,
]


def random_instance(seed: int):
    """Graph, task, weights, candidates, destinations and reservations for one seed."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    n_slots = int(rng.integers(8, 41))
    slot_s = 30.0
    horizon = n_slots * slot_s
    nodes, forecasts = [], []
    for i in range(n):
        nominal = float(rng.choice([5.0, 10.0, 20.0]))
        nodes.append(
            NodeInfo(
                i,
                Layer.LEO,
                compute=bool(rng.random() < 0.8),
                nominal_capacity=nominal,
                energy_per_unit_Wh=float(rng.choice([0.0, 0.01, 0.02])),
                p_tx_W_per_bps=float(rng.choice([0.0, 1e-7, 2e-7])),
                risk_rate_per_s=float(rng.choice([0.0, 1e-4, 1e-3])),
                lightweight_units=float(rng.choice([50.0, 500.0])),
            )
        )
        forecasts.append(
            NodeForecast(
                rng.choice([0, 1, 2, 2, 2], size=n_slots).astype(np.int8),
                rng.choice([0.0, nominal, nominal, nominal / 2], size=n_slots),
                rng.choice([0.05, 0.5, 1.0, 1.0], size=n_slots),
                np.zeros(n_slots),
            )
        )
    contacts = []
    for _ in range(int(rng.integers(n, 4 * n))):
        a, b = rng.choice(n, size=2, replace=False)
        s = float(rng.integers(0, n_slots)) * slot_s * float(rng.choice([1.0, 0.5]))
        dur = float(rng.choice([10.0, 30.0, 60.0, 200.0, 600.0]))
        e = min(horizon, s + dur)
        if e <= s:
            continue
        kind = ContactKind.ISL if rng.random() < 0.7 else ContactKind.FEEDER
        contacts.append(Contact(int(a), int(b), s, e, float(rng.choice([1e6, 1e7, 1e8])),
                                float(rng.choice([0.0, 0.002, 0.5, 3.0])), kind))
    graph = TimeExpandedGraph(nodes, contacts, slot_s, n_slots, forecasts,
                              outage_rate_per_s=float(rng.choice([0.0, 1 / 600])), thermal_gate=0.1)
    cls = CLASSES[int(rng.integers(len(CLASSES)))]
    demand = float(rng.choice([0.0, 20.0, 100.0, 600.0])) if cls is not TaskClass.STORAGE_RETRIEVAL else 0.0
    input_bits = float(rng.choice([1e5, 1e6, 1e8]))
    output_bits = float(rng.choice([0.0, 1e4, 1e6]))
    if cls is TaskClass.INTERRUPTIBLE_COMPRESSION:
        output_bits = min(output_bits, input_bits)
    task = Task(
        task_id=seed,
        task_class=cls,
        arrival_time_s=float(rng.integers(0, max(1, n_slots // 3))) * slot_s + float(rng.choice([0.0, 7.5])),
        origin=0,
        input_bits=input_bits,
        compute_demand_units=demand,
        output_bits=output_bits,
        deadline_s=float(rng.choice([120.0, 600.0, 3000.0])) if cls.delay_sensitive else None,
    )
    weights = [CostWeights(), CostWeights(1.0, 0.0, 0.0), CostWeights(0.0, 1.0, 0.0), CostWeights(1.0, 1.0, 1000.0)][
        int(rng.integers(4))
    ]
    cands = sorted({int(x) for x in rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)})
    dests = None if rng.random() < 0.3 else sorted({int(x) for x in rng.choice(n, size=int(rng.integers(1, 3)), replace=False)})
    res = Reservations()
    if rng.random() < 0.4 and graph.contacts:
        ci = int(rng.integers(len(graph.contacts)))
        c = graph.contacts[ci]
        m = (c.start_s + c.end_s) / 2
        res.reserve_link(ci, [(m, min(c.end_s, m + 5.0))])
        res.reserve_compute(int(rng.integers(n)), int(rng.integers(n_slots)), 100.0)
    blocked = [int(rng.integers(1, n))] if rng.random() < 0.2 else []
    return graph, task, weights, cands, dests, res, blocked
