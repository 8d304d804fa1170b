"""Exhaustive enumeration over simple contact sequences, for validating the searches.

Only the per-hop timing primitive and the candidate evaluation are shared
with :mod:`sbdcsim.routing`; path enumeration and selection are independent.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence

from .contact_graph import TimeExpandedGraph
from .routing import (
    CostWeights,
    NoFeasiblePlacement,
    NoRoute,
    PlacementDecision,
    Reservations,
    Route,
    _EMPTY,
    evaluate_placement,
    route_key,
    simulate_path,
)
from .tasks import Task


def simple_sequences(
    graph: TimeExpandedGraph,
    src: int,
    t0: float,
    bits: float,
    reservations: Reservations = _EMPTY,
    blocked: Iterable[int] = (),
    allow: Iterable[int] = (),
) -> Iterator[tuple[int, ...]]:
    """Every timing-feasible contact sequence from ``src`` that never revisits a node.

    Yields the empty sequence first. ``allow`` lists nodes exempt from ``blocked``.
    """
    blocked = set(blocked) - set(allow) - {src}

    def rec(seq: tuple[int, ...], node: int, visited: frozenset) -> Iterator[tuple[int, ...]]:
        yield seq
        for ci, c in enumerate(graph.contacts):
            if c.src != node or c.dst in visited or c.dst in blocked:
                continue
            nxt = seq + (ci,)
            if simulate_path(graph, src, t0, nxt, bits, reservations) is None:
                continue
            yield from rec(nxt, c.dst, visited | {c.dst})

    yield from rec((), src, frozenset({src}))


def brute_force_route(
    graph: TimeExpandedGraph,
    src: int,
    dst: int,
    t0: float,
    size_bits: float,
    reservations: Reservations = _EMPTY,
    blocked: Iterable[int] = (),
) -> Route:
    best = None
    for seq in simple_sequences(graph, src, t0, size_bits, reservations, blocked, allow=(dst,)):
        hops = simulate_path(graph, src, t0, seq, size_bits, reservations)
        end = hops[-1].dst if hops else src
        if end != dst:
            continue
        t = hops[-1].arrival if hops else t0
        rank = (t, len(hops), route_key(graph, src, t0, hops))
        if best is None or rank < best[0]:
            best = (rank, hops)
    if best is None:
        raise NoRoute(f"no route {src}->{dst}")
    (t, _, key), hops = best
    return Route(hops, t, key)


def brute_force_placement(
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
) -> PlacementDecision:
    """Evaluate every (node, forward sequence, return sequence) and keep the best rank."""
    source = task.origin if source is None else source
    t0 = task.arrival_time_s if t0 is None else t0
    cands = set(candidates)
    dests = None if destinations is None else set(destinations)
    best: PlacementDecision | None = None
    ret_cache: dict[tuple[int, float], list[tuple[int, ...]]] = {}
    for fwd in simple_sequences(graph, source, t0, task.input_bits, reservations, blocked, allow=cands):
        hops = simulate_path(graph, source, t0, fwd, task.input_bits, reservations)
        node = hops[-1].dst if hops else source
        if node not in cands:
            continue
        base = evaluate_placement(task, node, fwd, (), graph, weights, source=source, t0=t0,
                                  destinations=None, reservations=reservations)
        if base is None:
            continue
        end = base.exec_end
        options: list[tuple[int, ...]] = [()]
        if dests is not None and task.output_bits > 0:
            key = (node, end)
            if key not in ret_cache:
                ret_cache[key] = [
                    s for s in simple_sequences(graph, node, end, task.output_bits, reservations, blocked, allow=dests)
                    if s
                ]
            options += ret_cache[key]
        for back in options:
            d = evaluate_placement(task, node, fwd, back, graph, weights, source=source, t0=t0,
                                   destinations=destinations, reservations=reservations)
            if d is not None and (best is None or d.rank < best.rank):
                best = d
    if best is None:
        raise NoFeasiblePlacement(f"task {task.task_id}: no feasible placement")
    return best
