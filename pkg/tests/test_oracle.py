"""Placement and routing agree with exhaustive enumeration on small random instances."""

import pytest

from sbdcsim.oracle import brute_force_placement, brute_force_route
from sbdcsim.routing import NoFeasiblePlacement, NoRoute, earliest_delivery_route, place_task

from instances import random_instance

SEEDS = range(1000, 1250)


def _outcome(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (NoFeasiblePlacement, NoRoute) as exc:
        return type(exc)


@pytest.mark.parametrize("seed", SEEDS)
def test_placement_matches_oracle(seed):
    g, task, w, cands, dests, res, blocked = random_instance(seed)
    kw = dict(source=task.origin, t0=task.arrival_time_s, destinations=dests, reservations=res, blocked=blocked)
    got = _outcome(place_task, task, g, w, cands, **kw)
    want = _outcome(brute_force_placement, task, g, w, cands, **kw)
    if isinstance(want, type):
        assert got is want
    else:
        assert not isinstance(got, type), f"missed feasible placement on node {want.execution_node}"
        assert got.rank == want.rank
        assert got.execution_node == want.execution_node


@pytest.mark.parametrize("seed", SEEDS)
def test_route_matches_oracle(seed):
    g, task, _, _, _, res, blocked = random_instance(seed)
    for dst in range(1, len(g.nodes)):
        if dst in blocked:
            continue
        got = _outcome(earliest_delivery_route, g, 0, dst, task.arrival_time_s, task.input_bits, res, blocked)
        want = _outcome(brute_force_route, g, 0, dst, task.arrival_time_s, task.input_bits, res, blocked)
        if isinstance(want, type):
            assert got is want
        else:
            assert got.delivery_time == want.delivery_time
            assert got.key == want.key


def test_oracle_corpus_not_degenerate():
    feasible = 0
    for seed in SEEDS:
        g, task, w, cands, dests, res, blocked = random_instance(seed)
        try:
            brute_force_placement(task, g, w, cands, source=0, t0=task.arrival_time_s,
                                  destinations=dests, reservations=res, blocked=blocked)
            feasible += 1
        except NoFeasiblePlacement:
            pass
    assert 0.3 * len(SEEDS) < feasible < len(SEEDS)
