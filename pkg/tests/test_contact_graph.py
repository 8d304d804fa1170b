import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbdcsim.constants import DEFAULT_CONSTANTS as C
from sbdcsim.contact_graph import (
    ConfigurationError,
    ConstellationGeometry,
    Contact,
    ContactKind,
    GroundNode,
    NodeForecast,
    OutageModel,
    SatelliteNode,
    apply_outages,
    availability,
    build_contact_plan,
    build_time_expanded_graph,
    dump_contacts,
    parse_contacts,
    remove_contacts,
)
from sbdcsim.orbits import CircularOrbit, GroundStation, Layer, orbital_period
from sbdcsim.power_thermal import EnergyZone
from sbdcsim.routing import NoRoute, earliest_delivery_route


def test_geo_feeder_spans_horizon():
    geo = SatelliteNode(0, CircularOrbit(35786.0, layer=Layer.GEO))
    g = GroundNode(1, GroundStation(0.0, 0.0, 10.0))
    plan = build_contact_plan(ConstellationGeometry([geo], [g]), 86400.0, 60.0)
    # one contact per direction
    assert sorted((c.src, c.dst, c.start_s, c.end_s, c.kind) for c in plan) == [
        (0, 1, 0.0, 86400.0, ContactKind.FEEDER), (1, 0, 0.0, 86400.0, ContactKind.FEEDER)]
    assert plan[0].owlt_s == pytest.approx(35786.0 / C.c, rel=1e-6)


def test_antipodal_leo_no_isl():
    a = SatelliteNode(0, CircularOrbit(550.0), ("p", 0), 0)
    b = SatelliteNode(1, CircularOrbit(550.0, phase_deg=180.0), ("p", 0), 1)
    plan = build_contact_plan(ConstellationGeometry([a, b], rotating_earth=False), 3000.0, 10.0)
    assert [c for c in plan if c.kind is ContactKind.ISL] == []


def test_access_pass_duration():
    sat = SatelliteNode(0, CircularOrbit(550.0, phase_deg=180.0))
    g = GroundNode(1, GroundStation(0.0, 0.0, 0.0), role="access")
    T = orbital_period(sat.orbit)
    plan = build_contact_plan(ConstellationGeometry([sat], [g], rotating_earth=False), T, 1.0)
    assert sorted((c.src, c.dst) for c in plan) == [(0, 1), (1, 0)]
    assert all(c.kind is ContactKind.ACCESS for c in plan)
    lam0 = math.acos(C.R_E / (C.R_E + 550.0))
    assert plan[0].duration_s == pytest.approx(2 * lam0 / (2 * math.pi) * T, abs=0.5)


def _isl(s, e, a=0, b=1):
    return Contact(a, b, s, e, 1e9, 0.01, ContactKind.ISL)


def test_zero_outage_unchanged():
    plan = [_isl(0, 100), Contact(0, 2, 0, 50, 1e6, 0.0, ContactKind.FEEDER)]
    assert apply_outages(plan, OutageModel(0.0, 5.0), np.random.default_rng(0)) == plan


def test_outage_longer_than_contact_removes_it():
    # the link is almost surely down when the contact opens and stays down past its end
    plan = [_isl(0, 10.0)]
    kept = []
    for s in range(200):
        kept += apply_outages(plan, OutageModel(1e6, 1e6), np.random.default_rng(s))
    assert kept == []


def test_outage_availability_and_order():
    model = OutageModel(1 / 600, 5.0)
    assert model.expected_availability == pytest.approx(600 / 605)
    plan = [_isl(0.0, 1e6)]
    trimmed = apply_outages(plan, model, np.random.default_rng(11))
    assert availability(plan, trimmed) == pytest.approx(600 / 605, abs=0.002)
    starts = [c.start_s for c in trimmed]
    assert starts == sorted(starts)
    assert all(a.end_s <= b.start_s for a, b in zip(trimmed, trimmed[1:]))


def test_outage_both_directions_share_cuts():
    plan = [_isl(0, 5000, 0, 1), _isl(0, 5000, 1, 0)]
    out = apply_outages(plan, OutageModel(1 / 300, 20.0), np.random.default_rng(3))
    fwd = [(c.start_s, c.end_s) for c in out if c.src == 0]
    rev = [(c.start_s, c.end_s) for c in out if c.src == 1]
    assert fwd == rev


def test_remove_contacts():
    plan = [Contact(0, 1, 0, 100, 1e6, 0.0, ContactKind.FEEDER), _isl(0, 100)]
    out = remove_contacts(plan, ContactKind.FEEDER, 20, 50)
    assert sorted((c.start_s, c.end_s, c.kind.value) for c in out) == [
        (0, 20, "Feeder"), (0, 100, "ISL"), (50, 100, "Feeder")]


def test_hand_enumerated_graph():
    plan = [Contact(0, 1, 0.0, 90.0, 1e6, 0.0)]
    fc = [NodeForecast.constant(3), NodeForecast.constant(3)]
    g = build_time_expanded_graph(plan, fc, 30.0)
    assert g.n_vertices == 6
    assert len(g.comm_edges) == 3
    assert len(list(g.storage_edges())) == 4
    assert all(e.capacity_bits == pytest.approx(3e7) for e in g.comm_edges)


def test_empty_plan_storage_only():
    g = build_time_expanded_graph([], [NodeForecast.constant(4)] * 2, 30.0)
    assert g.comm_edges == () and len(list(g.storage_edges())) == 6
    with pytest.raises(NoRoute):
        earliest_delivery_route(g, 0, 1, 0.0, 1e3)


def test_short_contact_single_edge():
    plan = [Contact(0, 1, 40.0, 45.0, 1e6, 0.0)]
    g = build_time_expanded_graph(plan, [NodeForecast.constant(4)] * 2, 30.0)
    assert len(g.comm_edges) == 1
    assert g.comm_edges[0].capacity_bits == pytest.approx(5e6)


def test_forecast_mismatch_is_config_error():
    with pytest.raises(ConfigurationError):
        build_time_expanded_graph([], [NodeForecast.constant(4), NodeForecast.constant(3)], 30.0)
    with pytest.raises(ConfigurationError):
        build_time_expanded_graph([], [NodeForecast.constant(4)] * 2, 30.0, horizon_s=200.0)


def test_annotation_copied():
    fc = NodeForecast(np.array([2, 1, 0], dtype=np.int8), np.array([10.0, 5.0, 0.0]),
                      np.array([1.0, 0.5, 0.2]), np.array([0.0, 1e-4, 1e-3]))
    g = build_time_expanded_graph([], [fc], 30.0)
    a = g.annotation(0, 1)
    assert a.predicted_zone is EnergyZone.YELLOW
    assert (a.available_capacity_units, a.thermal_headroom, a.risk_rate_per_s) == (5.0, 0.5, 1e-4)


def test_contact_text_roundtrip():
    plan = [Contact(0, 1, 0.5, 10.25, 1e6, 0.00123, ContactKind.ISL), Contact(2, 0, 3.0, 9.0, 2e8, 0.0, ContactKind.FEEDER)]
    assert parse_contacts(dump_contacts(plan)) == plan
    named = dump_contacts(plan, {0: "a", 1: "b", 2: "gw"})
    assert parse_contacts(named, {"a": 0, "b": 1, "gw": 2}) == plan
    with pytest.raises(ConfigurationError):
        parse_contacts("contact 0 1 5 4 1e6 0 ISL")
    with pytest.raises(ConfigurationError):
        parse_contacts("link 0 1")


@settings(max_examples=60, deadline=None)
@given(s=st.floats(0, 500), d=st.floats(0.5, 400), slot=st.sampled_from([7.0, 30.0, 60.0]))
def test_capacity_accounting(s, d, slot):
    plan = [Contact(0, 1, s, s + d, 1e6, 0.0)]
    n = int(math.ceil((s + d) / slot)) + 1
    g = build_time_expanded_graph(plan, [NodeForecast.constant(n)] * 2, slot)
    assert sum(e.capacity_bits for e in g.comm_edges) == pytest.approx(1e6 * d, rel=1e-9)
    assert all(e.dst_slot >= e.slot for e in g.comm_edges)
