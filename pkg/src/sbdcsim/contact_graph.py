"""Contact plans, stochastic ISL outages and the time-expanded contact graph."""

from __future__ import annotations

import bisect
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence, TextIO

import numpy as np

from .constants import DEFAULT_CONSTANTS, LUNAR_OWLT_S, PhysicalConstants
from .orbits import (
    CircularOrbit,
    GroundStation,
    Layer,
    SunModel,
    elevation_and_range,
    intervals_from_predicate,
    isl_clear,
    positions,
    station_positions,
)
from .power_thermal import EnergyZone


class ConfigurationError(ValueError):
    """Inconsistent inputs, e.g. forecasts that do not cover the graph horizon."""


class ContactKind(str, enum.Enum):
    ISL = "ISL"
    FEEDER = "Feeder"
    ACCESS = "Access"


@dataclass(frozen=True)
class Contact:
    src: int
    dst: int
    start_s: float
    end_s: float
    rate_bps: float
    owlt_s: float
    kind: ContactKind = ContactKind.ISL

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ContactKind(self.kind))
        if not self.end_s > self.start_s:
            raise ValueError(f"contact {self.src}->{self.dst} must have end > start")
        if not self.rate_bps > 0:
            raise ValueError("contact rate must be > 0")
        if self.owlt_s < 0:
            raise ValueError("owlt must be >= 0")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    @property
    def volume_bits(self) -> float:
        return self.rate_bps * self.duration_s

    def sort_key(self):
        return (self.start_s, self.src, self.dst, self.end_s, self.kind.value)


@dataclass(frozen=True)
class OutageModel:
    outage_rate_per_s: float = 0.0
    reacquisition_mean_s: float = 5.0
    reacquisition_distribution: str = "exponential"

    def __post_init__(self) -> None:
        if self.outage_rate_per_s < 0 or self.reacquisition_mean_s < 0:
            raise ValueError("outage rates must be >= 0")
        if self.reacquisition_distribution != "exponential":
            raise ValueError("only exponential reacquisition is supported")

    @property
    def expected_availability(self) -> float:
        if self.outage_rate_per_s == 0:
            return 1.0
        return 1.0 / (1.0 + self.outage_rate_per_s * self.reacquisition_mean_s)


# --- constellation geometry --------------------------------------------------


@dataclass(frozen=True)
class SatelliteNode:
    node_id: int
    orbit: CircularOrbit
    plane: tuple[str, int] = ("", 0)
    index_in_plane: int = 0
    name: str = ""


@dataclass(frozen=True)
class GroundNode:
    node_id: int
    station: GroundStation
    role: str = "gateway"  # or "access"
    name: str = ""


@dataclass(frozen=True)
class LunarNode:
    node_id: int
    owlt_s: float = LUNAR_OWLT_S
    rate_bps: float = 1e6
    window_on_s: float = 6 * 3600.0
    window_off_s: float = 6 * 3600.0
    name: str = "lunar"


@dataclass(frozen=True)
class LinkRates:
    isl_bps: float = 1e9
    feeder_bps: float = 2e8
    access_bps: float = 5e7


@dataclass
class ConstellationGeometry:
    satellites: list[SatelliteNode] = field(default_factory=list)
    ground: list[GroundNode] = field(default_factory=list)
    lunar: LunarNode | None = None
    sun: SunModel = field(default_factory=SunModel)
    rotating_earth: bool = True
    constants: PhysicalConstants = DEFAULT_CONSTANTS

    def leo(self) -> list[tuple[int, CircularOrbit]]:
        return [(s.node_id, s.orbit) for s in self.satellites if s.orbit.layer is Layer.LEO]


def _isl_pairs(sats: Sequence[SatelliteNode], topology: str) -> list[tuple[int, int]]:
    """Static ISL candidate pairs (indices into ``sats``) for ring/grid or full mesh."""
    pairs: set[tuple[int, int]] = set()
    if topology == "full_mesh":
        for i in range(len(sats)):
            for j in range(i + 1, len(sats)):
                pairs.add((i, j))
        return sorted(pairs)
    planes: dict[tuple[str, int], list[int]] = {}
    for i, s in enumerate(sats):
        planes.setdefault(s.plane, []).append(i)
    for members in planes.values():
        members.sort(key=lambda i: sats[i].index_in_plane)
        n = len(members)
        for k in range(n if n > 2 else n - 1):
            a, b = members[k], members[(k + 1) % n]
            pairs.add((min(a, b), max(a, b)))
    # grid links between same-index satellites of adjacent planes in a shell
    shells: dict[str, list[tuple[str, int]]] = {}
    for key in planes:
        shells.setdefault(key[0], []).append(key)
    for keys in shells.values():
        keys.sort(key=lambda k: k[1])
        for p, q in zip(keys, keys[1:]):
            idx_q = {sats[i].index_in_plane: i for i in planes[q]}
            for i in planes[p]:
                j = idx_q.get(sats[i].index_in_plane)
                if j is not None:
                    pairs.add((min(i, j), max(i, j)))
    return sorted(pairs)


_LAYER_RANK = {Layer.LEO: 0, Layer.MEO: 1, Layer.GEO: 2}


def _windows_to_contacts(
    windows, a: int, b: int, rate: float, kind: ContactKind, owlt_fn
) -> list[Contact]:
    out = []
    for s, e in windows:
        if e - s <= 1e-9:
            continue
        owlt = owlt_fn(0.5 * (s + e))
        out.append(Contact(a, b, s, e, rate, owlt, kind))
        out.append(Contact(b, a, s, e, rate, owlt, kind))
    return out


def build_contact_plan(
    geometry: ConstellationGeometry,
    horizon_s: float,
    step_s: float = 10.0,
    rates: LinkRates = LinkRates(),
    isl_topology: str = "ring_cross",
) -> list[Contact]:
    """Contacts for the whole constellation over [0, horizon_s], time-ordered.

    ISLs follow the configured topology; each lower-layer satellite also links
    to the nearest satellite (by sub-satellite angle) of each higher layer.
    Ground contacts are Feeder for gateways and Access for access stations.
    """
    if not horizon_s > 0:
        raise ValueError("horizon_s must be > 0")
    step_s = min(step_s, horizon_s)
    k = geometry.constants
    c_kms = k.c
    sats = geometry.satellites
    contacts: list[Contact] = []

    def pos(i: int, t: np.ndarray) -> np.ndarray:
        return positions(sats[i].orbit, t, k)

    def range_owlt(i: int, j: int):
        return lambda t: float(np.linalg.norm(pos(i, np.array([t]))[0] - pos(j, np.array([t]))[0])) / c_kms

    pairs = _isl_pairs(sats, isl_topology)
    for i, j in pairs:
        wins = intervals_from_predicate(lambda t, i=i, j=j: isl_clear(pos(i, t), pos(j, t), k), horizon_s, step_s)
        contacts += _windows_to_contacts(wins, sats[i].node_id, sats[j].node_id, rates.isl_bps, ContactKind.ISL, range_owlt(i, j))

    if isl_topology != "full_mesh":
        static = set(pairs)
        for i, s in enumerate(sats):
            for upper in (Layer.MEO, Layer.GEO):
                if _LAYER_RANK[upper] <= _LAYER_RANK[s.orbit.layer]:
                    continue
                group = [j for j, u in enumerate(sats) if u.orbit.layer is upper]
                if not group:
                    continue

                def nearest(t: np.ndarray, i=i, group=group) -> np.ndarray:
                    def unit(p: np.ndarray) -> np.ndarray:
                        return p / np.linalg.norm(p, axis=-1, keepdims=True)

                    pn = unit(pos(i, t))
                    cos = np.stack([np.sum(pn * unit(pos(j, t)), axis=-1) for j in group])
                    return np.asarray(group)[np.argmax(cos, axis=0)]

                for j in group:
                    if (min(i, j), max(i, j)) in static:
                        continue
                    wins = intervals_from_predicate(
                        lambda t, i=i, j=j, nearest=nearest: (nearest(t) == j) & isl_clear(pos(i, t), pos(j, t), k),
                        horizon_s,
                        step_s,
                    )
                    contacts += _windows_to_contacts(
                        wins, s.node_id, sats[j].node_id, rates.isl_bps, ContactKind.ISL, range_owlt(i, j)
                    )

    for g in geometry.ground:
        kind = ContactKind.FEEDER if g.role == "gateway" else ContactKind.ACCESS
        rate = rates.feeder_bps if kind is ContactKind.FEEDER else rates.access_bps
        for i, s in enumerate(sats):

            def vis(t: np.ndarray, i=i, g=g) -> np.ndarray:
                el, _ = elevation_and_range(pos(i, t), station_positions(g.station, t, geometry.rotating_earth, k))
                return el >= g.station.min_elevation_deg

            def owlt(t: float, i=i, g=g) -> float:
                ta = np.array([t])
                _, rng = elevation_and_range(pos(i, ta), station_positions(g.station, ta, geometry.rotating_earth, k))
                return float(rng[0]) / c_kms

            contacts += _windows_to_contacts(intervals_from_predicate(vis, horizon_s, step_s), s.node_id, g.node_id, rate, kind, owlt)

    lunar = geometry.lunar
    if lunar is not None:
        period = lunar.window_on_s + lunar.window_off_s
        wins = []
        t = 0.0
        while t < horizon_s:
            wins.append((t, min(horizon_s, t + lunar.window_on_s)))
            t += period
        for g in geometry.ground:
            if g.role == "gateway":
                contacts += _windows_to_contacts(
                    wins, lunar.node_id, g.node_id, lunar.rate_bps, ContactKind.FEEDER, lambda t: lunar.owlt_s
                )
    contacts.sort(key=Contact.sort_key)
    return contacts


def apply_outages(plan: Sequence[Contact], model: OutageModel, rng: np.random.Generator) -> list[Contact]:
    """Cut APT reacquisition outages out of every ISL contact.

    Onsets form a Poisson process per link, durations are exponential, and
    each contact opens in the process's stationary state (already down with
    probability r*m/(1+r*m)). Both directions of a link share one outage
    realisation.
    """
    if model.outage_rate_per_s == 0:
        return list(plan)
    cuts: dict[tuple, list[tuple[float, float]]] = {}
    out: list[Contact] = []
    for c in plan:
        if c.kind is not ContactKind.ISL:
            out.append(c)
            continue
        key = (min(c.src, c.dst), max(c.src, c.dst), c.start_s, c.end_s)
        if key not in cuts:
            gaps = []
            t = c.start_s
            # enter the contact in the stationary state: an outage already in
            # progress has an exponential residual (memoryless)
            rm = model.outage_rate_per_s * model.reacquisition_mean_s
            if rm > 0 and rng.random() < rm / (1.0 + rm):
                t = c.start_s + rng.exponential(model.reacquisition_mean_s)
                gaps.append((c.start_s, min(c.end_s, t)))
            while t < c.end_s:
                onset = t + rng.exponential(1.0 / model.outage_rate_per_s)
                if onset >= c.end_s:
                    break
                down = rng.exponential(model.reacquisition_mean_s) if model.reacquisition_mean_s > 0 else 0.0
                gaps.append((onset, min(c.end_s, onset + down)))
                t = onset + down
            cuts[key] = gaps
        s = c.start_s
        for g0, g1 in cuts[key]:
            if g0 - s > 1e-9:
                out.append(Contact(c.src, c.dst, s, g0, c.rate_bps, c.owlt_s, c.kind))
            s = g1
        if c.end_s - s > 1e-9:
            out.append(Contact(c.src, c.dst, s, c.end_s, c.rate_bps, c.owlt_s, c.kind))
    out.sort(key=Contact.sort_key)
    return out


def remove_contacts(plan: Sequence[Contact], kind: ContactKind, start_s: float, end_s: float) -> list[Contact]:
    """Delete the part of every ``kind`` contact that overlaps [start_s, end_s]."""
    out = []
    for c in plan:
        if c.kind is not kind or c.end_s <= start_s or c.start_s >= end_s:
            out.append(c)
            continue
        if start_s - c.start_s > 1e-9:
            out.append(Contact(c.src, c.dst, c.start_s, start_s, c.rate_bps, c.owlt_s, c.kind))
        if c.end_s - end_s > 1e-9:
            out.append(Contact(c.src, c.dst, end_s, c.end_s, c.rate_bps, c.owlt_s, c.kind))
    out.sort(key=Contact.sort_key)
    return out


def availability(original: Sequence[Contact], trimmed: Sequence[Contact], kind: ContactKind = ContactKind.ISL) -> float:
    total = sum(c.duration_s for c in original if c.kind is kind)
    kept = sum(c.duration_s for c in trimmed if c.kind is kind)
    return kept / total if total else 1.0


# --- text format ---------------------------------------------------------------


def dump_contacts(plan: Iterable[Contact], names: Mapping[int, str] | None = None) -> str:
    buf = io.StringIO()
    write_contacts(plan, buf, names)
    return buf.getvalue()


def write_contacts(plan: Iterable[Contact], fh: TextIO, names: Mapping[int, str] | None = None) -> None:
    for c in plan:
        src = names[c.src] if names else str(c.src)
        dst = names[c.dst] if names else str(c.dst)
        fh.write(f"contact {src} {dst} {c.start_s!r} {c.end_s!r} {c.rate_bps!r} {c.owlt_s!r} {c.kind.value}\n")


def parse_contacts(text: str, ids: Mapping[str, int] | None = None) -> list[Contact]:
    """Parse ``contact <src> <dst> <start> <end> <rate_bps> <owlt_s> <kind>`` lines.

    Node tokens are integer ids, or names resolved through ``ids``. Blank
    lines and ``#`` comments are ignored.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "contact" or len(parts) != 8:
            raise ConfigurationError(f"line {lineno}: expected 'contact src dst start end rate owlt kind'")
        try:
            src, dst = (_node_token(p, ids) for p in parts[1:3])
            start, end, rate, owlt = (float(p) for p in parts[3:7])
            out.append(Contact(src, dst, start, end, rate, owlt, ContactKind(parts[7])))
        except (ValueError, KeyError) as exc:
            raise ConfigurationError(f"line {lineno}: {exc}") from exc
    return out


def _node_token(tok: str, ids: Mapping[str, int] | None) -> int:
    if ids is not None and tok in ids:
        return ids[tok]
    return int(tok)


# --- time-expanded graph ------------------------------------------------------


@dataclass(frozen=True)
class NodeInfo:
    """Static, planning-time description of a graph node used by the cost model."""

    node_id: int
    layer: Layer = Layer.LEO
    name: str = ""
    compute: bool = True
    nominal_capacity: float = 10.0
    energy_per_unit_Wh: float = 0.0
    p_tx_W_per_bps: float = 0.0
    risk_rate_per_s: float = 0.0
    lightweight_units: float = math.inf


@dataclass(frozen=True)
class NodeForecast:
    """Per-slot predictions for one node (arrays of length n_slots)."""

    zone: np.ndarray
    capacity: np.ndarray
    headroom: np.ndarray
    risk_rate: np.ndarray

    @classmethod
    def constant(cls, n_slots: int, zone: EnergyZone = EnergyZone.GREEN, capacity: float = 10.0,
                 headroom: float = 1.0, risk_rate: float = 0.0) -> "NodeForecast":
        return cls(
            np.full(n_slots, int(zone), dtype=np.int8),
            np.full(n_slots, float(capacity)),
            np.full(n_slots, float(headroom)),
            np.full(n_slots, float(risk_rate)),
        )


class VertexAnnotation(NamedTuple):
    node_id: int
    slot_index: int
    predicted_zone: EnergyZone
    available_capacity_units: float
    thermal_headroom: float
    risk_rate_per_s: float


class CommEdge(NamedTuple):
    contact: int
    slot: int
    src: int
    dst: int
    dst_slot: int
    capacity_bits: float
    delay_s: float
    window: tuple[float, float]


class StorageEdge(NamedTuple):
    node: int
    slot: int
    next_slot: int


class ComputeEdge(NamedTuple):
    node: int
    slot: int
    capacity_units: float


class TimeExpandedGraph:
    """Immutable node x slot graph; contacts are kept for continuous-time routing.

    Slot ``k`` covers ``[t_start + k*slot_s, t_start + (k+1)*slot_s)``.
    Compute residency lives on vertices (annotations); routing composes it
    into path cost at query time.
    """

    def __init__(
        self,
        nodes: Sequence[NodeInfo],
        contacts: Sequence[Contact],
        slot_s: float,
        n_slots: int,
        forecasts: Sequence[NodeForecast],
        t_start: float = 0.0,
        outage_rate_per_s: float = 0.0,
        thermal_gate: float = 0.10,
    ) -> None:
        self.nodes = tuple(nodes)
        self.slot_s = float(slot_s)
        self.n_slots = int(n_slots)
        self.t_start = float(t_start)
        self.t_end = self.t_start + self.n_slots * self.slot_s
        self.outage_rate_per_s = float(outage_rate_per_s)
        self.thermal_gate = float(thermal_gate)
        n = len(self.nodes)
        if [x.node_id for x in self.nodes] != list(range(n)):
            raise ConfigurationError("graph nodes must carry dense ids 0..n-1 in order")
        if len(forecasts) != n:
            raise ConfigurationError("one forecast per node is required")
        for f in forecasts:
            if any(len(a) != self.n_slots for a in (f.zone, f.capacity, f.headroom, f.risk_rate)):
                raise ConfigurationError("forecast length does not match the graph horizon")
        self.zone = np.array([f.zone for f in forecasts], dtype=np.int8).reshape(n, self.n_slots)
        self.capacity = np.array([f.capacity for f in forecasts], dtype=float).reshape(n, self.n_slots)
        self.headroom = np.array([f.headroom for f in forecasts], dtype=float).reshape(n, self.n_slots)
        self.risk_rate = np.array([f.risk_rate for f in forecasts], dtype=float).reshape(n, self.n_slots)
        for a in (self.zone, self.capacity, self.headroom, self.risk_rate):
            a.setflags(write=False)

        kept = []
        for c in contacts:
            if c.src >= n or c.dst >= n or c.src < 0 or c.dst < 0:
                raise ConfigurationError(f"contact {c.src}->{c.dst} references an unknown node")
            s, e = max(c.start_s, self.t_start), min(c.end_s, self.t_end)
            if e - s <= 0:
                continue
            if (s, e) != (c.start_s, c.end_s):
                c = Contact(c.src, c.dst, s, e, c.rate_bps, c.owlt_s, c.kind)
            kept.append(c)
        self.contacts = tuple(kept)
        out: list[list[int]] = [[] for _ in range(n)]
        for i, c in enumerate(self.contacts):
            out[c.src].append(i)
        for lst in out:
            lst.sort(key=lambda i: (self.contacts[i].start_s, i))
        self.out_contacts = tuple(tuple(lst) for lst in out)
        self._out_starts = tuple(tuple(self.contacts[i].start_s for i in lst) for lst in out)
        self._max_duration = tuple(max((self.contacts[i].duration_s for i in lst), default=0.0) for lst in out)
        self._comm_cache: tuple[CommEdge, ...] | None = None

    # slots
    def slot_of(self, t: float) -> int:
        k = int(math.floor((t - self.t_start) / self.slot_s))
        return min(max(k, 0), self.n_slots - 1)

    def slot_bounds(self, k: int) -> tuple[float, float]:
        return self.t_start + k * self.slot_s, self.t_start + (k + 1) * self.slot_s

    @property
    def comm_edges(self) -> tuple[CommEdge, ...]:
        """One edge per (contact, overlapping slot), built on first use."""
        if self._comm_cache is None:
            self._comm_cache = tuple(self._comm_edges())
        return self._comm_cache

    def _comm_edges(self):
        for ci, c in enumerate(self.contacts):
            k0 = self.slot_of(c.start_s)
            k1 = self.slot_of(math.nextafter(c.end_s, -math.inf))
            for k in range(k0, k1 + 1):
                a, b = self.slot_bounds(k)
                s, e = max(a, c.start_s), min(b, c.end_s)
                if e > s:
                    yield CommEdge(ci, k, c.src, c.dst, max(k, self.slot_of(s + c.owlt_s)), c.rate_bps * (e - s), c.owlt_s, (s, e))

    def storage_edges(self):
        for v in range(len(self.nodes)):
            for k in range(self.n_slots - 1):
                yield StorageEdge(v, k, k + 1)

    def compute_edges(self):
        for v in range(len(self.nodes)):
            for k in range(self.n_slots):
                yield ComputeEdge(v, k, float(self.capacity[v, k]) * self.slot_s)

    @property
    def n_vertices(self) -> int:
        return len(self.nodes) * self.n_slots

    def annotation(self, node: int, slot: int) -> VertexAnnotation:
        return VertexAnnotation(
            node,
            slot,
            EnergyZone(int(self.zone[node, slot])),
            float(self.capacity[node, slot]),
            float(self.headroom[node, slot]),
            float(self.risk_rate[node, slot]),
        )

    def contacts_from(self, node: int, t: float, until: float = math.inf) -> list[int]:
        """Outgoing contacts of ``node`` still open after ``t`` and opening no later than ``until``."""
        starts = self._out_starts[node]
        lo = bisect.bisect_left(starts, t - self._max_duration[node])
        hi = len(starts) if until == math.inf else bisect.bisect_right(starts, until)
        contacts = self.contacts
        return [i for i in self.out_contacts[node][lo:hi] if contacts[i].end_s > t]


def build_time_expanded_graph(
    plan: Sequence[Contact],
    forecasts: Sequence[NodeForecast],
    slot_s: float = 30.0,
    nodes: Sequence[NodeInfo] | None = None,
    t_start: float = 0.0,
    horizon_s: float | None = None,
    outage_rate_per_s: float = 0.0,
    thermal_gate: float = 0.10,
) -> TimeExpandedGraph:
    if not slot_s > 0:
        raise ValueError("slot duration must be > 0")
    if nodes is None:
        nodes = [NodeInfo(i) for i in range(len(forecasts))]
    if horizon_s is None:
        n_slots = len(forecasts[0].zone) if forecasts else 0
    else:
        n_slots = int(math.ceil(horizon_s / slot_s - 1e-9))
    if n_slots <= 0:
        raise ConfigurationError("graph horizon must cover at least one slot")
    return TimeExpandedGraph(nodes, plan, slot_s, n_slots, forecasts, t_start, outage_rate_per_s, thermal_gate)
