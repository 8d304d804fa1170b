"""DHTS handset cohorts, Earth-observation imaging workloads and handovers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .orbits import CircularOrbit, GroundStation, elevation_and_range, positions, station_positions
from .tasks import Task, TaskClass


@dataclass(frozen=True)
class Mmpp:
    rate_low_per_s: float
    rate_high_per_s: float
    switch_low_to_high_per_s: float = 1e-3
    switch_high_to_low_per_s: float = 1e-3

    def __post_init__(self) -> None:
        if not self.rate_high_per_s >= self.rate_low_per_s >= 0:
            raise ValueError("need rate_high >= rate_low >= 0")
        if not (self.switch_low_to_high_per_s > 0 and self.switch_high_to_low_per_s > 0):
            raise ValueError("switch rates must be > 0")

    @property
    def stationary(self) -> tuple[float, float]:
        a, b = self.switch_low_to_high_per_s, self.switch_high_to_low_per_s
        return b / (a + b), a / (a + b)

    @property
    def mean_rate(self) -> float:
        p_low, p_high = self.stationary
        return p_low * self.rate_low_per_s + p_high * self.rate_high_per_s


@dataclass(frozen=True)
class TaskTemplate:
    task_class: TaskClass = TaskClass.REAL_TIME_INFERENCE
    input_bits: float = 2e6
    compute_demand_units: float = 20.0
    output_bits: float = 1e4
    deadline_s: float | None = 60.0
    replication_k: int = 1


@dataclass(frozen=True)
class HandsetCohort:
    cohort_id: int
    latitude_deg: float
    longitude_deg: float
    population: int
    mmpp: Mmpp
    min_elevation_deg: float = 10.0
    template: TaskTemplate = TaskTemplate()

    @property
    def station(self) -> GroundStation:
        return GroundStation(self.latitude_deg, self.longitude_deg, self.min_elevation_deg)


class HandoverEvent(NamedTuple):
    cohort_id: int
    from_sat: int
    to_sat: int
    time_s: float


def mmpp_arrival_times(
    mmpp: Mmpp, population: int, t0: float, t1: float, rng: np.random.Generator
) -> np.ndarray:
    """Arrival times of a two-state MMPP aggregated over ``population`` handsets."""
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    p_low, _ = mmpp.stationary
    high = bool(rng.random() >= p_low)
    t = t0
    chunks = []
    while t < t1:
        switch = mmpp.switch_high_to_low_per_s if high else mmpp.switch_low_to_high_per_s
        sojourn = rng.exponential(1.0 / switch)
        end = min(t1, t + sojourn)
        lam = population * (mmpp.rate_high_per_s if high else mmpp.rate_low_per_s)
        if lam > 0:
            n = rng.poisson(lam * (end - t))
            if n:
                chunks.append(np.sort(rng.uniform(t, end, size=n)))
        t = end
        high = not high
    return np.concatenate(chunks) if chunks else np.empty(0)


def generate_arrivals(
    cohort: HandsetCohort,
    window: tuple[float, float],
    rng: np.random.Generator,
    first_task_id: int = 0,
    origin: int = -1,
) -> list[Task]:
    """Tasks for one cohort; ``origin`` is resolved to a serving satellite by the caller."""
    times = mmpp_arrival_times(cohort.mmpp, cohort.population, window[0], window[1], rng)
    tpl = cohort.template
    return [
        Task(
            task_id=first_task_id + i,
            task_class=tpl.task_class,
            arrival_time_s=float(t),
            origin=origin,
            input_bits=tpl.input_bits,
            compute_demand_units=tpl.compute_demand_units,
            output_bits=tpl.output_bits,
            deadline_s=tpl.deadline_s,
            replication_k=tpl.replication_k,
            workload=f"dhts:{cohort.cohort_id}",
        )
        for i, t in enumerate(times)
    ]


def elevations(
    cohort: HandsetCohort,
    constellation: Sequence[tuple[int, CircularOrbit]],
    times: np.ndarray,
    rotating: bool = True,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> np.ndarray:
    """Elevation (deg) of every satellite over the cohort, shape (n_sats, n_times)."""
    gs = station_positions(cohort.station, times, rotating, constants)
    out = np.empty((len(constellation), len(times)))
    for i, (_, orbit) in enumerate(constellation):
        out[i], _ = elevation_and_range(positions(orbit, times, constants), gs)
    return out


def serving_from_elevations(ids: Sequence[int], elev: np.ndarray, min_elevation_deg: float) -> list[int | None]:
    """Column-wise max-elevation choice with lowest-id tie-break."""
    order = np.argsort(np.asarray(ids), kind="stable")
    ids_sorted = np.asarray(ids)[order]
    e = elev[order]
    best = np.argmax(e, axis=0)  # first maximum = lowest id
    out: list[int | None] = []
    for j, b in enumerate(best):
        out.append(int(ids_sorted[b]) if e[b, j] >= min_elevation_deg else None)
    return out


def assign_serving_satellite(
    cohort: HandsetCohort,
    constellation: Sequence[tuple[int, CircularOrbit]],
    t: float,
    rotating: bool = True,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> int | None:
    """Visible LEO satellite with maximum elevation; ``None`` when nothing is in view."""
    if not constellation:
        return None
    elev = elevations(cohort, constellation, np.array([float(t)]), rotating, constants)
    return serving_from_elevations([i for i, _ in constellation], elev, cohort.min_elevation_deg)[0]


def detect_handover(
    previous: int | None, current: int | None, t: float, cohort_id: int = 0
) -> HandoverEvent | None:
    if previous is None or current is None or previous == current:
        return None
    return HandoverEvent(cohort_id, previous, current, float(t))


def handover_sequence(
    cohort: HandsetCohort,
    constellation: Sequence[tuple[int, CircularOrbit]],
    times: Iterable[float],
    rotating: bool = True,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> list[HandoverEvent]:
    times = np.asarray(list(times), dtype=float)
    if len(times) == 0 or not constellation:
        return []
    elev = elevations(cohort, constellation, times, rotating, constants)
    serving = serving_from_elevations([i for i, _ in constellation], elev, cohort.min_elevation_deg)
    events = []
    prev = None
    for t, cur in zip(times, serving):
        ev = detect_handover(prev, cur, t, cohort.cohort_id)
        if ev is not None:
            events.append(ev)
        if cur is not None:
            prev = cur
    return events


def generate_eo_workload(
    sat_id: int,
    imaging_schedule: Iterable[tuple[float, float]],
    compression_ratio: float,
    compute_units_per_bit: float = 1e-8,
    first_task_id: int = 0,
) -> list[Task]:
    """Compression job plus downlink transfer for every (time, input_bits) imaging event."""
    if compression_ratio < 1:
        raise ValueError("compression_ratio must be >= 1")
    tasks: list[Task] = []
    tid = first_task_id
    for t, bits in imaging_schedule:
        out = bits / compression_ratio
        job = Task(
            task_id=tid,
            task_class=TaskClass.INTERRUPTIBLE_COMPRESSION,
            arrival_time_s=float(t),
            origin=sat_id,
            input_bits=float(bits),
            compute_demand_units=float(bits) * compute_units_per_bit,
            output_bits=out,
            workload="eo",
            ships_result=False,
        )
        transfer = Task(
            task_id=tid + 1,
            task_class=TaskClass.STORAGE_RETRIEVAL,
            arrival_time_s=float(t),
            origin=sat_id,
            input_bits=out,
            compute_demand_units=0.0,
            output_bits=out,
            workload="eo",
            depends_on=tid,
        )
        tasks.extend((job, transfer))
        tid += 2
    return tasks


def periodic_schedule(start_s: float, interval_s: float, horizon_s: float, input_bits: float) -> list[tuple[float, float]]:
    out = []
    t = start_s
    while t < horizon_s:
        out.append((t, input_bits))
        t += interval_s
    return out
