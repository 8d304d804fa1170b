"""Compute nodes: capacity derating under radiation, SEU faults and task execution."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .constants import YEAR_S
from .orbits import Layer
from .power_thermal import PowerSpec, ThermalSpec
from .tasks import Task, TaskClass

DeratingCurve = Callable[[float], float]


class NodeDead(RuntimeError):
    """Raised when work is requested from a node whose dose exceeded tolerance."""


def linear_derating(dose_fraction: float) -> float:
    return 1.0 - 0.5 * min(1.0, max(0.0, dose_fraction))


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    layer: Layer
    compute_capacity: float
    storage_bits: float = 1e13
    isl_terminals: int = 4
    power: PowerSpec | None = None
    thermal: ThermalSpec | None = None
    max_concurrent: int = 4
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer", Layer(self.layer))
        if self.compute_capacity < 0 or (self.layer is not Layer.GROUND and not self.compute_capacity > 0):
            raise ValueError("compute_capacity must be > 0")
        if self.isl_terminals < 0:
            raise ValueError("isl_terminals must be >= 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")


@dataclass(frozen=True)
class NodeHealth:
    tid_accumulated_krad: float = 0.0
    tid_tolerance_krad: float = 50.0
    seu_rate_per_s: float = 0.0
    failed: bool = False

    def __post_init__(self) -> None:
        if self.tid_accumulated_krad < 0:
            raise ValueError("accumulated dose must be >= 0")
        if not self.tid_tolerance_krad > 0:
            raise ValueError("dose tolerance must be > 0")
        if self.tid_accumulated_krad >= self.tid_tolerance_krad and not self.failed:
            object.__setattr__(self, "failed", True)

    @property
    def dose_fraction(self) -> float:
        return self.tid_accumulated_krad / self.tid_tolerance_krad

    def derating(self, curve: DeratingCurve = linear_derating) -> float:
        return 0.0 if self.failed else curve(self.dose_fraction)


def derated_capacity(spec: NodeSpec, health: NodeHealth, curve: DeratingCurve = linear_derating) -> float:
    """Usable compute units/s; 0 for a failed node (see :func:`require_alive`)."""
    if health.failed:
        return 0.0
    return spec.compute_capacity * curve(health.dose_fraction)


def require_alive(spec: NodeSpec, health: NodeHealth) -> None:
    if health.failed:
        raise NodeDead(f"node {spec.node_id} exceeded its dose tolerance")


def accumulate_dose(health: NodeHealth, dose_rate_krad_per_year: float, dt_s: float) -> NodeHealth:
    if not dt_s > 0:
        raise ValueError("dt_s must be > 0")
    if dose_rate_krad_per_year == 0:
        return health
    tid = health.tid_accumulated_krad + dose_rate_krad_per_year * dt_s / YEAR_S
    return replace(health, tid_accumulated_krad=tid, failed=health.failed or tid >= health.tid_tolerance_krad)


def time_to_failure(health: NodeHealth, dose_rate_krad_per_year: float) -> float:
    if health.failed:
        return 0.0
    if dose_rate_krad_per_year <= 0:
        return math.inf
    return (health.tid_tolerance_krad - health.tid_accumulated_krad) / dose_rate_krad_per_year * YEAR_S


def sample_seu_faults(health: NodeHealth, dt_s: float, rng: np.random.Generator) -> int:
    if not dt_s > 0:
        raise ValueError("dt_s must be > 0")
    lam = health.seu_rate_per_s * dt_s
    if lam <= 0:
        return 0
    return int(rng.poisson(lam))


def failure_risk(health: NodeHealth, duration_s: float, k_seu: float = 1.0, k_tid: float = 1e-6) -> float:
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    return 1.0 - math.exp(-risk_rate(health, k_seu, k_tid) * duration_s)


def risk_rate(health: NodeHealth, k_seu: float = 1.0, k_tid: float = 1e-6) -> float:
    return health.seu_rate_per_s * k_seu + k_tid * health.dose_fraction


@dataclass
class TaskExecution:
    task: Task
    node_id: int
    started_at: float
    progress: float = 0.0
    checkpoint_progress: float = 0.0
    since_checkpoint_s: float = 0.0
    available_from: float = 0.0
    # remaining demand is scaled from this on migration (demand of the original task)
    demand_units: float = 0.0

    def __post_init__(self) -> None:
        if not self.demand_units:
            self.demand_units = self.task.compute_demand_units
        if not 0 <= self.checkpoint_progress <= self.progress <= 1:
            raise ValueError("need 0 <= checkpoint_progress <= progress <= 1")

    @property
    def task_id(self) -> int:
        return self.task.task_id

    def advance(self, units: float, seconds: float, checkpoint_interval_s: float) -> None:
        if self.demand_units > 0:
            self.progress = min(1.0, self.progress + units / self.demand_units)
        else:
            self.progress = 1.0
        if self.task.task_class.checkpointable:
            self.since_checkpoint_s += seconds
            if self.since_checkpoint_s >= checkpoint_interval_s or self.progress >= 1.0:
                self.checkpoint()

    def checkpoint(self) -> None:
        self.checkpoint_progress = self.progress
        self.since_checkpoint_s = 0.0

    def rollback(self) -> None:
        self.progress = self.checkpoint_progress
        self.since_checkpoint_s = 0.0


def apply_seu_faults(running: list[TaskExecution], count: int, rng: np.random.Generator) -> list[int]:
    """Roll back uniformly chosen running tasks; returns affected task ids."""
    hit: list[int] = []
    if not running:
        return hit
    for _ in range(count):
        ex = running[int(rng.integers(len(running)))]
        ex.rollback()
        hit.append(ex.task_id)
    return hit


@dataclass
class StepOutcome:
    completed: list[tuple[TaskExecution, float]]
    utilization: float
    energy_load_W: float
    progressed: list[int]


@dataclass
class Node:
    """Mutable runtime state of one node, owned by the simulation loop."""

    spec: NodeSpec
    health: NodeHealth = field(default_factory=NodeHealth)
    dose_rate_krad_per_year: float = 0.0
    running: list[TaskExecution] = field(default_factory=list)
    queue: deque = field(default_factory=deque)
    derating_curve: DeratingCurve = linear_derating

    @property
    def node_id(self) -> int:
        return self.spec.node_id

    @property
    def alive(self) -> bool:
        return not self.health.failed

    @property
    def capacity(self) -> float:
        if self.health.failed:
            return 0.0
        return self.spec.compute_capacity * self.derating_curve(self.health.dose_fraction)

    @property
    def has_free_slot(self) -> bool:
        return self.alive and len(self.running) < self.spec.max_concurrent


def execute_step(
    node: Node,
    dt_s: float,
    t0: float = 0.0,
    tx_load_W: float = 0.0,
    checkpoint_interval_s: float = 60.0,
) -> StepOutcome:
    """Equal-share processor sharing of ``node.running`` over [t0, t0 + dt_s].

    Tasks whose ``available_from`` lies inside the step join at that time.
    Completed executions are removed from ``node.running`` and returned with
    their exact completion time.
    """
    if not dt_s > 0:
        raise ValueError("dt_s must be > 0")
    cap = node.capacity
    t_end = t0 + dt_s
    pending = sorted(node.running, key=lambda e: (max(e.available_from, t0), e.task_id))
    active: list[TaskExecution] = []
    completed: list[tuple[TaskExecution, float]] = []
    progressed: set[int] = set()
    busy = 0.0
    t = t0
    while t < t_end:
        while pending and max(pending[0].available_from, t0) <= t:
            active.append(pending.pop(0))
        next_join = max(pending[0].available_from, t0) if pending else t_end
        if not active or cap <= 0:
            t = min(next_join, t_end)
            continue
        share = cap / len(active)
        # time until the first active task finishes at the current share
        remaining = [(1.0 - e.progress) * e.demand_units for e in active]
        t_fin = min(r / share for r in remaining)
        t_next = min(t + t_fin, next_join, t_end)
        span = t_next - t
        busy += span
        done = []
        for e, rem in zip(active, remaining):
            units = share * span
            if rem - units <= 1e-9 * max(1.0, e.demand_units):
                units = rem
            e.advance(units, span, checkpoint_interval_s)
            progressed.add(e.task_id)
            if e.progress >= 1.0:
                done.append(e)
        for e in done:
            active.remove(e)
            completed.append((e, t_next))
        t = t_next
    done_ids = {id(e) for e, _ in completed}
    node.running = [e for e in node.running if id(e) not in done_ids]
    utilization = min(1.0, busy / dt_s)
    p = node.spec.power
    load = 0.0 if p is None else p.p_idle_W + p.p_compute_max_W * utilization + tx_load_W
    return StepOutcome(completed, utilization, load, sorted(progressed))
