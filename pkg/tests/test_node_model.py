import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbdcsim.constants import YEAR_S
from sbdcsim.node_model import (
    Node,
    NodeDead,
    NodeHealth,
    NodeSpec,
    TaskExecution,
    accumulate_dose,
    apply_seu_faults,
    derated_capacity,
    execute_step,
    failure_risk,
    require_alive,
    sample_seu_faults,
    time_to_failure,
)
from sbdcsim.orbits import Layer
from sbdcsim.power_thermal import PowerSpec
from sbdcsim.tasks import Task, TaskClass

SPEC = NodeSpec(0, Layer.LEO, 10.0, power=PowerSpec())


def _task(tid, demand, cls=TaskClass.BULK_TRAINING):
    return Task(tid, cls, 0.0, 0, 0.0, demand, 0.0)


def test_derating_examples():
    assert derated_capacity(SPEC, NodeHealth(0.0, 50.0)) == 10.0
    assert derated_capacity(SPEC, NodeHealth(25.0, 50.0)) == pytest.approx(7.5)
    dead = NodeHealth(50.0, 50.0)
    assert dead.failed and derated_capacity(SPEC, dead) == 0.0
    with pytest.raises(NodeDead):
        require_alive(SPEC, dead)


def test_dose_failure_times():
    assert time_to_failure(NodeHealth(0.0, 50.0), 5.0) == pytest.approx(10 * YEAR_S)
    assert time_to_failure(NodeHealth(0.0, 10.0), 100.0) / 86400 == pytest.approx(36.525, abs=0.01)
    h = NodeHealth(0.0, 10.0)
    assert accumulate_dose(h, 0.0, 100.0) is h
    h = accumulate_dose(h, 100.0, 0.1 * YEAR_S * 0.999)
    assert not h.failed
    assert accumulate_dose(h, 100.0, 0.002 * YEAR_S).failed


def test_seu_zero_rate():
    rng = np.random.default_rng(0)
    assert all(sample_seu_faults(NodeHealth(), 1000.0, rng) == 0 for _ in range(100))


def test_seu_probability():
    rng = np.random.default_rng(1234)
    h = NodeHealth(seu_rate_per_s=1e-4)
    hits = sum(sample_seu_faults(h, 1000.0, rng) >= 1 for _ in range(100_000))
    assert hits / 100_000 == pytest.approx(1 - math.exp(-0.1), abs=0.003)


def test_seu_rollback():
    ex = TaskExecution(_task(1, 100.0), 0, 0.0, progress=0.9, checkpoint_progress=0.6)
    hit = apply_seu_faults([ex], 1, np.random.default_rng(0))
    assert hit == [1] and ex.progress == 0.6


def test_execute_idle_load():
    node = Node(SPEC)
    out = execute_step(node, 10.0)
    assert out.energy_load_W == SPEC.power.p_idle_W
    assert out.completed == []


def test_single_task_completes_in_ten_seconds():
    node = Node(SPEC)
    node.running.append(TaskExecution(_task(1, 100.0), 0, 0.0))
    out = execute_step(node, 10.0)
    assert [(e.task_id, tau) for e, tau in out.completed] == [(1, pytest.approx(10.0))]
    assert out.utilization == pytest.approx(1.0)


def test_two_tasks_share_equally():
    node = Node(SPEC)
    node.running += [TaskExecution(_task(1, 100.0), 0, 0.0), TaskExecution(_task(2, 100.0), 0, 0.0)]
    done = []
    t = 0.0
    while node.running:
        out = execute_step(node, 5.0, t)
        done += [(e.task_id, tau) for e, tau in out.completed]
        t += 5.0
    assert done == [(1, pytest.approx(20.0)), (2, pytest.approx(20.0))]


def test_failure_risk_examples():
    assert failure_risk(NodeHealth(seu_rate_per_s=1e-3), 0.0) == 0.0
    assert failure_risk(NodeHealth(), 1000.0) == 0.0
    assert failure_risk(NodeHealth(seu_rate_per_s=1e-4), 1000.0) == pytest.approx(0.0952, abs=1e-4)


def test_checkpointing_only_for_checkpointable():
    ex = TaskExecution(_task(1, 100.0, TaskClass.REAL_TIME_INFERENCE), 0, 0.0)
    ex.advance(50.0, 120.0, 60.0)
    assert ex.checkpoint_progress == 0.0
    ex = TaskExecution(_task(2, 100.0), 0, 0.0)
    ex.advance(50.0, 60.0, 60.0)
    assert ex.checkpoint_progress == 0.5


@settings(max_examples=60, deadline=None)
@given(demands=st.lists(st.floats(1, 500), min_size=1, max_size=4), dt=st.floats(1, 10))
def test_work_conservation(demands, dt):
    """Delivered units equal capacity times busy time, and every task finishes."""
    node = Node(SPEC)
    for i, d in enumerate(demands):
        node.running.append(TaskExecution(_task(i, d), 0, 0.0))
    t = 0.0
    finish = {}
    busy = 0.0
    while node.running:
        out = execute_step(node, dt, t)
        busy += out.utilization * dt
        finish.update({e.task_id: tau for e, tau in out.completed})
        t += dt
    assert sorted(finish) == list(range(len(demands)))
    assert busy * 10.0 == pytest.approx(sum(demands), rel=1e-9)
    assert max(finish.values()) == pytest.approx(sum(demands) / 10.0, rel=1e-9)
