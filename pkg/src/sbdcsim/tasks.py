"""Workload units and their class flags."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple


class ClassFlags(NamedTuple):
    delay_sensitive: bool
    interruptible: bool
    checkpointable: bool
    delay_tolerant_ok: bool


class TaskClass(str, enum.Enum):
    REAL_TIME_INFERENCE = "RealTimeInference"
    INTERRUPTIBLE_COMPRESSION = "InterruptibleCompression"
    BULK_TRAINING = "BulkTraining"
    STORAGE_RETRIEVAL = "StorageRetrieval"
    HOUSEKEEPING = "Housekeeping"

    @property
    def flags(self) -> ClassFlags:
        return _FLAGS[self]

    @property
    def delay_sensitive(self) -> bool:
        return _FLAGS[self].delay_sensitive

    @property
    def interruptible(self) -> bool:
        return _FLAGS[self].interruptible

    @property
    def checkpointable(self) -> bool:
        return _FLAGS[self].checkpointable

    @property
    def delay_tolerant_ok(self) -> bool:
        return _FLAGS[self].delay_tolerant_ok


_FLAGS = {
    TaskClass.REAL_TIME_INFERENCE: ClassFlags(True, False, False, False),
    TaskClass.INTERRUPTIBLE_COMPRESSION: ClassFlags(False, True, True, True),
    TaskClass.BULK_TRAINING: ClassFlags(False, True, True, True),
    TaskClass.STORAGE_RETRIEVAL: ClassFlags(False, True, False, True),
    TaskClass.HOUSEKEEPING: ClassFlags(False, False, False, False),
}

ALL_CLASSES = frozenset(TaskClass)
# classes that GEO planning places globally instead of LEO-local handling
GLOBAL_CLASSES = frozenset({TaskClass.BULK_TRAINING, TaskClass.STORAGE_RETRIEVAL})


@dataclass(frozen=True)
class Task:
    """One unit of work.

    ``deadline_s`` is relative to ``arrival_time_s``. ``depends_on`` names a
    task whose completion releases this one (used for the transfer that
    follows an Earth-observation compression job).
    """

    task_id: int
    task_class: TaskClass
    arrival_time_s: float
    origin: int
    input_bits: float
    compute_demand_units: float
    output_bits: float
    deadline_s: float | None = None
    replication_k: int = 1
    workload: str = ""
    ships_result: bool = True
    depends_on: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_class", TaskClass(self.task_class))
        if self.input_bits < 0 or self.output_bits < 0:
            raise ValueError("task sizes must be >= 0")
        if self.compute_demand_units < 0:
            raise ValueError("compute demand must be >= 0")
        if self.task_class is TaskClass.INTERRUPTIBLE_COMPRESSION and self.output_bits > self.input_bits:
            raise ValueError("compression tasks cannot grow their data")
        if self.replication_k < 1:
            raise ValueError("replication_k must be >= 1")

    @property
    def absolute_deadline(self) -> float | None:
        return None if self.deadline_s is None else self.arrival_time_s + self.deadline_s

    @property
    def is_pure_transfer(self) -> bool:
        return self.compute_demand_units == 0
