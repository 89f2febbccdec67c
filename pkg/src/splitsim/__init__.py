"""Discrete-event simulator for split-phase LLM inference serving on one GPU."""

from splitsim.errors import (
    AdmissionDenied,
    ConfigError,
    ContractViolation,
    SimulationError,
    TraceError,
)
from splitsim.workload import Request, RequestState, WorkloadSpec, generate, parse_trace
from splitsim.gpu import CostModel, GpuSpec, KvBlockPool, PhaseTask, TaskKind
from splitsim.engine import SharingDiscipline, run
from splitsim.schedulers import SchedulerConfig
from splitsim.metrics import MetricsReport

__version__ = "0.1.0"

__all__ = [
    "AdmissionDenied",
    "ConfigError",
    "ContractViolation",
    "CostModel",
    "GpuSpec",
    "KvBlockPool",
    "MetricsReport",
    "PhaseTask",
    "Request",
    "RequestState",
    "SchedulerConfig",
    "SharingDiscipline",
    "SimulationError",
    "TaskKind",
    "TraceError",
    "WorkloadSpec",
    "generate",
    "parse_trace",
    "run",
]
