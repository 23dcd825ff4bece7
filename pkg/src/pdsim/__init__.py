"""Discrete-event simulator for multi-instance LLM serving.

Covers PD aggregation, PD disaggregation and a hybrid mode in which
P-heavy (large prefill chunk) and D-heavy (small chunk) instances share
work through length-aware prefill routing and flowing decode migration.
"""

from .cluster import ClusterConfig, Instance, InstanceKind
from .cost_model import DEFAULT_PROFILE, CalibrationProfile
from .decode_flow import FlowPolicy
from .engine import Mode, SchedulingOptions, SimulationDeadlock, Simulator, run, simulate
from .metrics import MetricsReport, SloConfig, build_report
from .workload import TraceRecord, WorkloadSpec, generate_arrivals, synthetic_trace

__all__ = [
    "CalibrationProfile",
    "ClusterConfig",
    "DEFAULT_PROFILE",
    "FlowPolicy",
    "Instance",
    "InstanceKind",
    "MetricsReport",
    "Mode",
    "SchedulingOptions",
    "SimulationDeadlock",
    "Simulator",
    "SloConfig",
    "TraceRecord",
    "WorkloadSpec",
    "build_report",
    "generate_arrivals",
    "run",
    "simulate",
    "synthetic_trace",
]
