"""Experiment configuration files (YAML or JSON).

Every field that carries a unit names it (``*_ms``, ``*_tokens``,
``*_bytes``...). Parsing collects all field-level problems before failing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .cluster import ClusterConfig
from .cost_model import CalibrationProfile
from .decode_flow import FlowPolicy
from .engine import Mode, ModeConfigError, SchedulingOptions, validate_mode
from .metrics import SloConfig
from .workload import SYNTHETIC_PRESETS


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class WorkloadConfig:
    qps: float = 2.0
    n_requests: int = 1000
    trace_path: Optional[str] = None
    synthetic_preset: str = "summarization"
    synthetic_records: int = 5000
    synthetic_seed: int = 0
    max_prompt_tokens: Optional[int] = None
    max_output_tokens: Optional[int] = None
    replay_in_order: bool = False


@dataclass(frozen=True)
class BreakdownConfig:
    base_chunk_tokens: int = 256
    p_heavy_chunk_tokens: int = 1024
    n_p_heavy: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode
    cluster: ClusterConfig
    slo: SloConfig
    policy: FlowPolicy = FlowPolicy()
    profile: CalibrationProfile = CalibrationProfile()
    workload: WorkloadConfig = WorkloadConfig()
    scheduler: Optional[SchedulingOptions] = None
    seed: int = 0
    seeds: Optional[List[int]] = None
    qps_grid: Optional[List[float]] = None
    breakdown: BreakdownConfig = BreakdownConfig()
    out_dir: str = "out"
    write_events: bool = False

    @property
    def options(self) -> SchedulingOptions:
        return self.scheduler if self.scheduler is not None else SchedulingOptions.for_mode(self.mode)

    @property
    def seed_list(self) -> List[int]:
        return list(self.seeds) if self.seeds else [self.seed, self.seed + 1, self.seed + 2]

    def with_cluster(self, **changes) -> "ExperimentConfig":
        return replace(self, cluster=replace(self.cluster, **changes))

    def with_workload(self, **changes) -> "ExperimentConfig":
        return replace(self, workload=replace(self.workload, **changes))


# file key -> dataclass attribute, per section
_CLUSTER_KEYS = {
    "n_p_heavy": "n_p_heavy",
    "n_d_heavy": "n_d_heavy",
    "s_p_tokens": "s_p",
    "s_d_tokens": "s_d",
    "kv_capacity_tokens": "kv_capacity",
    "max_context_tokens": "max_context",
}
_SLO_KEYS = {"ttft_ms": "ttft_ms", "tpot_ms": "tpot_ms", "attainment_target": "attainment_target"}
_POLICY_KEYS = {"watermark_m": "watermark_m", "approach_factor_alpha": "approach_factor_alpha"}
_PROFILE_KEYS = {f.name: f.name for f in fields(CalibrationProfile)}
_SCHED_KEYS = {f.name: f.name for f in fields(SchedulingOptions)}
_BREAKDOWN_KEYS = {f.name: f.name for f in fields(BreakdownConfig)}
_WORKLOAD_KEYS = {
    "qps": "qps",
    "n_requests": "n_requests",
    "trace_path": "trace_path",
    "max_prompt_tokens": "max_prompt_tokens",
    "max_output_tokens": "max_output_tokens",
    "replay_in_order": "replay_in_order",
}
_SYNTH_KEYS = {"preset": "synthetic_preset", "n_records": "synthetic_records", "seed": "synthetic_seed"}

_INT_ATTRS = {"n_p_heavy", "n_d_heavy", "s_p", "s_d", "kv_capacity", "max_context", "ref_decode_batch",
              "kv_bytes_per_token", "n_requests", "synthetic_records", "synthetic_seed", "max_prompt_tokens",
              "max_output_tokens", "base_chunk_tokens", "p_heavy_chunk_tokens"}
_BOOL_ATTRS = {"init_placement", "flowing_decode", "early_reject", "replay_in_order"}
_STR_ATTRS = {"prefill_routing", "trace_path", "synthetic_preset"}
_OPTIONAL_ATTRS = {"trace_path", "max_prompt_tokens", "max_output_tokens"}


def _coerce(path: str, attr: str, value: Any, problems: List[str]):
    if value is None:
        if attr in _OPTIONAL_ATTRS:
            return None
        problems.append(f"{path}: must not be null")
        return None
    if attr in _BOOL_ATTRS:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
        return value
    if attr in _STR_ATTRS:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{path}: expected a number, got {value!r}")
        return value
    if attr in _INT_ATTRS:
        if isinstance(value, float) and not value.is_integer():
            problems.append(f"{path}: expected an integer, got {value!r}")
            return value
        return int(value)
    return float(value)


def _section(raw: dict, name: str, keys: Dict[str, str], problems: List[str], required=()) -> Dict[str, Any]:
    data = raw.get(name, {})
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.append(f"{name}: expected a mapping")
        return {}
    out = {}
    for key, value in data.items():
        if key not in keys:
            problems.append(f"{name}.{key}: unknown field")
            continue
        out[keys[key]] = _coerce(f"{name}.{key}", keys[key], value, problems)
    for key in required:
        if key not in data:
            problems.append(f"{name}.{key}: required")
    return out


def _build(cls, path: str, kwargs: dict, problems: List[str]):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path}: {exc}")
        return None


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    problems: List[str] = []
    known = {"mode", "seed", "cluster", "slo", "policy", "profile", "workload", "scheduler", "goodput",
             "breakdown", "output"}
    for key in raw:
        if key not in known:
            problems.append(f"{key}: unknown section")

    mode = None
    try:
        mode = Mode(raw.get("mode", "hybrid"))
    except ValueError:
        problems.append(f"mode: must be one of {[m.value for m in Mode]}, got {raw.get('mode')!r}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        problems.append(f"seed: expected an integer, got {seed!r}")

    cluster_kw = _section(raw, "cluster", _CLUSTER_KEYS, problems,
                          required=("n_p_heavy", "n_d_heavy", "s_p_tokens", "s_d_tokens", "kv_capacity_tokens"))
    slo_kw = _section(raw, "slo", _SLO_KEYS, problems, required=("ttft_ms", "tpot_ms"))
    policy_kw = _section(raw, "policy", _POLICY_KEYS, problems)
    profile_kw = _section(raw, "profile", _PROFILE_KEYS, problems)
    breakdown_kw = _section(raw, "breakdown", _BREAKDOWN_KEYS, problems)

    workload_raw = dict(raw.get("workload") or {})
    synth_raw = workload_raw.pop("synthetic", None)
    workload_kw = _section({"workload": workload_raw}, "workload", _WORKLOAD_KEYS, problems)
    if synth_raw is not None:
        workload_kw.update(_section({"workload.synthetic": synth_raw}, "workload.synthetic", _SYNTH_KEYS, problems))
    preset = workload_kw.get("synthetic_preset", "summarization")
    if preset not in SYNTHETIC_PRESETS:
        problems.append(f"workload.synthetic.preset: must be one of {sorted(SYNTHETIC_PRESETS)}, got {preset!r}")

    sched = None
    if raw.get("scheduler") is not None:
        sched_kw = _section(raw, "scheduler", _SCHED_KEYS, problems)
        if mode is not None and not problems:
            sched = _build(lambda **kw: SchedulingOptions.for_mode(mode, **kw), "scheduler", sched_kw, problems)

    goodput_raw = raw.get("goodput") or {}
    qps_grid = goodput_raw.get("qps_grid")
    seeds = goodput_raw.get("seeds")
    for key in goodput_raw:
        if key not in ("qps_grid", "seeds"):
            problems.append(f"goodput.{key}: unknown field")
    if qps_grid is not None:
        if not isinstance(qps_grid, list) or not all(isinstance(q, (int, float)) and not isinstance(q, bool)
                                                     for q in qps_grid):
            problems.append("goodput.qps_grid: expected a list of numbers")
            qps_grid = None
        else:
            qps_grid = [float(q) for q in qps_grid]
            if any(b <= a for a, b in zip(qps_grid, qps_grid[1:])):
                problems.append("goodput.qps_grid: must be strictly increasing")
    if seeds is not None and (not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds) or not seeds):
        problems.append("goodput.seeds: expected a non-empty list of integers")

    output_raw = raw.get("output") or {}
    for key in output_raw:
        if key not in ("out_dir", "write_events"):
            problems.append(f"output.{key}: unknown field")
    out_dir = output_raw.get("out_dir", "out")
    write_events = output_raw.get("write_events", False)
    if not isinstance(write_events, bool):
        problems.append("output.write_events: expected true/false")

    if problems:
        raise ConfigError(problems)

    cluster = _build(ClusterConfig, "cluster", cluster_kw, problems)
    slo = _build(SloConfig, "slo", slo_kw, problems)
    policy = _build(FlowPolicy, "policy", policy_kw, problems)
    profile = _build(CalibrationProfile, "profile", profile_kw, problems)
    workload = _build(WorkloadConfig, "workload", workload_kw, problems)
    breakdown = _build(BreakdownConfig, "breakdown", breakdown_kw, problems)
    if workload is not None:
        if not workload.qps > 0:
            problems.append("workload.qps: must be > 0")
        if workload.n_requests < 1:
            problems.append("workload.n_requests: must be >= 1")
    if cluster is not None and mode is not None:
        try:
            validate_mode(mode, cluster)
        except ModeConfigError as exc:
            problems.append(f"mode/cluster: {exc}")
        if workload is not None:
            need = (workload.max_prompt_tokens or 0) + (workload.max_output_tokens or 0)
            if need > cluster.kv_capacity:
                problems.append("cluster.kv_capacity_tokens: smaller than max_prompt_tokens + max_output_tokens")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        mode=mode, cluster=cluster, slo=slo, policy=policy, profile=profile, workload=workload,
        scheduler=sched, seed=seed, seeds=seeds, qps_grid=qps_grid, breakdown=breakdown,
        out_dir=str(out_dir), write_events=write_events,
    )


def _inverse(keys: Dict[str, str], obj) -> dict:
    return {k: getattr(obj, attr) for k, attr in keys.items()}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    wl = cfg.workload
    workload = _inverse(_WORKLOAD_KEYS, wl)
    workload["synthetic"] = _inverse(_SYNTH_KEYS, wl)
    out = {
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "cluster": _inverse(_CLUSTER_KEYS, cfg.cluster),
        "slo": _inverse(_SLO_KEYS, cfg.slo),
        "policy": _inverse(_POLICY_KEYS, cfg.policy),
        "profile": _inverse(_PROFILE_KEYS, cfg.profile),
        "workload": workload,
        "breakdown": asdict(cfg.breakdown),
        "output": {"out_dir": cfg.out_dir, "write_events": cfg.write_events},
    }
    if cfg.scheduler is not None:
        out["scheduler"] = asdict(cfg.scheduler)
    goodput = {}
    if cfg.qps_grid is not None:
        goodput["qps_grid"] = list(cfg.qps_grid)
    if cfg.seeds is not None:
        goodput["seeds"] = list(cfg.seeds)
    if goodput:
        out["goodput"] = goodput
    return out


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML/JSON ({exc})"]) from None
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
