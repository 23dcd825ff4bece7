"""Experiment drivers: single runs, parameter sweeps, goodput and the staged breakdown."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .cluster import ClusterConfig
from .config import ExperimentConfig
from .cost_model import CalibrationProfile, prefill_capacity
from .engine import Mode, SchedulingOptions, SimulationResult, simulate, validate_mode
from .metrics import GoodputResult, MetricsReport, build_report, goodput_search
from .workload import TraceRecord, WorkloadSpec, filter_lengths, generate_arrivals, load_trace, synthetic_trace

SWEEP_AXES = ("r_pd", "s_p", "s_d", "qps")


def trace_for(cfg: ExperimentConfig) -> List[TraceRecord]:
    wl = cfg.workload
    if wl.trace_path:
        records = load_trace(wl.trace_path)
    else:
        records = synthetic_trace(wl.synthetic_records, seed=wl.synthetic_seed, preset=wl.synthetic_preset)
    max_p = wl.max_prompt_tokens if wl.max_prompt_tokens is not None else math.inf
    max_o = wl.max_output_tokens if wl.max_output_tokens is not None else math.inf
    kept = filter_lengths(records, max_p, max_o)
    kept = [r for r in kept if r.prompt_len + r.output_len <= cfg.cluster.kv_capacity]
    if not kept:
        raise ValueError("no trace records left after length filtering")
    return kept


def simulate_config(
    cfg: ExperimentConfig,
    records: Optional[Sequence[TraceRecord]] = None,
    record_events: bool = False,
) -> Tuple[MetricsReport, SimulationResult]:
    records = trace_for(cfg) if records is None else records
    wl = cfg.workload
    spec = WorkloadSpec(qps=wl.qps, seed=cfg.seed, n_requests=wl.n_requests, replay_in_order=wl.replay_in_order)
    arrivals = generate_arrivals(spec, records)
    result = simulate(cfg.cluster, cfg.policy, cfg.profile, cfg.slo, arrivals, mode=cfg.mode,
                      options=cfg.options, seed=cfg.seed, record_events=record_events)
    meta = {
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "qps": wl.qps,
        "n_requests": wl.n_requests,
        "cluster": {"r_pd": cfg.cluster.r_pd, "s_p_tokens": cfg.cluster.s_p, "s_d_tokens": cfg.cluster.s_d,
                    "kv_capacity_tokens": cfg.cluster.kv_capacity},
        "scheduler": {"prefill_routing": cfg.options.prefill_routing,
                      "init_placement": cfg.options.init_placement,
                      "flowing_decode": cfg.options.flowing_decode,
                      "early_reject": cfg.options.early_reject},
    }
    return build_report(result, cfg.slo, metadata=meta), result


def _attainment_at(cfg: ExperimentConfig, qps: float, seed: int) -> float:
    point = replace(cfg.with_workload(qps=qps), seed=seed)
    return simulate_config(point)[0].attainment


def _mapper(jobs: int):
    """Returns (map_fn, closer); results keep submission order either way."""
    if jobs <= 1:
        return map, lambda: None
    pool = ProcessPoolExecutor(max_workers=jobs)
    return pool.map, pool.shutdown


def goodput(cfg: ExperimentConfig, qps_grid: Optional[Sequence[float]] = None,
            seeds: Optional[Sequence[int]] = None, jobs: int = 1) -> GoodputResult:
    grid = qps_grid if qps_grid is not None else cfg.qps_grid
    if not grid:
        raise ValueError("goodput needs a non-empty qps_grid")
    map_fn, close = _mapper(jobs)
    try:
        return goodput_search(partial(_attainment_at, cfg), grid, seeds or cfg.seed_list,
                              target=cfg.slo.attainment_target, map_fn=map_fn)
    finally:
        close()


def _parse_ratio(value) -> Tuple[int, int]:
    text = str(value)
    try:
        p, d = text.split(":")
        return int(p), int(d)
    except ValueError:
        raise ValueError(f"r_pd values look like '2:2', got {value!r}") from None


def sweep_point(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "r_pd":
        p, d = _parse_ratio(value)
        return cfg.with_cluster(n_p_heavy=p, n_d_heavy=d)
    if axis == "s_p":
        return cfg.with_cluster(s_p=int(value))
    if axis == "s_d":
        return cfg.with_cluster(s_d=int(value))
    if axis == "qps":
        return cfg.with_workload(qps=float(value))
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def _sweep_row(cfg: ExperimentConfig, axis: str, value) -> Dict[str, object]:
    row: Dict[str, object] = {"axis": axis, "value": value}
    try:
        point = sweep_point(cfg, axis, value)
        validate_mode(point.mode, point.cluster)
        report, _ = simulate_config(point)
    except Exception as exc:  # one bad point must not sink the sweep
        row.update(error=f"{type(exc).__name__}: {exc}")
        return row
    agg = report.aggregates
    row.update(
        error=None,
        attainment=agg["attainment"],
        p50_ttft_ms=agg["p50_ttft_ms"],
        p90_ttft_ms=agg["p90_ttft_ms"],
        p50_tpot_ms=agg["p50_tpot_ms"],
        p90_tpot_ms=agg["p90_tpot_ms"],
        n_completed=agg["n_completed"],
        degrade=agg["migrations"]["degrade"],
        backflow=agg["migrations"]["backflow"],
    )
    return row


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, jobs: int = 1) -> List[Dict[str, object]]:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    map_fn, close = _mapper(jobs)
    try:
        return list(map_fn(partial(_sweep_row, cfg, axis), values))
    finally:
        close()


# -- staged breakdown ----------------------------------------------------------

BREAKDOWN_STAGES = ("aggregation", "+heterogeneous_chunks", "+flowing_decode", "+length_aware_prefill")


def breakdown_configs(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """Four cumulative configurations on the same instance count and workload.

    1. every instance at the base chunk, decodes stay where they prefilled;
    2. ``n_p_heavy`` instances switch to the large chunk (no migration yet);
    3. add initial decode placement, degrade and backflow;
    4. replace round-robin prefill routing with length-aware routing.
    """
    b = cfg.breakdown
    n = cfg.cluster.n_instances
    if not 0 < b.n_p_heavy < n:
        raise ValueError("breakdown.n_p_heavy must leave at least one instance of each kind")
    plain = SchedulingOptions(prefill_routing="round_robin", init_placement=False, flowing_decode=False,
                              early_reject=False)
    flowing = replace(plain, init_placement=True, flowing_decode=True)
    base = cfg.with_cluster(n_p_heavy=0, n_d_heavy=n, s_p=b.base_chunk_tokens, s_d=b.base_chunk_tokens)
    hetero = cfg.with_cluster(n_p_heavy=b.n_p_heavy, n_d_heavy=n - b.n_p_heavy, s_p=b.p_heavy_chunk_tokens,
                              s_d=b.base_chunk_tokens)
    return [
        (BREAKDOWN_STAGES[0], replace(base, mode=Mode.AGGREGATION, scheduler=plain)),
        (BREAKDOWN_STAGES[1], replace(hetero, mode=Mode.HYBRID, scheduler=plain)),
        (BREAKDOWN_STAGES[2], replace(hetero, mode=Mode.HYBRID, scheduler=flowing)),
        (BREAKDOWN_STAGES[3], replace(hetero, mode=Mode.HYBRID,
                                      scheduler=replace(flowing, prefill_routing="length_aware"))),
    ]


def _stage_row(stage: Tuple[str, ExperimentConfig], seed: int) -> Dict[str, object]:
    name, cfg = stage
    report, _ = simulate_config(replace(cfg, seed=seed))
    agg = report.aggregates
    return {"stage": name, "seed": seed, "attainment": agg["attainment"], **agg["migrations"],
            "preemptions": agg["preemptions"]}


def breakdown(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None, jobs: int = 1) -> List[Dict[str, object]]:
    """Mean attainment and migration counts per stage (averaged over seeds)."""
    seeds = list(seeds or cfg.seed_list)
    stages = breakdown_configs(cfg)
    pairs = [(st, s) for st in stages for s in seeds]
    map_fn, close = _mapper(jobs)
    try:
        rows = list(map_fn(_stage_row, [p[0] for p in pairs], [p[1] for p in pairs]))
    finally:
        close()
    out = []
    for k, (name, _) in enumerate(stages):
        mine = rows[k * len(seeds):(k + 1) * len(seeds)]
        out.append({
            "stage": name,
            "attainment": sum(r["attainment"] for r in mine) / len(mine),
            "init": sum(r["init"] for r in mine),
            "degrade": sum(r["degrade"] for r in mine),
            "backflow": sum(r["backflow"] for r in mine),
            "preemptions": sum(r["preemptions"] for r in mine),
            "per_seed": [r["attainment"] for r in mine],
        })
    return out


# -- modeled capacity ----------------------------------------------------------

def modeled_prefill_capacity(cluster: ClusterConfig, mode: Mode, profile: CalibrationProfile,
                             prompt_len: int = 3000, decode_batch: int = 16) -> float:
    """Cluster prefill throughput (tokens/s) from the iteration-time model.

    Disaggregated P instances run prefill-only batches; every other
    prefill-capable instance carries ``decode_batch`` co-running decodes.
    """
    mode = Mode(mode)
    chunks, batches = [], []
    for inst in cluster.build():
        if not inst.admits_prefill:
            continue
        chunks.append(inst.chunk_size)
        batches.append(0 if (mode is Mode.DISAGGREGATION and inst.is_p_heavy) else decode_batch)
    return prefill_capacity(profile, chunks, prompt_len=prompt_len, decode_batch=batches)


def evaluate_many(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    map_fn, close = _mapper(jobs)
    try:
        return list(map_fn(fn, items))
    finally:
        close()
