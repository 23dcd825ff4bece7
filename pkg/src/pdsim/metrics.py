"""Latency, interference, SLO attainment and goodput.

TTFT runs from arrival to the first token reaching the client, so it
includes prefill queueing, prefill execution, the KV transfer to the decode
instance and any wait for decode KV slots. TPOT is the decode wall time
divided by ``output_len - 1``; a single-token output has TPOT 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class SloConfig:
    ttft_ms: float
    tpot_ms: float
    attainment_target: float = 0.90

    def __post_init__(self):
        if not (self.ttft_ms > 0 and self.tpot_ms > 0):
            raise ValueError("SLO bounds must be positive")
        if not 0 < self.attainment_target <= 1:
            raise ValueError("attainment_target must be in (0, 1]")


def compute_ttft(lc) -> Optional[float]:
    if lc.first_token_ms is None:
        return None
    return lc.first_token_ms - lc.arrival_ms


def compute_tpot(lc) -> float:
    if lc.completion_ms is None:
        raise ValueError(f"request {lc.request_id} did not complete")
    if lc.output_len == 1:
        return 0.0
    return (lc.completion_ms - lc.first_token_ms) / (lc.output_len - 1)


def ttft_segments(lc) -> Dict[str, float]:
    """Split TTFT into prefill queue, prefill execution, transfer and decode queue."""
    prefill_end = lc.prefill_end_ms
    ready = lc.init_transfer_end_ms if lc.init_transfer_end_ms is not None else prefill_end
    return {
        "prefill_queue_ms": lc.prefill_start_ms - lc.arrival_ms,
        "prefill_exec_ms": prefill_end - lc.prefill_start_ms,
        "transfer_ms": ready - prefill_end,
        "decode_queue_ms": lc.first_token_ms - ready,
    }


def decode_prefill_tokens(lc, prefill_log: Mapping[int, Sequence[int]]) -> int:
    """Prefill tokens computed in the iterations that advanced this request's decode."""
    return sum(sum(prefill_log[iid][a:b]) for iid, a, b in lc.decode_segments)


def interference_intensity(lc, prefill_log: Mapping[int, Sequence[int]]) -> float:
    """Co-scheduled prefill tokens per output token."""
    return decode_prefill_tokens(lc, prefill_log) / lc.output_len


@dataclass
class RequestMetrics:
    request_id: int
    prompt_len: int
    output_len: int
    arrival_ms: float
    prefill_instance: Optional[int]
    completed: bool
    rejected: bool
    ttft_ms: Optional[float]
    tpot_ms: Optional[float]
    prefill_queue_ms: Optional[float]
    prefill_exec_ms: Optional[float]
    transfer_ms: Optional[float]
    decode_queue_ms: Optional[float]
    interference_intensity: Optional[float]
    migration_count: int
    degrade_count: int
    backflow_count: int
    preemptions: int
    fallback_routed: bool
    slo_met: bool


REQUEST_COLUMNS = [f for f in RequestMetrics.__dataclass_fields__]


def _pct(values, q):
    return float(np.percentile(values, q)) if len(values) else None


@dataclass
class MetricsReport:
    requests: List[RequestMetrics]
    aggregates: Dict[str, object]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def attainment(self) -> float:
        return self.aggregates["attainment"]

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "aggregates": self.aggregates}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REQUEST_COLUMNS)
        for r in self.requests:
            row = asdict(r)
            writer.writerow(["" if row[c] is None else row[c] for c in REQUEST_COLUMNS])
        return buf.getvalue()


def slo_met(ttft: Optional[float], tpot: Optional[float], slo: SloConfig) -> bool:
    return ttft is not None and tpot is not None and ttft <= slo.ttft_ms and tpot <= slo.tpot_ms


def attainment(records: Sequence[RequestMetrics]) -> float:
    if not records:
        return 0.0
    return sum(r.slo_met for r in records) / len(records)


def request_metrics(lc, prefill_log, slo: SloConfig) -> RequestMetrics:
    reasons = [m.reason for m in lc.migrations]
    if lc.completion_ms is not None:
        ttft = compute_ttft(lc)
        tpot = compute_tpot(lc)
        seg = ttft_segments(lc)
        intensity = interference_intensity(lc, prefill_log)
    else:
        ttft = tpot = intensity = None
        seg = dict.fromkeys(("prefill_queue_ms", "prefill_exec_ms", "transfer_ms", "decode_queue_ms"))
    return RequestMetrics(
        request_id=lc.request_id,
        prompt_len=lc.prompt_len,
        output_len=lc.output_len,
        arrival_ms=lc.arrival_ms,
        prefill_instance=lc.prefill_instance,
        completed=lc.completion_ms is not None,
        rejected=lc.rejected,
        ttft_ms=ttft,
        tpot_ms=tpot,
        interference_intensity=intensity,
        migration_count=len(reasons),
        degrade_count=reasons.count("degrade"),
        backflow_count=reasons.count("backflow"),
        preemptions=lc.preemptions,
        fallback_routed=lc.fallback_routed,
        slo_met=slo_met(ttft, tpot, slo),
        **seg,
    )


def aggregate(records: Sequence[RequestMetrics]) -> Dict[str, object]:
    done = [r for r in records if r.completed]
    ttft = [r.ttft_ms for r in done]
    tpot = [r.tpot_ms for r in done]
    agg = {
        "n_requests": len(records),
        "n_completed": len(done),
        "n_rejected": sum(r.rejected for r in records),
        "attainment": attainment(records),
        "mean_interference_intensity": float(np.mean([r.interference_intensity for r in done])) if done else None,
        "migrations": {
            "init": sum(r.migration_count - r.degrade_count - r.backflow_count for r in records),
            "degrade": sum(r.degrade_count for r in records),
            "backflow": sum(r.backflow_count for r in records),
        },
        "preemptions": sum(r.preemptions for r in records),
        "fallback_routed": sum(r.fallback_routed for r in records),
    }
    for q in (50, 90, 99):
        agg[f"p{q}_ttft_ms"] = _pct(ttft, q)
        agg[f"p{q}_tpot_ms"] = _pct(tpot, q)
    return agg


def build_report(result, slo: SloConfig, metadata: Optional[dict] = None) -> MetricsReport:
    records = [request_metrics(lc, result.prefill_log, slo) for lc in result.lifecycles]
    meta = {"slo": asdict(slo)}
    meta.update(metadata or {})
    return MetricsReport(records, aggregate(records), meta)


def tail_ttft_breakdown(records: Sequence[RequestMetrics], q: float = 90.0) -> Dict[str, float]:
    """Mean TTFT segments over the requests at or above the q-th TTFT percentile."""
    done = [r for r in records if r.completed]
    cut = np.percentile([r.ttft_ms for r in done], q)
    tail = [r for r in done if r.ttft_ms >= cut]
    keys = ("prefill_queue_ms", "prefill_exec_ms", "transfer_ms", "decode_queue_ms")
    out = {k: float(np.mean([getattr(r, k) for r in tail])) for k in keys}
    out["ttft_ms"] = float(np.mean([r.ttft_ms for r in tail]))
    return out


def fit_tpot_vs_intensity(records: Sequence[RequestMetrics]):
    """Least-squares line TPOT = intercept + slope * intensity; returns (slope, intercept, r2)."""
    pts = [(r.interference_intensity, r.tpot_ms) for r in records if r.completed and r.output_len > 1]
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return float(slope), float(intercept), r2


def goodput_scan(qps_grid: Sequence[float], attainments: Sequence[float], target: float) -> float:
    """Highest grid QPS whose attainment meets ``target``; 0.0 if none does."""
    if any(b <= a for a, b in zip(qps_grid, qps_grid[1:])):
        raise ValueError("qps_grid must be strictly increasing")
    best = 0.0
    for qps, att in zip(qps_grid, attainments):
        if att >= target:
            best = qps
    return best


@dataclass
class GoodputResult:
    goodput: float
    qps_grid: List[float]
    seeds: List[int]
    attainment: Dict[float, List[float]]

    @property
    def mean_attainment(self) -> List[float]:
        return [float(np.mean(self.attainment[q])) for q in self.qps_grid]

    def to_dict(self) -> dict:
        return {
            "goodput_qps": self.goodput,
            "qps_grid": list(self.qps_grid),
            "seeds": list(self.seeds),
            "n_seeds": len(self.seeds),
            "attainment_per_seed": [self.attainment[q] for q in self.qps_grid],
            "mean_attainment": self.mean_attainment,
        }


def goodput_search(
    evaluate: Callable[[float, int], float],
    qps_grid: Sequence[float],
    seeds: Sequence[int],
    target: float = 0.90,
    map_fn: Callable = map,
) -> GoodputResult:
    """Grid-scan goodput; ``evaluate(qps, seed)`` returns one run's attainment.

    Every grid point is simulated (attainment need not be monotone in QPS).
    """
    grid = [float(q) for q in qps_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("qps_grid must be strictly increasing")
    points = [(q, s) for q in grid for s in seeds]
    values = list(map_fn(evaluate, [p[0] for p in points], [p[1] for p in points]))
    table: Dict[float, List[float]] = {q: [] for q in grid}
    for (q, _), v in zip(points, values):
        table[q].append(float(v))
    means = [float(np.mean(table[q])) for q in grid]
    return GoodputResult(goodput_scan(grid, means, target), grid, list(seeds), table)
