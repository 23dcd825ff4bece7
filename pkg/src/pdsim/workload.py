"""Request traces, length filtering and seeded Poisson arrivals.

Trace files are JSON lines with integer ``prompt_len`` and ``output_len``;
arrival streams add ``arrival_time_ms``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    prompt_len: int
    output_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ValueError(f"lengths must be >= 1, got {self.prompt_len}/{self.output_len}")


@dataclass(frozen=True)
class WorkloadSpec:
    qps: float
    seed: int = 0
    n_requests: int = 1000
    max_prompt_len: float = math.inf
    max_output_len: float = math.inf
    replay_in_order: bool = False

    def __post_init__(self):
        if not self.qps > 0:
            raise ValueError("qps must be > 0")
        if self.n_requests < 1:
            raise ValueError("n_requests must be >= 1")


Arrival = Tuple[float, TraceRecord]


def _as_int(value, field, lineno):
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceError(f"line {lineno}: field {field!r} must be an integer, got {value!r}")
    return value


def load_trace(path: Union[str, Path]) -> List[TraceRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: malformed record ({exc.msg})") from None
            if not isinstance(obj, dict) or "prompt_len" not in obj or "output_len" not in obj:
                raise TraceError(f"line {lineno}: expected prompt_len and output_len")
            try:
                records.append(TraceRecord(_as_int(obj["prompt_len"], "prompt_len", lineno),
                                           _as_int(obj["output_len"], "output_len", lineno)))
            except ValueError as exc:
                if isinstance(exc, TraceError):
                    raise
                raise TraceError(f"line {lineno}: {exc}") from None
    if not records:
        raise TraceError(f"{path}: trace is empty")
    return records


def dump_trace(records: Iterable[TraceRecord], path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"prompt_len": rec.prompt_len, "output_len": rec.output_len}) + "\n")


def dump_arrivals(arrivals: Iterable[Arrival], path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for t, rec in arrivals:
            fh.write(json.dumps({"arrival_time_ms": t, "prompt_len": rec.prompt_len,
                                 "output_len": rec.output_len}) + "\n")


def filter_lengths(records: Iterable[TraceRecord], max_prompt=math.inf, max_output=math.inf) -> List[TraceRecord]:
    return [r for r in records if r.prompt_len <= max_prompt and r.output_len <= max_output]


def generate_arrivals(spec: WorkloadSpec, records: Sequence[TraceRecord]) -> List[Arrival]:
    """Exponential gaps with mean 1000/qps ms; records drawn with replacement.

    With ``replay_in_order`` the trace is cycled in file order instead.
    """
    if not records:
        raise ValueError("records must be non-empty")
    rng = np.random.default_rng(spec.seed)
    gaps = rng.exponential(1000.0 / spec.qps, size=spec.n_requests)
    # a zero gap would break strict ordering of arrivals
    gaps = np.maximum(gaps, 1e-6)
    times = np.cumsum(gaps)
    if spec.replay_in_order:
        idx = np.arange(spec.n_requests) % len(records)
    else:
        idx = rng.integers(len(records), size=spec.n_requests)
    return [(float(t), records[int(i)]) for t, i in zip(times, idx)]


# Synthetic traces. Log-normal lengths loosely shaped after public chat and
# summarization datasets; they are NOT samples of those datasets.
SYNTHETIC_PRESETS = {
    "chat": dict(prompt_median=600, prompt_sigma=0.9, output_median=180, output_sigma=0.8,
                 max_prompt=2048, max_output=1024),
    "summarization": dict(prompt_median=4000, prompt_sigma=0.6, output_median=180, output_sigma=0.5,
                          max_prompt=16384, max_output=1024),
}


def synthetic_trace(
    n: int,
    seed: int = 0,
    preset: str = "summarization",
    min_prompt: int = 1,
    min_output: int = 1,
    **overrides,
) -> List[TraceRecord]:
    """Synthetic length trace (labelled synthetic; for tests and demos)."""
    params = dict(SYNTHETIC_PRESETS[preset])
    params.update(overrides)
    rng = np.random.default_rng(seed)
    p = rng.lognormal(math.log(params["prompt_median"]), params["prompt_sigma"], size=n)
    o = rng.lognormal(math.log(params["output_median"]), params["output_sigma"], size=n)
    p = np.clip(np.rint(p), min_prompt, params["max_prompt"]).astype(int)
    o = np.clip(np.rint(o), min_output, params["max_output"]).astype(int)
    return [TraceRecord(int(a), int(b)) for a, b in zip(p, o)]
