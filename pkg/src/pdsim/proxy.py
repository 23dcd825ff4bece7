"""Prefill routing at request arrival.

The length-aware policy keeps the instances on which the request's projected
TTFT (queue + execution + KV transfer) stays under the TTFT SLO, then picks
the one with the fewest queued prefill tokens. Slow, small-chunk instances
hold fewer queued tokens under the same SLO, so short prompts that can
afford the slowdown land there and long prompts keep the fast instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .cluster import Instance
from .cost_model import CalibrationProfile, estimate_prefill_execution, estimate_queue_time, transfer_time


@dataclass(frozen=True)
class FeasibilityEstimate:
    instance_id: int
    q_ms: float
    e_ms: float
    t_ms: float
    feasible: bool
    queued_tokens: int

    @property
    def ttft_ms(self) -> float:
        return self.q_ms + self.e_ms + self.t_ms


class ConfigurationError(ValueError):
    pass


def estimate(
    prompt_len: int,
    instance: Instance,
    profile: CalibrationProfile,
    ttft_slo_ms: float,
    will_transfer: bool,
) -> FeasibilityEstimate:
    """Snapshot TTFT projection for one instance.

    ``will_transfer`` marks instances whose decodes are moved off after
    prefill (P-heavy with a D-heavy tier present); only those pay T.
    """
    batch = len(instance.running_decode)
    queued = [r.remaining_prefill for r in instance.prefill_queue]
    q = estimate_queue_time(profile, queued, instance.chunk_size, batch) if instance.admits_prefill else 0.0
    e = estimate_prefill_execution(profile, prompt_len, instance.chunk_size, batch)
    t = transfer_time(profile, prompt_len) if will_transfer else 0.0
    return FeasibilityEstimate(instance.id, q, e, t, q + e + t < ttft_slo_ms, sum(queued))


def schedule_prefill(
    prompt_len: int,
    instances: Sequence[Instance],
    profile: CalibrationProfile,
    ttft_slo_ms: float,
    transfer_from_p_heavy: bool = True,
) -> Optional[int]:
    """Instance id for the request, or ``None`` when no instance is feasible."""
    has_d = any(i.is_d_heavy for i in instances)
    best = None
    for inst in instances:
        est = estimate(prompt_len, inst, profile, ttft_slo_ms,
                       transfer_from_p_heavy and has_d and inst.is_p_heavy)
        if not est.feasible:
            continue
        # strict < keeps the lowest id on ties
        if best is None or est.queued_tokens < best.queued_tokens:
            best = est
    return None if best is None else best.instance_id


def estimate_all(
    prompt_len: int,
    instances: Sequence[Instance],
    profile: CalibrationProfile,
    ttft_slo_ms: float,
    transfer_from_p_heavy: bool = True,
) -> List[FeasibilityEstimate]:
    has_d = any(i.is_d_heavy for i in instances)
    return [
        estimate(prompt_len, inst, profile, ttft_slo_ms, transfer_from_p_heavy and has_d and inst.is_p_heavy)
        for inst in instances
    ]


def prefill_eligible(instances: Sequence[Instance]) -> List[Instance]:
    eligible = [i for i in instances if i.admits_prefill]
    if not eligible:
        raise ConfigurationError("no instance admits prefill (all chunk sizes are 0)")
    return eligible


def fallback_assign(instances: Sequence[Instance], rng: np.random.Generator) -> int:
    """Uniform choice over prefill-capable instances."""
    eligible = prefill_eligible(instances)
    return eligible[int(rng.integers(len(eligible)))].id


class RoundRobin:
    """Cycles over prefill-capable instances in id order."""

    def __init__(self):
        self._next = 0

    def __call__(self, instances: Sequence[Instance]) -> int:
        eligible = prefill_eligible(instances)
        choice = eligible[self._next % len(eligible)]
        self._next += 1
        return choice.id


def least_loaded(instances: Sequence[Instance]) -> int:
    eligible = prefill_eligible(instances)
    return min(eligible, key=lambda i: (i.queued_prefill_tokens(), i.id)).id
