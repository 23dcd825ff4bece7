"""Flowing decode: where decodes start, which ones are degraded, which flow back.

Selection works on scheduler-visible counters only. ``current_output_len``
and the TPOT clock restart when a request flows back to a D-heavy instance;
the request's true timestamps (used for SLO attainment) are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Set

from .cluster import Instance
from .request import Request


@dataclass(frozen=True)
class FlowPolicy:
    watermark_m: float = 0.95
    approach_factor_alpha: float = 0.96

    def __post_init__(self):
        if not 0 < self.watermark_m < 1:
            raise ValueError("watermark_m must be in (0, 1)")
        if not 0 < self.approach_factor_alpha < 1:
            raise ValueError("approach_factor_alpha must be in (0, 1)")


@dataclass(frozen=True)
class DecodeView:
    request_id: int
    current_output_len: int
    decode_elapsed_ms: float
    kv_footprint: int
    first_token_ms: float = 0.0

    @property
    def current_tpot_ms(self) -> float:
        return self.decode_elapsed_ms / max(self.current_output_len - 1, 1)


def decode_views(instance: Instance, now: float) -> List[DecodeView]:
    return [
        DecodeView(
            request_id=r.id,
            current_output_len=instance.visible_len(r),
            decode_elapsed_ms=now - r.visible_start_ms,
            kv_footprint=instance.footprint(r),
            first_token_ms=r.first_token_ms,
        )
        for r in instance.running_decode.values()
    ]


def _kv_used(inst: Instance) -> int:
    return inst.kv_used


def _least_used(instances: Sequence[Instance], load: Callable[[Instance], int]) -> Optional[Instance]:
    best = None
    for inst in instances:
        if best is None or load(inst) < load(best):
            best = inst
    return best


def place_initial_decode(
    prefill_instance: Instance, instances: Sequence[Instance], load: Callable[[Instance], int] = _kv_used
) -> int:
    """D-heavy prefill decodes in place; otherwise the least-loaded D-heavy instance.

    ``load`` defaults to KV slots in use; ties go to the lowest id.
    """
    if prefill_instance.is_d_heavy:
        return prefill_instance.id
    target = _least_used([i for i in instances if i.is_d_heavy], load)
    return prefill_instance.id if target is None else target.id


def degrade_target(instances: Sequence[Instance], load: Callable[[Instance], int] = _kv_used) -> Optional[int]:
    target = _least_used([i for i in instances if i.is_p_heavy], load)
    return None if target is None else target.id


def backflow_target(
    instances: Sequence[Instance], footprint: int, load: Callable[[Instance], int] = _kv_used
) -> Optional[int]:
    """Least-loaded D-heavy instance that can hold ``footprint`` more slots."""
    room = [i for i in instances if i.is_d_heavy and load(i) + footprint <= i.kv_capacity]
    target = _least_used(room, load)
    return None if target is None else target.id


def select_degrade(
    kv_used: int, kv_capacity: int, decodes: Sequence[DecodeView], policy: FlowPolicy
) -> List[int]:
    """Longest-first offload until usage is back at or under the watermark.

    Returned in selection order. Ties on output length go to the earlier
    first token, then the lower id.
    """
    limit = policy.watermark_m * kv_capacity
    if kv_used <= limit:
        return []
    ordered = sorted(decodes, key=lambda v: (-v.current_output_len, v.first_token_ms, v.request_id))
    chosen = []
    released = 0
    for view in ordered:
        if kv_used - released <= limit:
            break
        chosen.append(view.request_id)
        released += view.kv_footprint
    return chosen


def select_backflow(decodes: Sequence[DecodeView], tpot_slo_ms: float, policy: FlowPolicy) -> Set[int]:
    threshold = tpot_slo_ms * policy.approach_factor_alpha
    return {v.request_id for v in decodes if v.current_tpot_ms > threshold}


def reset_visible_counters(req: Request, now: float) -> None:
    """Backflow: the scheduler treats the request as a fresh decode."""
    req.visible_len = 1
    req.visible_start_ms = now


def apply_backflow(req: Request, source: Instance, now: float) -> int:
    """Detach ``req`` from its P-heavy host and restart its visible counters.

    Returns the context length (tokens) whose KV must move to the target.
    """
    source.detach_decode(req)
    reset_visible_counters(req, now)
    return req.prompt_len + req.generated
