"""Mutable per-request state shared by the instances and the event loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple


@dataclass(frozen=True)
class Migration:
    time_ms: float
    src: int
    dst: int
    reason: str  # "init" | "degrade" | "backflow"


@dataclass(eq=False)
class Request:
    id: int
    prompt_len: int
    output_len: int  # engine-only: schedulers never read it
    arrival_ms: float

    prefilled: int = 0
    prefill_instance: Optional[int] = None
    prefill_assign_ms: Optional[float] = None
    prefill_start_ms: Optional[float] = None
    prefill_end_ms: Optional[float] = None
    init_transfer_end_ms: Optional[float] = None
    first_token_ms: Optional[float] = None
    completion_ms: Optional[float] = None
    rejected: bool = False
    fallback_routed: bool = False

    # Decode residency. ``generated`` and ``visible_len`` are the values at
    # the moment the request joined its current host; the host adds the
    # iterations run since ``join_iter``.
    host: Optional[int] = None
    join_iter: int = 0
    generated: int = 0
    visible_len: int = 0
    visible_start_ms: float = 0.0
    segment_token: int = 0

    # (instance, first iteration index, end iteration index) per decode stay
    segments: List[Tuple[int, int, int]] = field(default_factory=list)
    migrations: List[Migration] = field(default_factory=list)
    preemptions: int = 0

    @property
    def remaining_prefill(self) -> int:
        return self.prompt_len - self.prefilled

    @property
    def finished(self) -> bool:
        return self.completion_ms is not None

    def __repr__(self):
        return f"Request(id={self.id}, prompt={self.prompt_len}, output={self.output_len})"
