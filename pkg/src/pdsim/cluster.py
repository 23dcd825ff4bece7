"""Serving instances: prefill queues, chunked batch formation and KV-slot accounting.

An instance runs one iteration at a time. Each iteration advances every
resident decode by one token and draws up to ``chunk_size`` prefill tokens
from the head of the FIFO prefill queue; a chunk may cover the tail of one
prompt and the head of the next.

Token accounting is lazy: a resident decode's generated count is its count
at admission plus the iterations the instance has completed since, so an
iteration costs O(1) plus the requests that finish in it.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

from .cost_model import CalibrationProfile, iteration_time
from .request import Request


class InstanceKind(enum.Enum):
    P_HEAVY = "p_heavy"
    D_HEAVY = "d_heavy"


@dataclass(frozen=True)
class ClusterConfig:
    n_p_heavy: int
    n_d_heavy: int
    s_p: int
    s_d: int
    kv_capacity: int
    max_context: int = 16384

    def __post_init__(self):
        if self.n_p_heavy < 0 or self.n_d_heavy < 0:
            raise ValueError("instance counts must be non-negative")
        if self.n_p_heavy + self.n_d_heavy < 1:
            raise ValueError("cluster needs at least one instance")
        if self.s_p < 0 or self.s_d < 0:
            raise ValueError("chunk sizes must be non-negative")
        if max(self.s_p, self.s_d) > self.max_context:
            raise ValueError("chunk size exceeds max_context")
        if self.kv_capacity < 1:
            raise ValueError("kv_capacity must be positive")

    @property
    def n_instances(self) -> int:
        return self.n_p_heavy + self.n_d_heavy

    @property
    def r_pd(self) -> str:
        return f"{self.n_p_heavy}:{self.n_d_heavy}"

    def build(self) -> List["Instance"]:
        """Instances with ids 0..n-1, P-heavy first."""
        out = []
        for i in range(self.n_p_heavy):
            out.append(Instance(i, InstanceKind.P_HEAVY, self.s_p, self.kv_capacity))
        for j in range(self.n_d_heavy):
            out.append(Instance(self.n_p_heavy + j, InstanceKind.D_HEAVY, self.s_d, self.kv_capacity))
        return out


@dataclass
class BatchPlan:
    prefill_tokens: int = 0
    decode_reqs: int = 0
    prefill_segments: List[Tuple[Request, int]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.prefill_tokens == 0 and self.decode_reqs == 0


@dataclass
class CompletionReport:
    finished_prefills: List[Request]
    emitted_tokens: int
    finished_decodes: List[Request]
    elapsed: float


ADMITTED = "admitted"
QUEUED = "queued"


class Instance:
    def __init__(self, id: int, kind: InstanceKind, chunk_size: int, kv_capacity: int):
        self.id = id
        self.kind = kind
        self.chunk_size = chunk_size
        self.kv_capacity = kv_capacity
        self.kv_used = 0
        self.prefill_queue: Deque[Request] = deque()
        self.running_decode: Dict[int, Request] = {}
        self.pending_decode: Deque[Request] = deque()

        self.iter_count = 0
        self.iter_end_ms: List[float] = []
        self.cum_prefill: List[int] = [0]
        self.busy = False
        self.plan: Optional[BatchPlan] = None
        self.plan_start_ms = 0.0
        self._finish_heap: List[Tuple[int, int, int, Request]] = []
        self._seq = 0

    def __repr__(self):
        return (f"Instance(id={self.id}, kind={self.kind.value}, chunk={self.chunk_size}, "
                f"kv={self.kv_used}/{self.kv_capacity})")

    @property
    def is_p_heavy(self) -> bool:
        return self.kind is InstanceKind.P_HEAVY

    @property
    def is_d_heavy(self) -> bool:
        return self.kind is InstanceKind.D_HEAVY

    @property
    def admits_prefill(self) -> bool:
        return self.chunk_size > 0

    def queued_prefill_tokens(self) -> int:
        return sum(r.remaining_prefill for r in self.prefill_queue)

    def has_work(self) -> bool:
        return bool(self.running_decode) or (self.admits_prefill and bool(self.prefill_queue))

    # -- per-request live counters ------------------------------------------

    def _delta(self, req: Request) -> int:
        return max(0, self.iter_count - req.join_iter)

    def generated(self, req: Request) -> int:
        return req.generated + self._delta(req)

    def visible_len(self, req: Request) -> int:
        return req.visible_len + self._delta(req)

    def footprint(self, req: Request) -> int:
        return req.prompt_len + self.generated(req)

    def kv_from_residents(self) -> int:
        return sum(self.footprint(r) for r in self.running_decode.values())

    # -- prefill -------------------------------------------------------------

    def enqueue_prefill(self, req: Request) -> None:
        if not self.admits_prefill:
            raise ValueError(f"instance {self.id} does not admit prefill")
        self.prefill_queue.append(req)

    # -- decode residency ----------------------------------------------------

    def admit_decode(self, req: Request) -> str:
        """Join running_decode if the KV footprint fits, else wait FIFO in pending_decode."""
        if self.pending_decode or self.kv_used + req.prompt_len + req.generated > self.kv_capacity:
            self.pending_decode.append(req)
            return QUEUED
        self._attach(req)
        return ADMITTED

    def _attach(self, req: Request) -> None:
        req.host = self.id
        # a decode admitted mid-iteration first runs in the next iteration
        req.join_iter = self.iter_count + (1 if self.busy else 0)
        req.segment_token += 1
        self.running_decode[req.id] = req
        self.kv_used += req.prompt_len + req.generated
        finish_iter = req.join_iter + (req.output_len - req.generated)
        self._seq += 1
        heapq.heappush(self._finish_heap, (finish_iter, self._seq, req.segment_token, req))

    def detach_decode(self, req: Request) -> None:
        """Remove a resident decode, freeing its KV slots. Only between iterations."""
        if self.busy:
            raise RuntimeError("cannot detach a decode while an iteration is in flight")
        delta = self._delta(req)
        del self.running_decode[req.id]
        self.kv_used -= req.prompt_len + req.generated + delta
        req.segments.append((self.id, req.join_iter, req.join_iter + delta))
        req.generated += delta
        req.visible_len += delta
        req.host = None
        req.segment_token += 1

    def drain_pending(self) -> List[Request]:
        admitted = []
        while self.pending_decode:
            head = self.pending_decode[0]
            if self.kv_used + head.prompt_len + head.generated > self.kv_capacity:
                break
            self.pending_decode.popleft()
            self._attach(head)
            admitted.append(head)
        return admitted

    def make_room(self) -> List[Request]:
        """Swap out the newest decodes until every resident can grow by one slot."""
        evicted = []
        while self.running_decode and self.kv_used + len(self.running_decode) > self.kv_capacity:
            newest = next(reversed(self.running_decode.values()))
            self.detach_decode(newest)
            newest.preemptions += 1
            self.pending_decode.appendleft(newest)
            evicted.append(newest)
        return evicted

    # -- iterations ----------------------------------------------------------

    def form_batch(self) -> BatchPlan:
        plan = BatchPlan(decode_reqs=len(self.running_decode))
        budget = self.chunk_size
        for req in self.prefill_queue:
            if budget <= 0:
                break
            take = min(req.remaining_prefill, budget)
            plan.prefill_segments.append((req, take))
            plan.prefill_tokens += take
            budget -= take
        return plan

    def start_iteration(self, profile: CalibrationProfile, now: float) -> Optional[float]:
        """Form a batch and mark the instance busy; returns the iteration's duration."""
        if self.busy:
            raise RuntimeError(f"instance {self.id} already running an iteration")
        plan = self.form_batch()
        if plan.empty:
            return None
        for req, _ in plan.prefill_segments:
            if req.prefill_start_ms is None:
                req.prefill_start_ms = now
        self.plan = plan
        self.plan_start_ms = now
        self.busy = True
        return iteration_time(profile, plan.prefill_tokens, plan.decode_reqs)

    def finish_iteration(self, now: float) -> CompletionReport:
        plan = self.plan
        assert plan is not None and self.busy
        self.busy = False
        self.plan = None
        self.iter_count += 1
        self.iter_end_ms.append(now)
        self.cum_prefill.append(self.cum_prefill[-1] + plan.prefill_tokens)
        self.kv_used += plan.decode_reqs

        finished_prefills = []
        for req, take in plan.prefill_segments:
            req.prefilled += take
            if req.prefilled == req.prompt_len:
                head = self.prefill_queue.popleft()
                assert head is req, "prefill completion out of FIFO order"
                req.prefill_end_ms = now
                finished_prefills.append(req)

        finished_decodes = []
        heap = self._finish_heap
        while heap and heap[0][0] <= self.iter_count:
            _, _, token, req = heapq.heappop(heap)
            if req.host != self.id or req.segment_token != token:
                continue  # stale entry: request left this instance
            self.detach_decode(req)
            req.completion_ms = now
            finished_decodes.append(req)

        return CompletionReport(finished_prefills, plan.decode_reqs, finished_decodes,
                                now - self.plan_start_ms)

    def token_times(self, start_iter: int, end_iter: int) -> List[float]:
        return self.iter_end_ms[start_iter:end_iter]

    def prefill_between(self, start_iter: int, end_iter: int) -> int:
        return self.cum_prefill[end_iter] - self.cum_prefill[start_iter]


def execute_iteration(instance: Instance, profile: CalibrationProfile, now: float = 0.0) -> CompletionReport:
    """Run one whole iteration synchronously (no event loop)."""
    elapsed = instance.start_iteration(profile, now)
    if elapsed is None:
        return CompletionReport([], 0, [], 0.0)
    return instance.finish_iteration(now + elapsed)
