"""Deterministic discrete-event loop for a multi-instance serving cluster.

Instances iterate asynchronously: each one schedules its own
IterationComplete event. Per-iteration scheduling on an instance runs, in
order: pending-decode admission, backflow (P-heavy) or degradation
(D-heavy), a second admission pass, KV growth check, batch formation.

Events at equal timestamps are ordered TransferComplete < Arrival <
IterationComplete, then by insertion sequence, so migrated KV is resident
before a same-time batch forms.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import decode_flow
from .cluster import ADMITTED, ClusterConfig, Instance
from .cost_model import CalibrationProfile, transfer_time
from .decode_flow import FlowPolicy
from .metrics import MetricsReport, SloConfig, build_report
from .proxy import RoundRobin, fallback_assign, least_loaded, prefill_eligible, schedule_prefill
from .request import Migration, Request
from .workload import Arrival, TraceRecord, WorkloadSpec, generate_arrivals

TRANSFER_COMPLETE = 0
ARRIVAL = 1
ITERATION_COMPLETE = 2

ROUTINGS = ("length_aware", "round_robin", "least_loaded")


class Mode(str, enum.Enum):
    AGGREGATION = "aggregation"
    DISAGGREGATION = "disaggregation"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class SchedulingOptions:
    prefill_routing: str = "length_aware"
    init_placement: bool = True
    flowing_decode: bool = True
    early_reject: bool = False

    def __post_init__(self):
        if self.prefill_routing not in ROUTINGS:
            raise ValueError(f"prefill_routing must be one of {ROUTINGS}, got {self.prefill_routing!r}")

    @classmethod
    def for_mode(cls, mode: Mode, **overrides) -> "SchedulingOptions":
        mode = Mode(mode)
        base = {
            Mode.AGGREGATION: cls(init_placement=False, flowing_decode=False),
            Mode.DISAGGREGATION: cls(init_placement=True, flowing_decode=False),
            Mode.HYBRID: cls(),
        }[mode]
        return replace(base, **overrides)


class ModeConfigError(ValueError):
    pass


def validate_mode(mode: Mode, cluster: ClusterConfig) -> None:
    mode = Mode(mode)
    if mode is Mode.AGGREGATION and cluster.n_d_heavy and cluster.s_d != cluster.s_p:
        raise ModeConfigError("aggregation requires s_d == s_p")
    if mode is Mode.DISAGGREGATION:
        if cluster.s_d != 0:
            raise ModeConfigError("disaggregation requires s_d == 0")
        if cluster.n_p_heavy < 1 or cluster.n_d_heavy < 1:
            raise ModeConfigError("disaggregation needs at least one P-heavy and one D-heavy instance")
    if cluster.n_p_heavy == 0 and cluster.s_d == 0:
        raise ModeConfigError("no instance admits prefill (s_d == 0 and no P-heavy instances)")
    if cluster.n_d_heavy == 0 and cluster.s_p == 0:
        raise ModeConfigError("no instance admits prefill (s_p == 0 and no D-heavy instances)")
    if cluster.s_p == 0 and cluster.s_d == 0:
        raise ModeConfigError("no instance admits prefill (s_p == s_d == 0)")


class SimulationDeadlock(RuntimeError):
    pass


@dataclass(frozen=True)
class RequestLifecycle:
    request_id: int
    prompt_len: int
    output_len: int
    arrival_ms: float
    prefill_instance: Optional[int]
    prefill_assign_ms: Optional[float]
    prefill_start_ms: Optional[float]
    prefill_end_ms: Optional[float]
    init_transfer_end_ms: Optional[float]
    first_token_ms: Optional[float]
    completion_ms: Optional[float]
    token_emit_times: Tuple[float, ...]
    migrations: Tuple[Migration, ...]
    decode_segments: Tuple[Tuple[int, int, int], ...]
    rejected: bool = False
    fallback_routed: bool = False
    preemptions: int = 0

    @property
    def completed(self) -> bool:
        return self.completion_ms is not None

    def to_dict(self, with_tokens: bool = True) -> dict:
        d = {
            "request_id": self.request_id,
            "prompt_len": self.prompt_len,
            "output_len": self.output_len,
            "arrival_ms": self.arrival_ms,
            "prefill_instance": self.prefill_instance,
            "prefill_assign_ms": self.prefill_assign_ms,
            "prefill_start_ms": self.prefill_start_ms,
            "prefill_end_ms": self.prefill_end_ms,
            "init_transfer_end_ms": self.init_transfer_end_ms,
            "first_token_ms": self.first_token_ms,
            "completion_ms": self.completion_ms,
            "migrations": [[m.time_ms, m.src, m.dst, m.reason] for m in self.migrations],
            "decode_segments": [list(s) for s in self.decode_segments],
            "rejected": self.rejected,
            "fallback_routed": self.fallback_routed,
            "preemptions": self.preemptions,
        }
        if with_tokens:
            d["token_emit_times"] = list(self.token_emit_times)
        return d


@dataclass
class SimulationResult:
    lifecycles: List[RequestLifecycle]
    prefill_log: Dict[int, List[int]]
    instance_kinds: Dict[int, str]
    end_time_ms: float
    events: Optional[List[dict]] = None


class Simulator:
    def __init__(
        self,
        cluster: ClusterConfig,
        flow_policy: FlowPolicy,
        profile: CalibrationProfile,
        slo: SloConfig,
        options: SchedulingOptions,
        seed: int = 0,
        record_events: bool = False,
        check_invariants: bool = False,
    ):
        self.cluster = cluster
        self.check_invariants = check_invariants
        self.policy = flow_policy
        self.profile = profile
        self.slo = slo
        self.options = options
        self.instances = cluster.build()
        prefill_eligible(self.instances)
        self.has_p = any(i.is_p_heavy for i in self.instances)
        self.has_d = any(i.is_d_heavy for i in self.instances)
        # proxy randomness is independent of the arrival stream
        self.rng = np.random.default_rng([seed, 0x9E3779B9])
        self._round_robin = RoundRobin()
        self._heap: list = []
        self._seq = 0
        self.now = 0.0
        self.inbound_kv: Dict[int, int] = {i.id: 0 for i in self.instances}
        self.events: Optional[List[dict]] = [] if record_events else None

    # -- plumbing ------------------------------------------------------------

    def _push(self, time: float, prio: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, prio, self._seq, payload))

    def _log(self, kind: str, **fields) -> None:
        if self.events is not None:
            self.events.append({"time_ms": self.now, "event": kind, **fields})

    def _load(self, inst: Instance) -> int:
        return inst.kv_used + self.inbound_kv[inst.id]

    # -- request flow --------------------------------------------------------

    def _route(self, req: Request) -> Optional[int]:
        opts = self.options
        if opts.prefill_routing == "round_robin":
            return self._round_robin(self.instances)
        if opts.prefill_routing == "least_loaded":
            return least_loaded(self.instances)
        iid = schedule_prefill(req.prompt_len, self.instances, self.profile, self.slo.ttft_ms,
                               transfer_from_p_heavy=opts.init_placement)
        if iid is None:
            if opts.early_reject:
                return None
            req.fallback_routed = True
            iid = fallback_assign(self.instances, self.rng)
        return iid

    def _on_arrival(self, req: Request) -> None:
        iid = self._route(req)
        if iid is None:
            req.rejected = True
            self._log("reject", request=req.id)
            return
        inst = self.instances[iid]
        req.prefill_instance = iid
        req.prefill_assign_ms = self.now
        inst.enqueue_prefill(req)
        self._log("assign", request=req.id, instance=iid, fallback=req.fallback_routed)
        self._kick(inst)

    def _first_token(self, req: Request) -> None:
        req.first_token_ms = self.now
        req.visible_start_ms = self.now
        self._log("first_token", request=req.id, instance=req.host)

    def _admit(self, inst: Instance, req: Request) -> None:
        if inst.admit_decode(req) == ADMITTED:
            if req.first_token_ms is None:
                self._first_token(req)

    def _drain(self, inst: Instance) -> None:
        for req in inst.drain_pending():
            if req.first_token_ms is None:
                self._first_token(req)

    def _migrate(self, req: Request, src: int, dst: int, reason: str, context_tokens: int) -> None:
        req.migrations.append(Migration(self.now, src, dst, reason))
        self.inbound_kv[dst] += req.prompt_len + req.generated
        self._log("migrate", request=req.id, src=src, dst=dst, reason=reason)
        self._push(self.now + transfer_time(self.profile, context_tokens), TRANSFER_COMPLETE, (req, dst, reason))

    def _on_transfer(self, req: Request, dst: int, reason: str) -> None:
        inst = self.instances[dst]
        self.inbound_kv[dst] -= req.prompt_len + req.generated
        if reason == "init":
            req.init_transfer_end_ms = self.now
        self._admit(inst, req)
        self._kick(inst)

    def _on_prefill_done(self, inst: Instance, req: Request) -> None:
        req.generated = 1
        req.visible_len = 1
        if req.output_len == 1:
            req.first_token_ms = req.completion_ms = self.now
            self._log("complete", request=req.id)
            return
        target = inst.id
        if self.options.init_placement:
            target = decode_flow.place_initial_decode(inst, self.instances, self._load)
        if target == inst.id:
            self._admit(inst, req)
        else:
            self._migrate(req, inst.id, target, "init", req.prompt_len)

    # -- instance scheduling -------------------------------------------------

    def _flow(self, inst: Instance) -> None:
        if inst.is_p_heavy and self.has_d and inst.running_decode:
            views = decode_flow.decode_views(inst, self.now)
            chosen = decode_flow.select_backflow(views, self.slo.tpot_ms, self.policy)
            for view in views:  # admission order
                if view.request_id not in chosen:
                    continue
                target = decode_flow.backflow_target(self.instances, view.kv_footprint, self._load)
                if target is None:
                    continue  # every D-heavy is full; retry next iteration
                req = inst.running_decode[view.request_id]
                ctx = decode_flow.apply_backflow(req, inst, self.now)
                self._migrate(req, inst.id, target, "backflow", ctx)
        elif inst.is_d_heavy and self.has_p and inst.running_decode:
            views = decode_flow.decode_views(inst, self.now)
            # decodes waiting for slots count toward the watermark
            demand = inst.kv_used + sum(r.prompt_len + r.generated for r in inst.pending_decode)
            for rid in decode_flow.select_degrade(demand, inst.kv_capacity, views, self.policy):
                target = decode_flow.degrade_target(self.instances, self._load)
                req = inst.running_decode[rid]
                inst.detach_decode(req)
                self._migrate(req, inst.id, target, "degrade", req.prompt_len + req.generated)

    def _kick(self, inst: Instance) -> None:
        if not inst.busy:
            self._schedule(inst)

    def _schedule(self, inst: Instance) -> None:
        self._drain(inst)
        if self.options.flowing_decode:
            self._flow(inst)
            self._drain(inst)
        for req in inst.make_room():
            self._log("preempt", request=req.id, instance=inst.id)
        elapsed = inst.start_iteration(self.profile, self.now)
        if elapsed is not None:
            self._push(self.now + elapsed, ITERATION_COMPLETE, inst)

    def _on_iteration(self, inst: Instance) -> None:
        report = inst.finish_iteration(self.now)
        for req in report.finished_decodes:
            self._log("complete", request=req.id, instance=inst.id)
        for req in report.finished_prefills:
            self._log("prefill_done", request=req.id, instance=inst.id)
            self._on_prefill_done(inst, req)
        self._schedule(inst)

    # -- main loop -----------------------------------------------------------

    def run(self, arrivals: Sequence[Arrival]) -> SimulationResult:
        requests = [Request(k, rec.prompt_len, rec.output_len, t) for k, (t, rec) in enumerate(arrivals)]
        it = iter(requests)
        first = next(it, None)
        if first is not None:
            self._push(first.arrival_ms, ARRIVAL, first)
        while self._heap:
            time, prio, _, payload = heapq.heappop(self._heap)
            self.now = time
            if prio == ARRIVAL:
                nxt = next(it, None)
                if nxt is not None:
                    self._push(nxt.arrival_ms, ARRIVAL, nxt)
                self._on_arrival(payload)
            elif prio == TRANSFER_COMPLETE:
                self._on_transfer(*payload)
            else:
                self._on_iteration(payload)
            if self.check_invariants:
                self._check(requests)

        stuck = [r.id for r in requests if not r.finished and not r.rejected]
        if stuck:
            where = {i.id: ([r.id for r in i.prefill_queue], list(i.running_decode),
                            [r.id for r in i.pending_decode]) for i in self.instances}
            raise SimulationDeadlock(
                f"no pending events but {len(stuck)} requests unfinished: {stuck[:20]}; "
                f"per-instance (prefill, running, pending): {where}"
            )
        return SimulationResult(
            lifecycles=[self._lifecycle(r) for r in requests],
            prefill_log={i.id: np.diff(i.cum_prefill).tolist() for i in self.instances},
            instance_kinds={i.id: i.kind.value for i in self.instances},
            end_time_ms=self.now,
            events=self.events,
        )

    def _check(self, requests: Sequence[Request]) -> None:
        """Assert KV conservation and single residency at an event boundary."""
        where: Dict[int, int] = {}
        for inst in self.instances:
            assert inst.kv_used == inst.kv_from_residents(), f"KV drift on instance {inst.id}"
            assert 0 <= inst.kv_used <= inst.kv_capacity, f"KV out of range on instance {inst.id}"
            for group in (inst.prefill_queue, inst.running_decode.values(), inst.pending_decode):
                for req in group:
                    where[req.id] = where.get(req.id, 0) + 1
        assert all(n == 1 for n in where.values()), "request resident in two places"
        in_flight = {p[0].id for _, prio, _, p in self._heap if prio == TRANSFER_COMPLETE}
        assert not in_flight & where.keys(), "request both resident and in flight"
        for req in requests:
            if req.finished:
                assert req.id not in where and req.id not in in_flight

    def _lifecycle(self, req: Request) -> RequestLifecycle:
        tokens: List[float] = []
        if req.first_token_ms is not None:
            tokens.append(req.first_token_ms)
            for iid, a, b in req.segments:
                tokens.extend(self.instances[iid].token_times(a, b))
        return RequestLifecycle(
            request_id=req.id,
            prompt_len=req.prompt_len,
            output_len=req.output_len,
            arrival_ms=req.arrival_ms,
            prefill_instance=req.prefill_instance,
            prefill_assign_ms=req.prefill_assign_ms,
            prefill_start_ms=req.prefill_start_ms,
            prefill_end_ms=req.prefill_end_ms,
            init_transfer_end_ms=req.init_transfer_end_ms,
            first_token_ms=req.first_token_ms,
            completion_ms=req.completion_ms,
            token_emit_times=tuple(tokens),
            migrations=tuple(req.migrations),
            decode_segments=tuple(req.segments),
            rejected=req.rejected,
            fallback_routed=req.fallback_routed,
            preemptions=req.preemptions,
        )


def simulate(
    cluster: ClusterConfig,
    policy: FlowPolicy,
    profile: CalibrationProfile,
    slo: SloConfig,
    arrivals: Sequence[Arrival],
    mode: Mode = Mode.HYBRID,
    options: Optional[SchedulingOptions] = None,
    seed: int = 0,
    record_events: bool = False,
    check_invariants: bool = False,
) -> SimulationResult:
    mode = Mode(mode)
    validate_mode(mode, cluster)
    if options is None:
        options = SchedulingOptions.for_mode(mode)
    sim = Simulator(cluster, policy, profile, slo, options, seed=seed, record_events=record_events,
                    check_invariants=check_invariants)
    return sim.run(arrivals)


def run(
    cluster: ClusterConfig,
    policy: FlowPolicy,
    profile: CalibrationProfile,
    spec: WorkloadSpec,
    trace: Sequence[TraceRecord],
    mode: Mode,
    slo: SloConfig,
    options: Optional[SchedulingOptions] = None,
) -> MetricsReport:
    """Generate arrivals from ``spec``, simulate to completion, summarize."""
    arrivals = generate_arrivals(spec, trace)
    result = simulate(cluster, policy, profile, slo, arrivals, mode=mode, options=options, seed=spec.seed)
    return build_report(result, slo, metadata={"mode": Mode(mode).value, "seed": spec.seed, "qps": spec.qps})
