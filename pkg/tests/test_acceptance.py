"""End-to-end acceptance criteria; each test emits one PASS/FAIL line."""

import json
import time
from dataclasses import replace

import numpy as np
import yaml
from scipy import stats

from oracles import backflow_line_by_line, build_instance, degrade_line_by_line, prefill_route
from pdsim.cli import main
from pdsim.cluster import ClusterConfig, InstanceKind
from pdsim.config import ExperimentConfig, WorkloadConfig
from pdsim.cost_model import DEFAULT_PROFILE
from pdsim.decode_flow import DecodeView, FlowPolicy, select_backflow, select_degrade
from pdsim.engine import Mode, SchedulingOptions, simulate
from pdsim.experiments import breakdown, goodput, modeled_prefill_capacity, simulate_config
from pdsim.metrics import (
    SloConfig,
    build_report,
    compute_tpot,
    fit_tpot_vs_intensity,
    interference_intensity,
    tail_ttft_breakdown,
)
from pdsim.proxy import fallback_assign, schedule_prefill
from pdsim.workload import TraceRecord, WorkloadSpec, generate_arrivals, synthetic_trace

from test_metrics import lifecycle

POLICY = FlowPolicy()
BALANCED_SLO = SloConfig(ttft_ms=4000.0, tpot_ms=100.0, attainment_target=0.9)
SEEDS = [0, 1, 2]
# decode of this workload needs roughly two instances' worth of KV
STRESS_KV = 100_000
LONG_PROMPTS = WorkloadConfig(qps=1.0, n_requests=600, synthetic_preset="summarization")


def experiment(mode, n_p, n_d, s_p, s_d, kv=STRESS_KV, qps=1.0):
    return ExperimentConfig(mode=Mode(mode), cluster=ClusterConfig(n_p, n_d, s_p, s_d, kv), slo=BALANCED_SLO,
                            workload=replace(LONG_PROMPTS, qps=qps))


def lifecycles_json(result):
    return "\n".join(json.dumps(lc.to_dict(), sort_keys=True) for lc in result.lifecycles)


def test_flow_selection_matches_reference(verdict):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        m = float(rng.uniform(0.5, 0.99))
        alpha = float(rng.uniform(0.5, 0.99))
        policy = FlowPolicy(m, alpha)
        cap = int(rng.integers(1_000, 200_000))
        n = int(rng.integers(0, 16))
        rows = [(k, int(rng.integers(1, 400)), int(rng.integers(1, cap // 4 + 2)), float(rng.choice([0.0, 1.0, 2.0])))
                for k in range(n)]
        used = int(cap * rng.uniform(0.4, 1.3))
        views = [DecodeView(rid, out, 0.0, foot, first) for rid, out, foot, first in rows]
        if set(select_degrade(used, cap, views, policy)) != degrade_line_by_line(used, cap, m, rows):
            mismatches += 1
        slo = float(rng.uniform(20.0, 200.0))
        tpots = [(k, float(rng.uniform(0.0, 2 * slo))) for k in range(n)]
        bviews = [DecodeView(rid, 11, t * 10, 100, 0.0) for rid, t in tpots]
        ref = backflow_line_by_line([(v.request_id, v.current_tpot_ms) for v in bviews], slo, alpha)
        if select_backflow(bviews, slo, policy) != ref:
            mismatches += 1
    elapsed = time.perf_counter() - start
    verdict("1 flow-selection oracle", mismatches == 0 and elapsed < 5,
            f"{mismatches} mismatches over 1000 states in {elapsed:.2f}s")


def test_prefill_routing_matches_brute_force(verdict):
    rng = np.random.default_rng(2)
    kinds = [InstanceKind.P_HEAVY, InstanceKind.D_HEAVY]
    start = time.perf_counter()
    mismatches = infeasible = 0
    for _ in range(1000):
        specs = []
        for _ in range(int(rng.integers(1, 9))):
            queued = [int(x) for x in rng.integers(1, 8000, size=int(rng.integers(0, 21)))]
            specs.append((kinds[int(rng.integers(2))], int(rng.choice([0, 256, 512, 1024, 2048])), queued,
                          int(rng.integers(0, 33))))
        prompt = int(rng.integers(1, 16_000))
        slo = float(rng.uniform(100.0, 20_000.0))
        insts = [build_instance(i, *s) for i, s in enumerate(specs)]
        want = prefill_route(prompt, specs, DEFAULT_PROFILE, slo)
        infeasible += want is None
        mismatches += schedule_prefill(prompt, insts, DEFAULT_PROFILE, slo) != want
    elapsed = time.perf_counter() - start
    verdict("2 prefill-routing oracle", mismatches == 0 and infeasible > 0 and elapsed < 5,
            f"{mismatches} mismatches, {infeasible} infeasible states, {elapsed:.2f}s")


def test_tpot_is_linear_in_interference(verdict):
    start = time.perf_counter()
    records = [r for r in synthetic_trace(4000, seed=0, preset="summarization") if r.output_len >= 16]
    arrivals = generate_arrivals(WorkloadSpec(qps=1.5, seed=0, n_requests=600), records)
    slo = SloConfig(4000.0, 100.0)
    res = simulate(ClusterConfig(0, 4, 1024, 1024, 400_000), POLICY, DEFAULT_PROFILE, slo, arrivals,
                   Mode.AGGREGATION)
    slope, intercept, r2 = fit_tpot_vs_intensity(build_report(res, slo).requests)
    slope_err = abs(slope / DEFAULT_PROFILE.per_prefill_token_ms - 1)
    icpt_err = abs(intercept / DEFAULT_PROFILE.decode_only_token_ms - 1)
    elapsed = time.perf_counter() - start
    ok = r2 >= 0.98 and slope_err <= 0.05 and icpt_err <= 0.05 and elapsed < 60
    verdict("3 TPOT linear in intensity", ok,
            f"R2={r2:.4f} slope={slope:.4f} ({slope_err:.1%}) intercept={intercept:.2f} ({icpt_err:.1%}) "
            f"{elapsed:.1f}s")


def test_intensity_example(verdict):
    start = time.perf_counter()
    log = {0: [4096] + [500] * 98 + [1000]}
    lc = lifecycle(output_len=100, decode_segments=((0, 1, 100),))
    value = interference_intensity(lc, log)
    elapsed = time.perf_counter() - start
    verdict("4 intensity example", value == 500 and elapsed < 1, f"intensity={value}")


def test_modes_reduce_to_baselines(verdict):
    start = time.perf_counter()
    arrivals = generate_arrivals(WorkloadSpec(qps=2.0, seed=0, n_requests=400),
                                 synthetic_trace(2000, seed=0, preset="summarization"))
    run = lambda cluster, mode, opts: simulate(cluster, POLICY, DEFAULT_PROFILE, BALANCED_SLO, arrivals, mode,
                                               options=opts)
    agg = run(ClusterConfig(0, 4, 512, 512, STRESS_KV), Mode.AGGREGATION, None)
    pinned = SchedulingOptions("length_aware", init_placement=False, flowing_decode=False)
    hyb_as_agg = run(ClusterConfig(2, 2, 512, 512, STRESS_KV), Mode.HYBRID, pinned)

    disagg_cluster = ClusterConfig(2, 2, 16384, 0, STRESS_KV)
    disagg = run(disagg_cluster, Mode.DISAGGREGATION, None)
    no_flow = SchedulingOptions.for_mode(Mode.HYBRID, flowing_decode=False)
    hyb_as_disagg = run(disagg_cluster, Mode.HYBRID, no_flow)

    same_agg = lifecycles_json(agg) == lifecycles_json(hyb_as_agg)
    same_dis = lifecycles_json(disagg) == lifecycles_json(hyb_as_disagg)
    elapsed = time.perf_counter() - start
    verdict("5 mode reductions", same_agg and same_dis and elapsed < 30,
            f"aggregation equal={same_agg} disaggregation equal={same_dis} {elapsed:.1f}s")


def test_prefill_queue_dominates_disaggregated_tail(verdict):
    start = time.perf_counter()
    cfg = experiment("disaggregation", 2, 2, 16384, 0, qps=2.5)
    shares = []
    for seed in SEEDS:
        point = replace(cfg, seed=seed)
        report, _ = simulate_config(point)
        tail = tail_ttft_breakdown(report.requests, 90.0)
        shares.append(tail["prefill_queue_ms"] / tail["ttft_ms"])
    capacity = [modeled_prefill_capacity(ClusterConfig(p, 4 - p, 16384, 0, STRESS_KV), Mode.DISAGGREGATION,
                                         DEFAULT_PROFILE) for p in (1, 2, 3)]
    rising = all(b > a for a, b in zip(capacity, capacity[1:]))
    elapsed = time.perf_counter() - start
    ok = all(s > 0.5 for s in shares) and rising and elapsed < 120
    verdict("6 prefill queue dominates tail TTFT", ok,
            f"queue share of p90+ TTFT per seed={[round(s, 3) for s in shares]} "
            f"capacity 1:3/2:2/3:1={[round(c) for c in capacity]} tok/s {elapsed:.1f}s")


def test_hybrid_goodput_beats_baselines(verdict):
    start = time.perf_counter()
    grid = [round(1.2 + 0.1 * k, 1) for k in range(19)]
    candidates = {
        "hybrid 2:2": experiment("hybrid", 2, 2, 1024, 256),
        "aggregation chunk 256": experiment("aggregation", 0, 4, 256, 256),
        "aggregation chunk 512": experiment("aggregation", 0, 4, 512, 512),
        "aggregation chunk 1024": experiment("aggregation", 0, 4, 1024, 1024),
        "disaggregation 1:3": experiment("disaggregation", 1, 3, 16384, 0),
        "disaggregation 2:2": experiment("disaggregation", 2, 2, 16384, 0),
        "disaggregation 3:1": experiment("disaggregation", 3, 1, 16384, 0),
    }
    gp = {name: goodput(cfg, grid, SEEDS).goodput for name, cfg in candidates.items()}
    best_base = max(v for k, v in gp.items() if k != "hybrid 2:2")
    ratio = gp["hybrid 2:2"] / best_base if best_base else float("inf")
    elapsed = time.perf_counter() - start
    verdict("7 hybrid goodput >= 1.10x best baseline", ratio >= 1.10 and elapsed < 600,
            f"{gp} ratio={ratio:.3f} {elapsed:.0f}s")


def test_breakdown_stages_improve(verdict):
    start = time.perf_counter()
    rows = breakdown(experiment("hybrid", 2, 2, 1024, 256, qps=2.2), SEEDS)
    att = [r["attainment"] for r in rows]
    gains = [b - a for a, b in zip(att, att[1:])]
    ok = all(g >= 0 for g in gains) and gains[1] >= 0.05 and gains[2] >= 0.05
    elapsed = time.perf_counter() - start
    verdict("8 breakdown monotone", ok and elapsed < 300,
            f"attainment per stage={[round(a, 3) for a in att]} {elapsed:.1f}s")


def test_every_command_is_deterministic(verdict, tmp_path):
    raw = {
        "mode": "hybrid",
        "cluster": {"n_p_heavy": 2, "n_d_heavy": 2, "s_p_tokens": 1024, "s_d_tokens": 256,
                    "kv_capacity_tokens": 40_000},
        "slo": {"ttft_ms": 4000, "tpot_ms": 100},
        "workload": {"qps": 2.5, "n_requests": 150, "synthetic": {"n_records": 500}},
        "goodput": {"qps_grid": [1.0, 2.0, 3.0], "seeds": [0, 1]},
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))
    commands = {
        "run": (["run", "--events"], ["report.json", "requests.csv", "lifecycles.jsonl", "events.jsonl"]),
        "sweep": (["sweep", "--axis", "r_pd", "--values", "1:3", "3:1"], ["sweep_r_pd.csv", "sweep_r_pd.json"]),
        "goodput": (["goodput"], ["goodput.json"]),
        "breakdown": (["breakdown"], ["breakdown.csv", "breakdown.json"]),
    }
    differing = []
    for name, (argv, files) in commands.items():
        for rerun in ("first", "second"):
            assert main(argv + ["--config", str(cfg_path), "--out-dir", str(tmp_path / name / rerun)]) == 0
        for f in files:
            if (tmp_path / name / "first" / f).read_bytes() != (tmp_path / name / "second" / f).read_bytes():
                differing.append(f"{name}/{f}")
    traces = [tmp_path / f"trace{k}.jsonl" for k in range(2)]
    for path in traces:
        main(["gen-trace", "-n", "50", "--qps", "1.5", "--seed", "3", "--output", str(path)])
    if traces[0].read_bytes() != traces[1].read_bytes():
        differing.append("gen-trace")
    verdict("9 reruns are byte-identical", not differing, f"differing outputs: {differing or 'none'}")


def test_degenerate_inputs(verdict):
    start = time.perf_counter()
    tight = SloConfig(4000.0, 1.0)
    singles = generate_arrivals(WorkloadSpec(qps=4.0, seed=0, n_requests=300),
                                [TraceRecord(p, 1) for p in (50, 900, 4000, 12000)])
    clusters = [(Mode.AGGREGATION, ClusterConfig(0, 2, 512, 512, 100_000)),
                (Mode.DISAGGREGATION, ClusterConfig(1, 1, 16384, 0, 100_000)),
                (Mode.HYBRID, ClusterConfig(1, 1, 1024, 256, 100_000))]
    tpot_ok = True
    for mode, cluster in clusters:
        rep = build_report(simulate(cluster, POLICY, DEFAULT_PROFILE, tight, singles, mode), tight)
        tpot_ok &= all(r.tpot_ms == 0.0 and r.tpot_ms <= tight.tpot_ms for r in rep.requests)

    lone_ok = True
    for mode, cluster in clusters + [(Mode.AGGREGATION, ClusterConfig(0, 1, 256, 256, 100_000)),
                                     (Mode.HYBRID, ClusterConfig(1, 0, 1024, 0, 100_000))]:
        res = simulate(cluster, POLICY, DEFAULT_PROFILE, BALANCED_SLO, [(0.0, TraceRecord(3000, 40))], mode)
        lc = res.lifecycles[0]
        lone_ok &= lc.completed and len(lc.token_emit_times) == 40 and compute_tpot(lc) > 0

    insts = [build_instance(i, InstanceKind.D_HEAVY, 256, [16_000] * 3, 8) for i in range(4)]
    unreachable = schedule_prefill(8000, insts, DEFAULT_PROFILE, 10.0)
    rng = np.random.default_rng(0)
    counts = np.bincount([fallback_assign(insts, rng) for _ in range(10_000)], minlength=4)
    p_value = stats.chisquare(counts).pvalue
    elapsed = time.perf_counter() - start
    ok = tpot_ok and lone_ok and unreachable is None and p_value > 0.01 and elapsed < 10
    verdict("10 degenerate inputs", ok,
            f"single-token TPOT ok={tpot_ok} lone requests complete={lone_ok} "
            f"fallback counts={counts.tolist()} chi2 p={p_value:.3f} {elapsed:.1f}s")
