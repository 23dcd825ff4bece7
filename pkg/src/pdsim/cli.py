"""Command-line entry point: ``pdsim {run,sweep,goodput,breakdown,gen-trace}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import experiments
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .workload import SYNTHETIC_PRESETS, TraceError, WorkloadSpec, dump_arrivals, dump_trace, generate_arrivals, synthetic_trace


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    if args.early_reject:
        cfg = replace(cfg, scheduler=replace(cfg.options, early_reject=True))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg: ExperimentConfig, args) -> int:
    write_events = cfg.write_events or args.events
    report, result = experiments.simulate_config(cfg, record_events=write_events)
    out = _out_dir(cfg)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "requests.csv").write_text(report.to_csv())
    with open(out / "lifecycles.jsonl", "w") as fh:
        for lc in result.lifecycles:
            fh.write(json.dumps(lc.to_dict(), sort_keys=True) + "\n")
    if write_events:
        with open(out / "events.jsonl", "w") as fh:
            for ev in result.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
    dump_config(cfg, out / "config.yaml")
    agg = report.aggregates
    print(f"attainment={agg['attainment']:.4f} p90_ttft_ms={agg['p90_ttft_ms']} p90_tpot_ms={agg['p90_tpot_ms']} "
          f"completed={agg['n_completed']}/{agg['n_requests']} -> {out}")
    return 0


SWEEP_COLUMNS = ["axis", "value", "error", "attainment", "p50_ttft_ms", "p90_ttft_ms", "p50_tpot_ms", "p90_tpot_ms",
                 "n_completed", "degrade", "backflow"]


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    if not args.values:
        raise ValueError("sweep needs at least one value")
    rows = experiments.sweep(cfg, args.axis, args.values, jobs=args.jobs)
    out = _out_dir(cfg)
    _write_rows(out / f"sweep_{args.axis}.csv", rows, SWEEP_COLUMNS)
    _write_json(out / f"sweep_{args.axis}.json", rows)
    for row in rows:
        if row["error"]:
            print(f"{args.axis}={row['value']}: FAILED {row['error']}")
        else:
            print(f"{args.axis}={row['value']}: attainment={row['attainment']:.4f} p90_ttft_ms={row['p90_ttft_ms']:.1f} "
                  f"p90_tpot_ms={row['p90_tpot_ms']:.1f}")
    return 0


def cmd_goodput(cfg: ExperimentConfig, args) -> int:
    grid = [float(q) for q in args.qps] if args.qps else cfg.qps_grid
    if not grid:
        raise ValueError("goodput needs a QPS grid (goodput.qps_grid in the config or --qps)")
    result = experiments.goodput(cfg, grid, jobs=args.jobs)
    out = _out_dir(cfg)
    payload = {"mode": cfg.mode.value, "attainment_target": cfg.slo.attainment_target, **result.to_dict()}
    _write_json(out / "goodput.json", payload)
    for q, a in zip(result.qps_grid, result.mean_attainment):
        print(f"qps={q:g}: mean attainment={a:.4f}")
    print(f"goodput_qps={result.goodput:g}")
    return 0


BREAKDOWN_COLUMNS = ["stage", "attainment", "init", "degrade", "backflow", "preemptions"]


def cmd_breakdown(cfg: ExperimentConfig, args) -> int:
    rows = experiments.breakdown(cfg, jobs=args.jobs)
    out = _out_dir(cfg)
    _write_rows(out / "breakdown.csv", rows, BREAKDOWN_COLUMNS)
    _write_json(out / "breakdown.json", {"seeds": cfg.seed_list, "qps": cfg.workload.qps, "stages": rows})
    for row in rows:
        print(f"{row['stage']:<24} attainment={row['attainment']:.4f} migrations(init/degrade/backflow)="
              f"{row['init']}/{row['degrade']}/{row['backflow']}")
    return 0


def cmd_gen_trace(args) -> int:
    records = synthetic_trace(args.n, seed=args.seed or 0, preset=args.preset)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.qps is None:
        dump_trace(records, out)
    else:
        spec = WorkloadSpec(qps=args.qps, seed=args.seed or 0, n_requests=args.n, replay_in_order=True)
        dump_arrivals(generate_arrivals(spec, records), out)
    print(f"wrote {len(records)} synthetic {args.preset} records -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdsim", description="Simulate multi-instance LLM serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--early-reject", action="store_true", help="reject requests no instance can serve in time")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (results are identical for any value)")

    p = sub.add_parser("run", help="simulate one configuration")
    common(p)
    p.add_argument("--events", action="store_true", help="also write events.jsonl")

    p = sub.add_parser("sweep", help="vary one slider or the load")
    common(p)
    p.add_argument("--axis", required=True, choices=experiments.SWEEP_AXES)
    p.add_argument("--values", nargs="*", default=[], help="e.g. 1:3 2:2 3:1 for r_pd")

    p = sub.add_parser("goodput", help="grid-scan the highest QPS meeting the attainment target")
    common(p)
    p.add_argument("--qps", nargs="*", type=float, default=None, help="override goodput.qps_grid")

    p = sub.add_parser("breakdown", help="staged comparison of the scheduling techniques")
    common(p)

    p = sub.add_parser("gen-trace", help="write a synthetic length trace")
    p.add_argument("--preset", choices=sorted(SYNTHETIC_PRESETS), default="summarization")
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qps", type=float, default=None, help="also stamp Poisson arrival times")
    p.add_argument("--output", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-trace":
            return cmd_gen_trace(args)
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        cfg = _apply_overrides(load_config(args.config), args)
        handler = {"run": cmd_run, "sweep": cmd_sweep, "goodput": cmd_goodput, "breakdown": cmd_breakdown}
        return handler[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, TraceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
