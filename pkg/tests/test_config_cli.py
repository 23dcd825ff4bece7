import json
from dataclasses import replace
from pathlib import Path

import pytest
import yaml

from pdsim import experiments
from pdsim.cli import main
from pdsim.config import ConfigError, config_to_dict, load_config, parse_config
from pdsim.engine import Mode
from pdsim.workload import load_trace

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small(mode="hybrid", **cluster):
    raw = {
        "mode": mode,
        "cluster": {"n_p_heavy": 2, "n_d_heavy": 2, "s_p_tokens": 1024, "s_d_tokens": 256,
                    "kv_capacity_tokens": 100000, **cluster},
        "slo": {"ttft_ms": 4000, "tpot_ms": 100},
        "workload": {"qps": 2.0, "n_requests": 40, "synthetic": {"n_records": 200}},
    }
    return raw


def write_cfg(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


@pytest.mark.parametrize("name", ["hybrid", "aggregation", "disaggregation"])
def test_shipped_configs_round_trip(name):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    assert parse_config(config_to_dict(cfg)) == cfg
    assert cfg.mode == Mode(name)


def test_every_problem_is_reported_at_once():
    raw = small()
    raw["cluster"]["s_p_tokens"] = "big"
    raw["slo"]["bogus"] = 1
    raw["workload"]["qps"] = True
    raw["goodput"] = {"qps_grid": [2.0, 1.0]}
    with pytest.raises(ConfigError) as err:
        parse_config(raw)
    text = str(err.value)
    for field in ("cluster.s_p_tokens", "slo.bogus", "workload.qps", "goodput.qps_grid"):
        assert field in text


@pytest.mark.parametrize("raw", [
    small(n_p_heavy=0, s_d_tokens=0),
    small(mode="aggregation"),
    small(mode="disaggregation"),
    small(mode="nope"),
    {**small(), "extra": 1},
])
def test_inconsistent_configs_rejected(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_kv_must_hold_the_longest_request():
    raw = small(kv_capacity_tokens=1000)
    raw["workload"].update(max_prompt_tokens=900, max_output_tokens=200)
    with pytest.raises(ConfigError, match="kv_capacity_tokens"):
        parse_config(raw)


def test_bad_config_exits_nonzero(tmp_path, capsys):
    path = write_cfg(tmp_path, small(mode="aggregation"))
    assert main(["run", "--config", path, "--out-dir", str(tmp_path / "o")]) == 2
    assert "mode" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_run_writes_outputs_and_is_reproducible(tmp_path):
    path = write_cfg(tmp_path, small())
    for out in ("a", "b"):
        assert main(["run", "--config", path, "--out-dir", str(tmp_path / out), "--events"]) == 0
    for name in ("report.json", "requests.csv", "lifecycles.jsonl", "events.jsonl"):
        a, b = (tmp_path / out / name for out in ("a", "b"))
        assert a.read_bytes() == b.read_bytes(), name
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["aggregates"]["n_requests"] == 40
    # the dumped config reloads to the same experiment
    assert load_config(tmp_path / "a" / "config.yaml") == replace(load_config(path), out_dir=str(tmp_path / "a"))


def test_seed_override_changes_arrivals(tmp_path):
    path = write_cfg(tmp_path, small())
    main(["run", "--config", path, "--out-dir", str(tmp_path / "a")])
    main(["run", "--config", path, "--out-dir", str(tmp_path / "b"), "--seed", "5"])
    assert (tmp_path / "a" / "lifecycles.jsonl").read_text() != (tmp_path / "b" / "lifecycles.jsonl").read_text()


def test_empty_sweep_is_an_error(tmp_path):
    path = write_cfg(tmp_path, small())
    assert main(["sweep", "--config", path, "--axis", "qps", "--out-dir", str(tmp_path)]) == 1


def test_bad_sweep_point_is_recorded(tmp_path):
    path = write_cfg(tmp_path, small())
    code = main(["sweep", "--config", path, "--axis", "r_pd", "--values", "2-2", "2:2", "--out-dir", str(tmp_path)])
    assert code == 0
    rows = json.loads((tmp_path / "sweep_r_pd.json").read_text())
    assert rows[0]["error"] and rows[1]["error"] is None
    assert 0.0 <= rows[1]["attainment"] <= 1.0


def test_parallel_jobs_match_sequential(tmp_path):
    cfg = parse_config(small())
    seq = experiments.goodput(cfg, [1.0, 2.0], seeds=[0, 1], jobs=1)
    par = experiments.goodput(cfg, [1.0, 2.0], seeds=[0, 1], jobs=2)
    assert seq.to_dict() == par.to_dict()


def test_goodput_and_breakdown_commands(tmp_path):
    raw = small()
    raw["goodput"] = {"qps_grid": [0.5, 1.0], "seeds": [0]}
    path = write_cfg(tmp_path, raw)
    assert main(["goodput", "--config", path, "--out-dir", str(tmp_path)]) == 0
    gp = json.loads((tmp_path / "goodput.json").read_text())
    assert gp["qps_grid"] == [0.5, 1.0] and gp["goodput_qps"] in (0.0, 0.5, 1.0)
    assert main(["breakdown", "--config", path, "--out-dir", str(tmp_path)]) == 0
    stages = json.loads((tmp_path / "breakdown.json").read_text())["stages"]
    assert [s["stage"] for s in stages] == list(experiments.BREAKDOWN_STAGES)


def test_gen_trace(tmp_path):
    out = tmp_path / "t.jsonl"
    assert main(["gen-trace", "--preset", "chat", "-n", "25", "--seed", "4", "--output", str(out)]) == 0
    assert len(load_trace(out)) == 25
    stamped = tmp_path / "a.jsonl"
    assert main(["gen-trace", "-n", "10", "--qps", "2", "--output", str(stamped)]) == 0
    assert "arrival_time_ms" in stamped.read_text().splitlines()[0]
