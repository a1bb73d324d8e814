import json

import numpy as np
import pytest
import yaml

from vmsim.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, subseed
from vmsim.forecaster import LstmModel

PMS = [
    {"id": "pm0", "cpu_capacity": 1.0, "mem_capacity": 8192, "power_idle": 100, "power_peak": 200,
     "fault_domain": 0},
    {"id": "pm1", "cpu_capacity": 1.0, "mem_capacity": 8192, "power_idle": 100, "power_peak": 200,
     "fault_domain": 1, "location": [1, 0]},
]


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def synth_cfg(policy="first_fit", **extra):
    cfg = {"seed": 7,
           "scenario": {"pms": PMS, "synth": {"num_vms": 3, "base": 0.2, "amplitude": 0.1,
                                                "noise_sigma": 0.02, "arrival_rate": 0.3}},
           "sim": {"horizon": 12, "preparation_steps": 0},
           "policy": {"name": policy}}
    cfg.update(extra)
    return cfg


def test_subseed_is_stable_and_named():
    assert subseed(0, "sim") == subseed(0, "sim")
    assert len({subseed(0, n) for n in ("sim", "agent", "trace", "init")}) == 4
    assert subseed(0, "sim") != subseed(1, "sim")


@pytest.mark.parametrize("policy", ["first_fit", "best_fit", "threshold", "random"])
def test_simulate_writes_report(tmp_path, policy):
    cfg = write_cfg(tmp_path, synth_cfg(policy))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_OK
    for f in ("metrics.ndjson", "events.ndjson", "summary.json", "metrics.png"):
        assert (tmp_path / "r" / f).exists()
    lines = (tmp_path / "r" / "metrics.ndjson").read_text().splitlines()
    assert len(lines) == 12


def test_simulate_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, synth_cfg("threshold"))
    for d in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("metrics.ndjson", "events.ndjson", "summary.json", "metrics.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path, synth_cfg())
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"])
    assert (tmp_path / "a" / "metrics.ndjson").read_bytes() != (tmp_path / "b" / "metrics.ndjson").read_bytes()


def test_config_errors(tmp_path, capsys):
    both = synth_cfg()
    both["scenario"]["trace"] = "x"
    assert main(["simulate", "--config", write_cfg(tmp_path, both)]) == EXIT_CONFIG
    assert "exactly one" in capsys.readouterr().err
    bad_policy = synth_cfg("nope")
    assert main(["simulate", "--config", write_cfg(tmp_path, bad_policy)]) == EXIT_CONFIG
    unknown = synth_cfg(sim={"horizon": 3, "warp": 9})
    assert main(["simulate", "--config", write_cfg(tmp_path, unknown)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_trace_errors_are_data_errors(tmp_path):
    (tmp_path / "t").mkdir()
    (tmp_path / "t" / "trace.csv").write_text("time,vm_id,cpu,mem,storage_io,net_io\n0,a,1.5,1,0,0\n")
    cfg = {"scenario": {"pms": PMS, "trace": "t"}, "sim": {"horizon": 2}}
    assert main(["simulate", "--config", write_cfg(tmp_path, cfg)]) == EXIT_DATA


def test_simulate_from_trace_with_forecaster(tmp_path):
    assert main(["gentrace", "--out", str(tmp_path / "t"), "--seed", "1", "--horizon", "40"]) == EXIT_OK
    cfg = {"scenario": {"pms": PMS * 1, "trace": "t"},
           "sim": {"horizon": 40},
           "policy": {"name": "threshold", "theta_hi": 0.9, "theta_lo": 0.1},
           "forecaster": {"hidden_dim": 4, "epochs": 2, "bptt_window": 8}}
    cfg["scenario"]["pms"] = [dict(p, cpu_capacity=8.0) for p in PMS]
    assert main(["simulate", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "r")]) == EXIT_OK


def toy_cfg(episodes):
    return {"seed": 2, "scenario": {"preset": "toy_consolidation", "horizon": 5},
            "agent": {"episodes": episodes, "batch_size": 4}}


def test_train_zero_episodes_saves_initial_net(tmp_path):
    cfg = write_cfg(tmp_path, toy_cfg(0))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == EXIT_OK
    assert json.loads((tmp_path / "t" / "returns.json").read_text()) == []
    assert (tmp_path / "t" / "policy.json").exists()


def test_train_reproducible_and_evaluate(tmp_path):
    cfg = write_cfg(tmp_path, toy_cfg(8))
    for d in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("returns.json", "policy.json", "returns.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    policy = str(tmp_path / "a" / "policy.json")
    assert main(["evaluate", "--config", cfg, "--policy-file", policy, "--seeds", "3",
                 "--out", str(tmp_path / "ev")]) == EXIT_OK
    report = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert set(report["per_seed"]) == {"dqn", "random"}
    for name, rows in report["per_seed"].items():
        vals = [r["total_energy_joules"] for r in rows]
        agg = report["aggregate"][name]["total_energy_joules"]
        assert agg["mean"] == pytest.approx(np.mean(vals)) and agg["std"] == pytest.approx(np.std(vals))

    # a single evaluation seed reproduces simulate with the dqn policy
    main(["evaluate", "--config", cfg, "--policy-file", policy, "--seeds", "1", "--out", str(tmp_path / "ev1")])
    dqn_cfg = dict(toy_cfg(8), policy={"name": "dqn"})
    sim_cfg = write_cfg(tmp_path, dqn_cfg, "sim.yaml")
    assert main(["simulate", "--config", sim_cfg, "--policy-file", policy, "--out", str(tmp_path / "s")]) == EXIT_OK
    one = json.loads((tmp_path / "ev1" / "evaluation.json").read_text())["per_seed"]["dqn"][0]
    summary = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert {k: v for k, v in one.items() if k != "seed"} == summary


def test_dqn_policy_needs_file(tmp_path):
    cfg = write_cfg(tmp_path, dict(toy_cfg(0), policy={"name": "dqn"}))
    assert main(["simulate", "--config", cfg]) == EXIT_CONFIG


def test_gradcheck_exit_code(capsys):
    assert main(["gradcheck", "--seed", "3"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_forecast_one_record_per_vm(tmp_path):
    main(["gentrace", "--out", str(tmp_path / "t"), "--horizon", "10"])
    LstmModel.init(1, 3, seed=0).save(tmp_path / "m.json")
    out = tmp_path / "f.ndjson"
    assert main(["forecast", "--model", str(tmp_path / "m.json"), "--trace", str(tmp_path / "t"),
                 "--horizon", "1", "--out", str(out)]) == EXIT_OK
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(rows) == 12 and all(r["time"] == 10 for r in rows)


def test_gentrace_deterministic(tmp_path):
    for d in ("a", "b"):
        main(["gentrace", "--out", str(tmp_path / d), "--seed", "4", "--horizon", "20"])
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
