"""Command-line harness: ``vmsim {simulate,train,evaluate,forecast,gradcheck,gentrace}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 gradient check above 1e-4.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import dqn, forecaster, policies, scenarios
from .domain import PhysicalMachine, VirtualMachine
from .optim import TrainConfig
from .simkernel import Defer, Place, SimConfig
from .traceio import (
    SynthConfig,
    TraceParseError,
    generate_synthetic,
    load_trace,
    summarize,
    write_report,
    write_trace,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_THRESHOLD = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4
POLICIES = ("first_fit", "best_fit", "threshold", "dqn", "random")
PRESETS = {"toy_consolidation": scenarios.toy_consolidation,
           "synthetic_consolidation": scenarios.synthetic_consolidation}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def subseed(seed: int, name: str) -> int:
    """Named sub-seed: first 8 bytes of sha256("{seed}:{name}"), big-endian, top bit cleared."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _typed(cls, d, where):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML/JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    return cfg


def _pms(specs):
    out = []
    for k, spec in enumerate(specs):
        spec = dict(spec)
        spec.setdefault("id", f"pm{k}")
        if "location" in spec:
            spec["location"] = tuple(float(v) for v in spec["location"])
        out.append(_typed(PhysicalMachine, spec, f"scenario.pms[{k}]"))
    return out


def build_scenario(cfg: dict, seed: int, base_dir: Path = Path(".")) -> scenarios.Scenario:
    sc = cfg.get("scenario")
    if not isinstance(sc, dict):
        raise ConfigError("missing scenario section")
    if "preset" in sc:
        name = sc["preset"]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        if "trace" in sc or "synth" in sc:
            raise ConfigError("preset scenarios bring their own workload")
        kw = {k: v for k, v in sc.items() if k != "preset"}
        if name == "synthetic_consolidation":
            kw.setdefault("seed", subseed(seed, "trace") % 2**32)
        try:
            scenario = PRESETS[name](**kw)
        except TypeError as e:
            raise ConfigError(f"scenario: {e}") from e
        if "reward" in cfg:
            scenario.reward = _typed(scenarios.RewardConfig, cfg["reward"], "reward")
        return scenario

    if ("trace" in sc) == ("synth" in sc):
        raise ConfigError("scenario needs exactly one of 'trace' or 'synth'")
    if not sc.get("pms"):
        raise ConfigError("scenario.pms must list at least one PM")
    pms = _pms(sc["pms"])
    sim_d = dict(cfg.get("sim") or {})
    sim_d.setdefault("seed", subseed(seed, "sim") % 2**32)
    sim = _typed(SimConfig, sim_d, "sim")
    if "synth" in sc:
        synth_d = dict(sc["synth"] or {})
        synth_d.setdefault("seed", subseed(seed, "trace") % 2**32)
        synth_d.setdefault("horizon", sim.horizon)
        trace = generate_synthetic(_typed(SynthConfig, synth_d, "scenario.synth"))
    else:
        path = Path(sc["trace"])
        trace = load_trace(path if path.is_absolute() else base_dir / path)
    vms = _initial_vms(sc, trace, pms)
    return scenarios.Scenario(
        pms, sim, vms, trace=trace,
        vm_slots=sc.get("vm_slots"),
        request_slots=int(sc.get("request_slots", 0)),
        max_pending=int(sc.get("max_pending", 10)),
        reward=_typed(scenarios.RewardConfig, cfg.get("reward"), "reward"),
        name=str(sc.get("name", "custom")),
    )


def _initial_vms(sc, trace, pms):
    """Trace VMs present at t=0, placed round-robin unless listed under scenario.vms."""
    if "vms" in sc:
        return [_typed(VirtualMachine, v, f"scenario.vms[{k}]") for k, v in enumerate(sc["vms"])]
    first = trace.records_at(0)
    return [VirtualMachine(r.vm_id, r.cpu, r.mem, r.storage_io, r.net_io,
                           mem_footprint=r.mem, placement=pms[k % len(pms)].id)
            for k, r in enumerate(first)]


def _agent_config(cfg: dict, seed: int) -> tuple[dqn.AgentConfig, int]:
    d = dict(cfg.get("agent") or {})
    episodes = int(d.pop("episodes", 100))
    if episodes < 0:
        raise ConfigError("agent.episodes must be >= 0")
    d.setdefault("seed", subseed(seed, "agent") % 2**32)
    try:
        return _typed(dqn.AgentConfig, d, "agent"), episodes
    except dqn.ConfigError as e:
        raise ConfigError(f"agent: {e}") from e


class DemandForecaster:
    """Per-VM one-step-ahead cpu forecasts from a shared scalar LSTM."""

    def __init__(self, model: forecaster.LstmModel):
        self.model = model
        self.states: dict[str, forecaster.LstmState] = {}

    def observe(self, state) -> dict[str, float]:
        out = {}
        for vm in state.vms.values():
            if vm.placement is None:
                continue
            s = self.states.get(vm.id, forecaster.LstmState.zeros(self.model.hidden_dim))
            s = forecaster.lstm_step(self.model, s, [vm.cpu_demand])
            self.states[vm.id] = s
            out[vm.id] = max(0.0, float(forecaster.predict(self.model, s)[0]))
        return out


def build_forecaster(cfg: dict, scenario, seed: int):
    fc = cfg.get("forecaster")
    if not fc:
        return None
    fc = dict(fc)
    hidden = int(fc.pop("hidden_dim", 8))
    model_path = fc.pop("model", None)
    if model_path:
        return DemandForecaster(forecaster.LstmModel.load(model_path))
    fc.setdefault("seed", subseed(seed, "init") % 2**32)
    tcfg = _typed(TrainConfig, fc, "forecaster")
    if scenario.trace is None:
        raise ConfigError("forecaster needs a trace to train on")
    horizon = scenario.sim.horizon
    series = [scenario.trace.cpu_series(v, horizon) for v in scenario.trace.vm_ids()]
    xs = np.concatenate([s[:-1] for s in series]).reshape(-1, 1)
    ys = np.concatenate([s[1:] for s in series]).reshape(-1, 1)
    model = forecaster.LstmModel.init(1, hidden, 1, seed=tcfg.seed, init_scale=tcfg.init_scale)
    model, _ = forecaster.train(model, xs, ys, tcfg)
    return DemandForecaster(model)


def run_heuristic(scenario, name: str, policy_cfg: dict, predictor=None):
    """One episode with a heuristic policy. Returns (metrics, events)."""
    env = dqn.ClusterEnv(scenario)
    sim = env.sim
    sim.reset()
    place = policies.best_fit if name == "best_fit" else policies.first_fit
    migrator = None
    if name == "threshold":
        migrator = policies.ThresholdMigrator(_typed(policies.ThresholdConfig, policy_cfg, "policy"))
    metrics, events = [], []
    while not sim.done:
        actions = []
        predicted = predictor.observe(sim.state) if predictor else None
        for req in sim.waiting():
            placement = place(sim.state, req)
            actions.append(Place(req.id, placement) if placement is not None else Defer(req.id))
        if migrator is not None:
            actions.extend(migrator(sim.state, predicted))
        m, ev = sim.step(actions)
        metrics.append(m)
        events.extend(ev)
    return metrics, events


def _check_policy(qnet, manifest, env):
    if manifest != env.actions.manifest() or qnet.input_dim != dqn.state_dim(env.scenario):
        raise ConfigError("policy file does not match the scenario's state/action layout")


def run_policy(scenario, cfg: dict, seed: int, policy_file=None, predictor=None):
    """Run one episode with the configured policy. Returns (metrics, events, return or None)."""
    pol = dict(cfg.get("policy") or {})
    name = pol.pop("name", "first_fit")
    if name not in POLICIES:
        raise ConfigError(f"unknown policy {name!r}; choose from {list(POLICIES)}")
    if name in ("first_fit", "best_fit", "threshold"):
        metrics, events = run_heuristic(scenario, name, pol, predictor)
        return metrics, events, None
    env = dqn.ClusterEnv(scenario)
    if name == "random":
        choose = dqn.random_policy(np.random.default_rng(subseed(seed, "policy")))
    else:
        path = policy_file or pol.get("file")
        if not path:
            raise ConfigError("policy 'dqn' needs --policy-file or policy.file")
        qnet, manifest, _ = _load_policy(path)
        _check_policy(qnet, manifest, env)
        choose = dqn.greedy_policy(qnet)
    ret, metrics, events = dqn.rollout(env, choose)
    return metrics, events, ret


def _load_policy(path):
    try:
        return dqn.load_policy(path)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot load policy file {path}: {e}") from e


def _setup(args):
    cfg = load_config(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    if getattr(args, "horizon", None) is not None:
        cfg.setdefault("sim", {})["horizon"] = args.horizon
        if "preset" in (cfg.get("scenario") or {}):
            cfg["scenario"]["horizon"] = args.horizon
    out = Path(args.out or cfg.get("output") or "out")
    return cfg, seed, out


def cmd_simulate(args) -> int:
    cfg, seed, out = _setup(args)
    scenario = build_scenario(cfg, seed, Path(args.config).parent)
    predictor = build_forecaster(cfg, scenario, seed)
    metrics, events, ret = run_policy(scenario, cfg, seed, args.policy_file, predictor)
    summary = write_report(metrics, events, out, ret)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, seed, out = _setup(args)
    scenario = build_scenario(cfg, seed, Path(args.config).parent)
    agent, episodes = _agent_config(cfg, seed)
    env = dqn.ClusterEnv(scenario)
    qnet, returns = dqn.run_training(env, agent, episodes)
    out.mkdir(parents=True, exist_ok=True)
    dqn.save_policy(out / "policy.json", qnet, env, {"episodes": episodes, "seed": seed})
    (out / "returns.json").write_text(json.dumps(returns) + "\n")
    if returns:
        from .plots import plot_returns
        plot_returns({"dqn": returns}, out / "returns.png")
    final = returns[-1] if returns else None
    print(json.dumps({"episodes": episodes, "final_return": final}))
    return EXIT_OK


def _stats(values):
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std())}


def cmd_evaluate(args) -> int:
    cfg, seed, out = _setup(args)
    n = int(args.seeds if args.seeds is not None else (cfg.get("evaluate") or {}).get("seeds", 10))
    if n < 1:
        raise ConfigError("need at least one evaluation seed")
    policy_file = args.policy_file or (cfg.get("policy") or {}).get("file")
    if not policy_file:
        raise ConfigError("evaluate needs --policy-file or policy.file")
    qnet, manifest, _ = _load_policy(policy_file)
    per_seed = {"dqn": [], "random": []}
    for s in range(seed, seed + n):
        scenario = build_scenario(cfg, s, Path(args.config).parent)
        for name in per_seed:
            run_cfg = dict(cfg, policy={"name": name})
            if name == "dqn":
                _check_policy(qnet, manifest, dqn.ClusterEnv(scenario))
            metrics, events, ret = run_policy(scenario, run_cfg, s, policy_file)
            per_seed[name].append(dict(summarize(metrics, events, ret), seed=s))
    report = {"seeds": list(range(seed, seed + n)), "per_seed": per_seed, "aggregate": {}}
    for name, rows in per_seed.items():
        report["aggregate"][name] = {k: _stats([r[k] for r in rows])
                                     for k in ("episode_return", "total_energy_joules", "mean_utilization")}
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report["aggregate"], sort_keys=True))
    return EXIT_OK


def cmd_forecast(args) -> int:
    if not args.model or not args.trace:
        raise ConfigError("forecast needs --model and --trace")
    model = forecaster.LstmModel.load(args.model)
    trace = load_trace(args.trace)
    horizon = args.horizon or 1
    rows = []
    for vm_id in trace.vm_ids():
        series = trace.cpu_series(vm_id)
        preds = forecaster.forecast(model, series.reshape(-1, 1), horizon)
        start = len(series)
        rows.extend({"time": start + k, "vm_id": vm_id, "cpu": max(0.0, float(p[0]))} for k, p in enumerate(preds))
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    rng = np.random.default_rng(subseed(seed, "init"))
    model = forecaster.LstmModel.init(args.input_dim, args.hidden_dim, args.output_dim,
                                      seed=subseed(seed, "init") % 2**32, init_scale=0.5)
    xs = rng.normal(size=(args.length, args.input_dim))
    ys = rng.normal(size=(args.length, model.output_dim))
    err = forecaster.gradient_check(model, xs, ys)
    print(f"max relative error {err:.3e}")
    return EXIT_OK if err < GRADCHECK_TOL else EXIT_THRESHOLD


def cmd_gentrace(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    d = dict(cfg.get("synth", cfg) or {})
    if args.seed is not None:
        d["seed"] = args.seed
    if args.horizon is not None:
        d["horizon"] = args.horizon
    trace = generate_synthetic(_typed(SynthConfig, d, "synth"))
    path = write_trace(trace, args.out or "trace")
    print(str(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmsim", description="VM placement and migration simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--horizon", type=int)
        return sp

    common(sub.add_parser("simulate")).add_argument("--policy-file")
    common(sub.add_parser("train"))
    ev = common(sub.add_parser("evaluate"))
    ev.add_argument("--policy-file")
    ev.add_argument("--seeds", type=int)
    fc = sub.add_parser("forecast")
    fc.add_argument("--model")
    fc.add_argument("--trace")
    fc.add_argument("--horizon", type=int)
    fc.add_argument("--out")
    gc = sub.add_parser("gradcheck")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--input-dim", type=int, default=2)
    gc.add_argument("--hidden-dim", type=int, default=4)
    gc.add_argument("--output-dim", type=int, default=1)
    gc.add_argument("--length", type=int, default=10)
    common(sub.add_parser("gentrace"), config_required=False)
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "forecast": cmd_forecast, "gradcheck": cmd_gradcheck, "gentrace": cmd_gentrace}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, dqn.ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceParseError, DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
