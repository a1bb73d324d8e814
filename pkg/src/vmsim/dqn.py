"""Deep Q-Network agent for migration and admission decisions.

The agent sees a fixed-layout state vector, picks one discrete action per
step (masked to valid actions), stores transitions in a FIFO replay buffer and
regresses Q(s, a) onto TD targets from a periodically hard-synced target net.
"""

from __future__ import annotations

import copy
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import CAPACITY_TOL, ClusterState, featurize
from .energymodel import MlpModel, mlp_backward, mlp_forward, mlp_forward_cache, per_pm_power
from .optim import clip_by_global_norm, sgd_update
from .scenarios import RewardConfig, Scenario
from .simkernel import Defer, Migrate, NoOp, Place, Simulation, StepMetrics, compute_metrics


class ConfigError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass
class AgentConfig:
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 5000
    batch_size: int = 32
    target_sync_every: int = 250
    learning_rate: float = 0.01
    reward_weights: RewardConfig | None = None
    seed: int = 0
    buffer_capacity: int = 10_000
    hidden_sizes: tuple[int, ...] = (64,)
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not (0 <= self.epsilon_end <= self.epsilon_start <= 1):
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("epsilon_decay_steps", "batch_size", "target_sync_every", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if isinstance(self.reward_weights, dict):
            self.reward_weights = RewardConfig(**self.reward_weights)
        self.hidden_sizes = tuple(self.hidden_sizes)

    def epsilon(self, step: int) -> float:
        frac = min(1.0, step / self.epsilon_decay_steps)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool
    mask_next: np.ndarray | None = None

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """Bounded FIFO of transitions with seeded uniform sampling (with replacement)."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.storage: deque = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.storage)

    def push(self, transition) -> None:
        self.storage.append(transition)

    def contents(self) -> list:
        return list(self.storage)

    def sample_indices(self, n: int) -> np.ndarray:
        if not self.storage:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, len(self.storage), size=n)

    def sample(self, n: int) -> list:
        return [self.storage[i] for i in self.sample_indices(n)]


@dataclass(frozen=True)
class ActionSpace:
    """Index layout: Migrate(vm slot, pm) row-major, then Place(request slot, pm),
    then Defer, then NoOp."""

    vm_slots: int
    num_pms: int
    request_slots: int = 0

    @property
    def size(self) -> int:
        return self.vm_slots * self.num_pms + self.request_slots * self.num_pms + 2

    @property
    def defer(self) -> int:
        return self.size - 2

    @property
    def noop(self) -> int:
        return self.size - 1

    def describe(self, index: int) -> dict:
        if not 0 <= index < self.size:
            raise IndexError(index)
        n_mig = self.vm_slots * self.num_pms
        if index < n_mig:
            return {"kind": "migrate", "vm_slot": index // self.num_pms, "pm": index % self.num_pms}
        if index < n_mig + self.request_slots * self.num_pms:
            k = index - n_mig
            return {"kind": "place", "request_slot": k // self.num_pms, "pm": k % self.num_pms}
        return {"kind": "defer"} if index == self.defer else {"kind": "noop"}

    def manifest(self) -> list[dict]:
        return [self.describe(i) for i in range(self.size)]


def init_qnet(state_dim: int, n_actions: int, hidden=(64,), seed: int = 0) -> MlpModel:
    rng = np.random.default_rng(seed)
    sizes = [state_dim, *hidden, n_actions]
    ws = [rng.uniform(-1.0, 1.0, size=(sizes[k + 1], sizes[k])) / math.sqrt(sizes[k])
          for k in range(len(sizes) - 1)]
    bs = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
    return MlpModel(ws, bs, "tanh")


def state_dim(scenario: Scenario) -> int:
    p = len(scenario.pms)
    return 3 * p + scenario.vm_slots * (9 + p) + 3 * scenario.request_slots + 2


def encode_state(state: ClusterState, scenario: Scenario, waiting=()) -> np.ndarray:
    """Fixed layout, every entry clamped to [-1, 1]:

    * per PM: cpu remaining, mem remaining, power / peak            (3 x P)
    * per VM slot: the seven per-decision features against its host,
      host one-hot (P), migrating flag, occupied flag               (V x (9 + P))
    * per request slot: occupied flag, cpu / mean PM cpu capacity,
      mem / mean PM mem capacity of its first VM                    (3 x R)
    * pending queue length / max_pending, active migrations / V      (2)
    """
    P = len(scenario.pms)
    if len(state.pms) != P or [pm.id for pm in state.pms] != [pm.id for pm in scenario.pms]:
        raise ConfigError("cluster does not match the scenario's PMs")
    if len(state.vms) > scenario.vm_slots:
        raise ConfigError(f"{len(state.vms)} VMs exceed {scenario.vm_slots} slots")
    out = np.zeros(state_dim(scenario))
    load = state.committed_load()
    watts = per_pm_power(state, None if not scenario.sim.power_off_empty else _power_off())
    for k, pm in enumerate(state.pms):
        out[3 * k] = 1.0 - load[pm.id][0] / pm.cpu_capacity
        out[3 * k + 1] = 1.0 - load[pm.id][1] / pm.mem_capacity
        out[3 * k + 2] = watts[pm.id] / pm.power_peak if pm.power_peak > 0 else 0.0
    base = 3 * P
    width = 9 + P
    migrating = {job.vm for job in state.migrations}
    for i, vm in enumerate(state.vms.values()):
        off = base + i * width
        if vm.placement is None:
            continue
        out[off:off + 7] = featurize(state, vm.id, vm.placement).as_tuple()
        out[off + 7 + state.pm_index[vm.placement]] = 1.0
        out[off + 7 + P] = 1.0 if vm.id in migrating else 0.0
        out[off + 8 + P] = 1.0
    base += scenario.vm_slots * width
    mean_cpu = sum(pm.cpu_capacity for pm in state.pms) / P
    mean_mem = sum(pm.mem_capacity for pm in state.pms) / P
    for k, req in enumerate(list(waiting)[:scenario.request_slots]):
        out[base + 3 * k] = 1.0
        out[base + 3 * k + 1] = req.vms[0].cpu_demand / mean_cpu
        out[base + 3 * k + 2] = req.vms[0].mem_demand / mean_mem
    base += 3 * scenario.request_slots
    out[base] = len(state.pending_requests) / max(1, scenario.max_pending)
    out[base + 1] = len(state.migrations) / max(1, scenario.vm_slots)
    return np.clip(out, -1.0, 1.0)


def _power_off():
    from .energymodel import PowerModel
    return PowerModel(power_off_empty=True)


def compute_reward(before: StepMetrics, after: StepMetrics, action, cfg: RewardConfig) -> float:
    """Weighted utilization minus normalized energy, imbalance, migration and
    soft-constraint costs, plus an energy-delta shaping term."""
    def e_hat(m):
        return m.energy_joules / m.peak_energy_joules if m.peak_energy_joules > 0 else 0.0

    migrated = 1.0 if isinstance(action, Migrate) or (
        isinstance(action, dict) and action.get("kind") == "migrate") else 0.0
    r = (cfg.w_util * after.cpu_utilization
         - cfg.w_energy * e_hat(after)
         - cfg.w_balance * after.load_imbalance
         - cfg.w_migration * migrated
         - cfg.w_soft * after.soft_penalty_total / cfg.soft_scale)
    if cfg.shaping_bonus:
        r += cfg.shaping_bonus * (e_hat(before) - e_hat(after))
    return float(r)


def q_values(qnet: MlpModel, s) -> np.ndarray:
    return mlp_forward(qnet, np.asarray(s, dtype=float))


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    return int(np.argmax(np.where(mask, q, -np.inf)))


def select_action(qnet, s, epsilon: float, valid_mask, rng: np.random.Generator) -> int:
    """Epsilon-greedy over valid actions; greedy ties go to the lowest index.

    ``qnet`` may be an MlpModel or a precomputed vector of Q-values.
    """
    mask = np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        raise ConfigError("no valid action in mask")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(mask)))
    q = qnet if isinstance(qnet, np.ndarray) else q_values(qnet, s)
    return masked_argmax(q, mask)


def td_target(r: float, s_next, terminal: bool, q_target: MlpModel, gamma: float, valid_mask_next=None) -> float:
    if terminal or gamma == 0:
        return float(r)
    q = q_values(q_target, s_next)
    mask = np.ones(q.shape, dtype=bool) if valid_mask_next is None else np.asarray(valid_mask_next, dtype=bool)
    return float(r + gamma * np.max(q[mask]))


def _batch_targets(batch, q_target, gamma):
    r = np.array([t.r for t in batch])
    if gamma == 0:
        return r
    S2 = np.stack([t.s_next for t in batch])
    q2 = mlp_forward(q_target, S2)
    masks = np.stack([t.mask_next if t.mask_next is not None else np.ones(q2.shape[1], dtype=bool)
                      for t in batch])
    best = np.where(masks, q2, -np.inf).max(axis=1)
    term = np.array([t.terminal for t in batch])
    return np.where(term, r, r + gamma * best)


def td_loss(qnet, q_target, batch, gamma) -> float:
    y = _batch_targets(batch, q_target, gamma)
    S = np.stack([t.s for t in batch])
    a = np.array([t.a for t in batch])
    q = mlp_forward(qnet, S)[np.arange(len(batch)), a]
    return float(np.mean((y - q) ** 2))


def train_step(qnet: MlpModel, q_target: MlpModel, batch, cfg: AgentConfig) -> float:
    """One gradient step on the mean squared TD error; returns the pre-update loss."""
    if not batch:
        raise ValueError("empty batch")
    y = _batch_targets(batch, q_target, cfg.gamma)
    S = np.stack([t.s for t in batch])
    a = np.array([t.a for t in batch])
    out, cache = mlp_forward_cache(qnet, S)
    idx = np.arange(len(batch))
    err = out[idx, a] - y
    loss = float(np.mean(err * err))
    dY = np.zeros_like(out)
    dY[idx, a] = 2.0 * err / len(batch)
    grads = mlp_backward(qnet, cache, dY)
    sgd_update(qnet.params(), clip_by_global_norm(grads, cfg.clip_norm), cfg.learning_rate)
    return loss


def sync_target(qnet: MlpModel, q_target: MlpModel) -> None:
    for dst, src in zip(q_target.params(), qnet.params()):
        np.copyto(dst, src)


class ClusterEnv:
    """Simulation wrapped with the scenario's action enumeration and state encoding."""

    def __init__(self, scenario: Scenario, reward: RewardConfig | None = None):
        self.scenario = scenario
        self.reward_cfg = reward or scenario.reward
        self.sim = Simulation(scenario.pms, scenario.sim, scenario.vms, scenario.trace)
        self.actions = ActionSpace(scenario.vm_slots, len(scenario.pms), scenario.request_slots)
        self.metrics: list[StepMetrics] = []
        self.events: list = []
        self.reset()

    @property
    def state(self) -> ClusterState:
        return self.sim.state

    @property
    def done(self) -> bool:
        return self.sim.done

    def reset(self) -> np.ndarray:
        self.sim.reset()
        self._prev = compute_metrics(self.state, self.sim.cfg, self.sim.power, 0)
        self.metrics, self.events = [], []
        return self.observe()

    def observe(self) -> np.ndarray:
        return encode_state(self.state, self.scenario, self.sim.waiting())

    def _slot_vm(self, slot):
        vms = list(self.state.vms.values())
        return vms[slot] if slot < len(vms) else None

    def _rotated_placement(self, req, start: int):
        from .policies import _greedy
        pms = self.state.pms
        order = pms[start:] + pms[:start]
        rank = {pm.id: k for k, pm in enumerate(order)}
        return _greedy(self.state, req, lambda cands, load, vm: min(cands, key=lambda p: rank[p.id]))

    def to_kernel(self, index: int):
        d = self.actions.describe(index)
        if d["kind"] == "migrate":
            vm = self._slot_vm(d["vm_slot"])
            return Migrate(vm.id if vm else "", self.state.pms[d["pm"]].id)
        waiting = self.sim.waiting()
        if d["kind"] == "place":
            req = waiting[d["request_slot"]] if d["request_slot"] < len(waiting) else None
            if req is None:
                return Place("", {})
            return Place(req.id, self._rotated_placement(req, d["pm"]) or {})
        if d["kind"] == "defer":
            return Defer(waiting[0].id) if waiting else Defer("")
        return NoOp()

    def valid_mask(self) -> np.ndarray:
        state = self.state
        mask = np.zeros(self.actions.size, dtype=bool)
        mask[self.actions.noop] = True
        P = len(state.pms)
        load = state.committed_load()
        migrating = {job.vm for job in state.migrations}
        for slot, vm in enumerate(state.vms.values()):
            if vm.placement is None or vm.id in migrating:
                continue
            group_domains = None
            if vm.group is not None:
                group_domains = {state.pm(v.placement).fault_domain for v in state.vms.values()
                                 if v.group == vm.group and v.id != vm.id and v.placement is not None}
            for k, pm in enumerate(state.pms):
                if pm.id == vm.placement:
                    continue
                if (load[pm.id][0] + vm.cpu_demand > pm.cpu_capacity + CAPACITY_TOL
                        or load[pm.id][1] + vm.mem_demand > pm.mem_capacity + CAPACITY_TOL):
                    continue
                if group_domains and pm.fault_domain in group_domains:
                    continue
                mask[slot * P + k] = True
        waiting = self.sim.waiting()
        base = self.actions.vm_slots * P
        free_slots = self.actions.vm_slots - len(state.vms)
        for r, req in enumerate(waiting[:self.actions.request_slots]):
            if len(req.vms) > free_slots:
                continue
            for k in range(P):
                if self._rotated_placement(req, k) is not None:
                    mask[base + r * P + k] = True
        if waiting:
            mask[self.actions.defer] = True
        return mask

    def step(self, index: int):
        """Apply one enumerated action; returns (next obs, reward, done, info)."""
        action = self.to_kernel(index)
        metrics, events = self.sim.step([] if isinstance(action, NoOp) else [action])
        reward = compute_reward(self._prev, metrics, action, self.reward_cfg)
        self._prev = metrics
        self.metrics.append(metrics)
        self.events.extend(events)
        return self.observe(), reward, self.done, {"metrics": metrics, "events": events, "action": action}

    def snapshot(self):
        return copy.deepcopy((self.sim.state, self._prev))

    def restore(self, snap) -> None:
        state, prev = copy.deepcopy(snap)
        self.sim.state = state
        self._prev = prev

    def state_key(self) -> tuple:
        s = self.state
        return (
            s.time,
            tuple((v.id, v.placement, v.cpu_demand, v.mem_demand) for v in s.vms.values()),
            tuple((j.vm, j.target, j.phase, j.bytes_remaining, j.downtime_steps_remaining,
                   j.preparation_remaining) for j in s.migrations),
            tuple(r.id for r in s.pending_requests),
            tuple(sorted(s.down_vms)),
            tuple(sorted((k, end) for k, (_, end) in s.active_requests.items())),
        )


def rollout(env: ClusterEnv, choose) -> tuple[float, list[StepMetrics], list]:
    """Run one episode with ``choose(obs, mask) -> index``; returns (return, metrics, events)."""
    obs = env.reset()
    total = 0.0
    while not env.done:
        a = choose(obs, env.valid_mask())
        obs, r, _, _ = env.step(a)
        total += r
    return total, list(env.metrics), list(env.events)


def greedy_policy(qnet: MlpModel):
    return lambda obs, mask: masked_argmax(q_values(qnet, obs), mask)


def random_policy(rng: np.random.Generator):
    return lambda obs, mask: int(rng.choice(np.flatnonzero(mask)))


def run_training(env: ClusterEnv, cfg: AgentConfig, episodes: int, qnet: MlpModel | None = None):
    """Standard DQN loop. Returns (trained Q-network, per-episode undiscounted return)."""
    if cfg.reward_weights is not None:
        env.reward_cfg = cfg.reward_weights
    dim = state_dim(env.scenario)
    qnet = qnet.copy() if qnet is not None else init_qnet(dim, env.actions.size, cfg.hidden_sizes, cfg.seed)
    if qnet.input_dim != dim or qnet.output_dim != env.actions.size:
        raise ConfigError("Q-network dimensions do not match the scenario")
    q_target = qnet.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    buffer = ReplayBuffer(cfg.buffer_capacity, seed=int(rng.integers(2**63)))
    returns: list[float] = []
    steps = 0
    for _ in range(episodes):
        s = env.reset()
        mask = env.valid_mask()
        total = 0.0
        while not env.done:
            a = select_action(qnet, s, cfg.epsilon(steps), mask, rng)
            s_next, r, done, _ = env.step(a)
            mask_next = env.valid_mask()
            buffer.push(Transition(s, a, r, s_next, done, mask_next))
            total += r
            steps += 1
            if len(buffer) >= cfg.batch_size:
                train_step(qnet, q_target, buffer.sample(cfg.batch_size), cfg)
            if steps % cfg.target_sync_every == 0:
                sync_target(qnet, q_target)
            s, mask = s_next, mask_next
        returns.append(total)
    return qnet, returns


@dataclass
class TabularMDP:
    """Explicit MDP: ``transitions[s]`` maps action -> list of (prob, next_state, reward).

    States with no actions are terminal (value 0).
    """

    transitions: list[dict]
    initial: int = 0
    labels: list = field(default_factory=list)

    @property
    def num_pairs(self) -> int:
        return sum(len(t) for t in self.transitions)


def value_iteration_oracle(mdp: TabularMDP, gamma: float, tol: float = 1e-9, max_iter: int = 1_000_000,
                           max_pairs: int = 10_000):
    """Value iteration to sup-norm residual < ``tol``.

    Returns (values, greedy policy as {state: action}, optimal value of the
    initial state). ``gamma == 1`` is accepted for MDPs whose every path
    reaches a terminal state (finite-horizon, undiscounted return).
    """
    if mdp.num_pairs > max_pairs:
        raise SizeError(f"{mdp.num_pairs} state-action pairs exceed the {max_pairs} limit")
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    n = len(mdp.transitions)
    V = np.zeros(n)
    for _ in range(max_iter):
        new = np.zeros(n)
        for s, acts in enumerate(mdp.transitions):
            if acts:
                new[s] = max(sum(p * (r + gamma * V[s2]) for p, s2, r in outs) for outs in acts.values())
        residual = float(np.max(np.abs(new - V))) if n else 0.0
        V = new
        if residual < tol:
            break
    else:
        raise RuntimeError("value iteration did not converge")
    policy = {}
    for s, acts in enumerate(mdp.transitions):
        if acts:
            # ties go to the lowest action index
            policy[s] = max(sorted(acts), key=lambda a: sum(p * (r + gamma * V[s2]) for p, s2, r in acts[a]))
    return V, policy, float(V[mdp.initial]) if n else 0.0


def enumerate_mdp(env: ClusterEnv, max_pairs: int = 10_000) -> TabularMDP:
    """Explore every reachable state of a deterministic env under valid actions."""
    env.reset()
    root = env.state_key()
    index = {root: 0}
    snaps = [env.snapshot()]
    transitions: list[dict] = [None]
    labels = [root]
    frontier = [0]
    pairs = 0
    while frontier:
        s = frontier.pop()
        env.restore(snaps[s])
        if env.done:
            transitions[s] = {}
            continue
        acts = {}
        for a in np.flatnonzero(env.valid_mask()):
            env.restore(snaps[s])
            _, reward, _, _ = env.step(int(a))
            key = env.state_key()
            if key not in index:
                index[key] = len(labels)
                labels.append(key)
                snaps.append(env.snapshot())
                transitions.append(None)
                frontier.append(index[key])
            acts[int(a)] = [(1.0, index[key], reward)]
            pairs += 1
            if pairs > max_pairs:
                raise SizeError(f"more than {max_pairs} state-action pairs")
        transitions[s] = acts
    env.reset()
    return TabularMDP(transitions, 0, labels)


def save_policy(path, qnet: MlpModel, env: ClusterEnv, extra: dict | None = None) -> None:
    doc = {
        "model": qnet.to_dict(),
        "actions": env.actions.manifest(),
        "state_dim": state_dim(env.scenario),
        "scenario": env.scenario.name,
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f)


def load_policy(path) -> tuple[MlpModel, list[dict], dict]:
    with open(path) as f:
        doc = json.load(f)
    return MlpModel.from_dict(doc["model"]), doc["actions"], doc
