"""Heuristic placement/migration baselines and an exhaustive placement oracle.

Placement functions return a ``{vm_id: pm_id}`` map, or ``None`` to defer
(for the oracle: infeasible).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .domain import CAPACITY_TOL, ClusterState, UserRequest, check_hard, soft_penalty
from .simkernel import Migrate

MAX_ORACLE_VMS = 4
MAX_ORACLE_PMS = 3


class InstanceTooLarge(ValueError):
    pass


@dataclass
class ThresholdConfig:
    theta_hi: float = 0.8
    theta_lo: float = 0.2
    cooldown: int = 10

    def __post_init__(self):
        if not 0 <= self.theta_lo < self.theta_hi <= 1:
            raise ValueError("need 0 <= theta_lo < theta_hi <= 1")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")


def _fits(pm, load, vm) -> bool:
    return (load[0] + vm.cpu_demand <= pm.cpu_capacity + CAPACITY_TOL
            and load[1] + vm.mem_demand <= pm.mem_capacity + CAPACITY_TOL)


def _group_domains(state: ClusterState, group):
    if group is None:
        return set()
    return {state.pm(v.placement).fault_domain for v in state.vms.values()
            if v.group == group and v.placement is not None}


def _greedy(state: ClusterState, req: UserRequest, choose):
    load = state.committed_load()
    used = {}
    assignment = {}
    for vm in req.vms:
        if vm.group is not None and vm.group not in used:
            used[vm.group] = _group_domains(state, vm.group)
        taken = used.get(vm.group, set()) if vm.group is not None else set()
        candidates = [pm for pm in state.pms
                      if _fits(pm, load[pm.id], vm) and pm.fault_domain not in taken]
        if not candidates:
            return None
        pm = choose(candidates, load, vm)
        assignment[vm.id] = pm.id
        load[pm.id][0] += vm.cpu_demand
        load[pm.id][1] += vm.mem_demand
        if vm.group is not None:
            taken.add(pm.fault_domain)
    if not check_hard(state, assignment, req.hard, req.vms):
        return None
    return assignment


def first_fit(state: ClusterState, req: UserRequest) -> dict | None:
    return _greedy(state, req, lambda cands, load, vm: cands[0])


def best_fit(state: ClusterState, req: UserRequest) -> dict | None:
    def tightest(cands, load, vm):
        # min() keeps the first of equal keys, i.e. the lowest PM index
        return min(cands, key=lambda pm: pm.cpu_capacity - load[pm.id][0] - vm.cpu_demand)
    return _greedy(state, req, tightest)


def brute_force_placement(state: ClusterState, req: UserRequest) -> dict | None:
    """Hard-feasible assignment with least soft penalty; ties go to the
    lexicographically smallest assignment (PM indices in request VM order)."""
    if len(req.vms) > MAX_ORACLE_VMS or len(state.pms) > MAX_ORACLE_PMS:
        raise InstanceTooLarge(f"oracle limited to {MAX_ORACLE_VMS} VMs x {MAX_ORACLE_PMS} PMs")
    best, best_pen = None, None
    ids = [vm.id for vm in req.vms]
    for combo in itertools.product(range(len(state.pms)), repeat=len(ids)):
        assignment = {v: state.pms[k].id for v, k in zip(ids, combo)}
        if not check_hard(state, assignment, req.hard, req.vms):
            continue
        pen = soft_penalty(state, assignment, req.soft, req.vms)
        if best_pen is None or pen < best_pen:
            best, best_pen = assignment, pen
    return best


def _utilization(state: ClusterState) -> dict[str, float]:
    load = state.committed_load()
    return {pm.id: load[pm.id][0] / pm.cpu_capacity for pm in state.pms}


def threshold_migrator(state: ClusterState, cfg: ThresholdConfig, last_migrated: dict | None = None,
                       predicted: dict | None = None) -> list[Migrate]:
    """Overload relief plus underload draining, at most one move per source PM.

    A PM above ``theta_hi`` sheds its smallest-cpu VM to the least-utilized PM
    that stays at or below ``theta_hi``. A non-empty PM below ``theta_lo`` sends
    its smallest VM to the most-utilized PM that stays at or below ``theta_hi``,
    so it can eventually idle. ``last_migrated`` maps VM id to the step of its
    last move (for the cooldown); ``predicted`` optionally overrides per-VM cpu
    demand with a forecast when judging overload.
    """
    last_migrated = last_migrated or {}
    load = state.committed_load()
    demand = {vm.id: vm.cpu_demand for vm in state.vms.values()}
    if predicted:
        for vm_id, cpu in predicted.items():
            if vm_id in demand:
                load_pm = state.vms[vm_id].placement
                if load_pm is not None:
                    load[load_pm][0] += max(0.0, cpu - demand[vm_id])
    util = {pm.id: load[pm.id][0] / pm.cpu_capacity for pm in state.pms}
    migrating = {job.vm for job in state.migrations}
    actions: list[Migrate] = []
    sources = set()

    def movable(pm_id):
        vms = [vm for vm in state.vms.values()
               if vm.placement == pm_id and vm.id not in migrating
               and state.time - last_migrated.get(vm.id, -10**9) >= cfg.cooldown]
        return sorted(vms, key=lambda v: (v.cpu_demand, v.id))

    def receivers(src, vm):
        out = []
        for pm in state.pms:
            if pm.id == src or pm.id in sources:
                continue
            if (load[pm.id][0] + vm.cpu_demand) / pm.cpu_capacity > cfg.theta_hi + CAPACITY_TOL:
                continue
            if load[pm.id][1] + vm.mem_demand > pm.mem_capacity + CAPACITY_TOL:
                continue
            if vm.group is not None and pm.fault_domain in {
                    state.pm(v.placement).fault_domain for v in state.vms.values()
                    if v.group == vm.group and v.id != vm.id and v.placement is not None}:
                continue
            out.append(pm)
        return out

    def propose(src, vm, pm):
        actions.append(Migrate(vm.id, pm.id))
        sources.add(src)
        load[pm.id][0] += vm.cpu_demand
        load[pm.id][1] += vm.mem_demand
        util[pm.id] = load[pm.id][0] / pm.cpu_capacity

    for pm in state.pms:
        if util[pm.id] <= cfg.theta_hi:
            continue
        vms = movable(pm.id)
        if not vms:
            continue
        cands = receivers(pm.id, vms[0])
        if cands:
            propose(pm.id, vms[0], min(cands, key=lambda p: util[p.id]))

    for pm in state.pms:
        if pm.id in sources or not 0 < util[pm.id] < cfg.theta_lo:
            continue
        vms = movable(pm.id)
        if not vms:
            continue
        cands = [p for p in receivers(pm.id, vms[0]) if util[p.id] >= util[pm.id] and util[p.id] > 0]
        if cands:
            propose(pm.id, vms[0], max(cands, key=lambda p: util[p.id]))
    return actions


class ThresholdMigrator:
    """Stateful wrapper tracking per-VM cooldowns across steps."""

    def __init__(self, cfg: ThresholdConfig | None = None):
        self.cfg = cfg or ThresholdConfig()
        self.last_migrated: dict[str, int] = {}

    def __call__(self, state: ClusterState, predicted: dict | None = None) -> list[Migrate]:
        actions = threshold_migrator(state, self.cfg, self.last_migrated, predicted)
        for a in actions:
            self.last_migrated[a.vm] = state.time
        return actions
