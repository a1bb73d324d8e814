"""Fixed-step discrete-time simulation: demand updates, request admission and
three-phase live migration (preparation, transfer, switchover).

A migrating VM keeps serving on its source through preparation and transfer;
it is unavailable only for the ``switchover_steps`` steps before its placement
flips to the target. The target's capacity is reserved from the moment the
migration starts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

from .domain import (
    CAPACITY_TOL,
    ClusterState,
    PhysicalMachine,
    UnknownIdError,
    UserRequest,
    VirtualMachine,
    check_hard,
    soft_penalty,
)
from .energymodel import PowerModel, per_pm_power, pm_utilizations

PREPARATION = "Preparation"
TRANSFER = "Transfer"
SWITCHOVER = "Switchover"
DONE = "Done"
PHASES = (PREPARATION, TRANSFER, SWITCHOVER, DONE)

REQUEST_ARRIVED = "RequestArrived"
REQUEST_ADMITTED = "RequestAdmitted"
REQUEST_DEFERRED = "RequestDeferred"
REQUEST_COMPLETED = "RequestCompleted"
MIGRATION_STARTED = "MigrationStarted"
MIGRATION_PHASE_CHANGED = "MigrationPhaseChanged"
MIGRATION_COMPLETED = "MigrationCompleted"
ACTION_REJECTED = "ActionRejected"


class MigrationRejected(ValueError):
    """A migration request failed a precondition; ``reason`` names which."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


class ConstraintViolation(ValueError):
    """A proposed placement fails capacity or hard constraints."""


@dataclass
class SimConfig:
    step_seconds: float = 300.0
    migration_bandwidth: float = 1024.0
    preparation_steps: int = 1
    switchover_steps: int = 1
    seed: int = 0
    horizon: int = 100
    power_off_empty: bool = False

    def __post_init__(self):
        if self.step_seconds <= 0:
            raise ValueError("step_seconds must be positive")
        if self.migration_bandwidth <= 0:
            raise ValueError("migration_bandwidth must be positive")
        if self.preparation_steps < 0:
            raise ValueError("preparation_steps must be >= 0")
        if self.switchover_steps < 1:
            raise ValueError("switchover_steps must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")


@dataclass
class MigrationJob:
    vm: str
    source: str
    target: str
    phase: str
    bytes_remaining: float
    started_at: int
    downtime_steps_remaining: int
    preparation_remaining: int = 0


@dataclass(frozen=True)
class SimEvent:
    time: int
    kind: str
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind, "payload": self.payload}


@dataclass(frozen=True)
class StepMetrics:
    time: int
    total_power: float
    energy_joules: float
    cpu_utilization: float
    migrations_active: int
    downtime_steps: int
    deferred_requests: int
    soft_penalty_total: float
    # reward inputs, not part of the NDJSON record
    load_imbalance: float = field(default=0.0, metadata={"report": False})
    peak_energy_joules: float = field(default=0.0, metadata={"report": False})

    def to_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.metadata.get("report", True)}

    @classmethod
    def from_record(cls, rec: dict) -> StepMetrics:
        return cls(**rec)


REPORT_KEYS = tuple(f.name for f in fields(StepMetrics) if f.metadata.get("report", True))


@dataclass(frozen=True)
class Migrate:
    vm: str
    target: str


@dataclass(frozen=True)
class Place:
    request: str
    placement: dict


@dataclass(frozen=True)
class Defer:
    request: str


@dataclass(frozen=True)
class NoOp:
    pass


def start_migration(state: ClusterState, vm_id: str, target: str, cfg: SimConfig) -> MigrationJob:
    vm = state.vm(vm_id)
    state.pm(target)
    if vm.placement is None:
        raise MigrationRejected("unplaced", f"VM {vm_id} is not placed")
    if vm.placement == target:
        raise MigrationRejected("same_host", f"VM {vm_id} already runs on {target}")
    if state.migrating(vm_id) is not None:
        raise MigrationRejected("already_migrating", f"VM {vm_id} is already migrating")
    pm = state.pm(target)
    cpu, mem = state.committed_load()[target]
    if (cpu + vm.cpu_demand > pm.cpu_capacity + CAPACITY_TOL
            or mem + vm.mem_demand > pm.mem_capacity + CAPACITY_TOL):
        raise MigrationRejected("insufficient_capacity", f"PM {target} cannot host VM {vm_id}")
    if vm.group is not None:
        domains = [state.pm(v.placement).fault_domain for v in state.vms.values()
                   if v.group == vm.group and v.id != vm_id and v.placement is not None]
        if pm.fault_domain in domains:
            raise MigrationRejected("constraint_violation",
                                    f"moving VM {vm_id} to {target} breaks anti-affinity")
    job = MigrationJob(
        vm=vm_id, source=vm.placement, target=target, phase=PREPARATION,
        bytes_remaining=float(vm.mem_footprint), started_at=state.time,
        downtime_steps_remaining=cfg.switchover_steps,
        preparation_remaining=cfg.preparation_steps,
    )
    state.migrations.append(job)
    return job


def _advance_one(state: ClusterState, job: MigrationJob, cfg: SimConfig, events: list) -> None:
    def enter(phase):
        job.phase = phase
        events.append(SimEvent(state.time, MIGRATION_PHASE_CHANGED, {"vm": job.vm, "phase": phase}))

    # phases with no remaining work fall through within the same step
    while True:
        if job.phase == PREPARATION:
            if job.preparation_remaining == 0:
                enter(TRANSFER)
                continue
            job.preparation_remaining -= 1
            if job.preparation_remaining == 0:
                enter(TRANSFER)
            return
        if job.phase == TRANSFER:
            if job.bytes_remaining <= 0:
                job.bytes_remaining = 0.0
                enter(SWITCHOVER)
                continue
            job.bytes_remaining = max(0.0, job.bytes_remaining - cfg.migration_bandwidth)
            if job.bytes_remaining == 0:
                enter(SWITCHOVER)
            return
        if job.phase == SWITCHOVER:
            state.down_vms.add(job.vm)
            job.downtime_steps_remaining -= 1
            if job.downtime_steps_remaining == 0:
                state.vms[job.vm].placement = job.target
                job.phase = DONE
                events.append(SimEvent(state.time, MIGRATION_COMPLETED, {
                    "vm": job.vm, "source": job.source, "target": job.target,
                    "started_at": job.started_at, "duration": state.time - job.started_at + 1,
                }))
            return
        return


def advance_migrations(state: ClusterState, cfg: SimConfig) -> list[SimEvent]:
    """Advance every in-flight job by one step; finished jobs leave ``state.migrations``."""
    events: list[SimEvent] = []
    state.down_vms = set()
    for job in state.migrations:
        _advance_one(state, job, cfg, events)
    state.migrations = [job for job in state.migrations if job.phase != DONE]
    return events


def migration_duration(footprint: float, bandwidth: float, prep: int, switch: int) -> int:
    """Closed-form step count of one migration."""
    transfer = math.ceil(footprint / bandwidth)
    # a tiny positive footprint can underflow the quotient to 0 but still takes a step
    if footprint > 0:
        transfer = max(1, transfer)
    return prep + transfer + switch


def admit_request(state: ClusterState, req: UserRequest, placement: dict | None) -> SimEvent:
    """Admit ``req`` with ``placement`` (VM id -> PM id) or defer it when ``placement`` is None."""
    if placement is None:
        if not any(r.id == req.id for r in state.pending_requests):
            state.pending_requests.append(req)
        return SimEvent(state.time, REQUEST_DEFERRED, {"request": req.id})
    vm_ids = {vm.id for vm in req.vms}
    if set(placement) != vm_ids:
        raise ConstraintViolation(f"request {req.id}: placement must cover exactly its VMs")
    if any(v in state.vms for v in vm_ids):
        raise ConstraintViolation(f"request {req.id}: VM ids already present in the cluster")
    try:
        ok = check_hard(state, placement, req.hard, req.vms)
    except UnknownIdError as e:
        raise ConstraintViolation(str(e)) from None
    if not ok:
        raise ConstraintViolation(f"request {req.id}: placement violates capacity or anti-affinity")
    for spec in req.vms:
        vm = VirtualMachine(**{**asdict(spec), "placement": placement[spec.id]})
        state.add_vm(vm)
    state.pending_requests = [r for r in state.pending_requests if r.id != req.id]
    state.active_requests[req.id] = (req, state.time + req.duration)
    return SimEvent(state.time, REQUEST_ADMITTED, {"request": req.id, "placement": dict(placement)})


def waiting_requests(state: ClusterState, trace=None) -> list[UserRequest]:
    """Requests awaiting a decision this step: the FIFO queue, then new arrivals."""
    new = trace.arrivals_at(state.time) if trace is not None else []
    return list(state.pending_requests) + list(new)


def _apply_demands(state: ClusterState, trace) -> None:
    if trace is None:
        return
    records = trace.records_at(state.time)
    if not records:
        return
    load = state.committed_load()
    for rec in records:
        vm = state.vms.get(rec.vm_id)
        if vm is None:
            continue
        hosts = [vm.placement] if vm.placement is not None else []
        job = state.migrating(vm.id)
        if job is not None:
            hosts.append(job.target)
        cpu, mem = rec.cpu, rec.mem
        # throttle to the tightest host so committed load never exceeds capacity
        for h in hosts:
            pm = state.pm(h)
            cpu = min(cpu, max(0.0, pm.cpu_capacity - (load[h][0] - vm.cpu_demand)))
            mem = min(mem, max(0.0, pm.mem_capacity - (load[h][1] - vm.mem_demand)))
        for h in hosts:
            load[h][0] += cpu - vm.cpu_demand
            load[h][1] += mem - vm.mem_demand
        vm.cpu_demand, vm.mem_demand = cpu, mem
        vm.storage_io, vm.net_io = rec.storage_io, rec.net_io


def _complete_requests(state: ClusterState) -> list[SimEvent]:
    events = []
    for rid in list(state.active_requests):
        req, end = state.active_requests[rid]
        if state.time < end:
            continue
        vm_ids = {vm.id for vm in req.vms}
        cancelled = [job.vm for job in state.migrations if job.vm in vm_ids]
        state.migrations = [job for job in state.migrations if job.vm not in vm_ids]
        for v in vm_ids:
            state.vms.pop(v, None)
        del state.active_requests[rid]
        events.append(SimEvent(state.time, REQUEST_COMPLETED,
                               {"request": rid, "cancelled_migrations": cancelled}))
    return events


def active_soft_penalty(state: ClusterState) -> float:
    total = 0.0
    for req, _ in state.active_requests.values():
        if not req.soft:
            continue
        assignment = {vm.id: state.vms[vm.id].placement for vm in req.vms if vm.id in state.vms}
        total += soft_penalty(state, assignment, req.soft)
    return total


def compute_metrics(state: ClusterState, cfg: SimConfig, power: PowerModel, downtime: int) -> StepMetrics:
    watts = per_pm_power(state, power)
    util = pm_utilizations(state)
    total = float(sum(watts.values()))
    on = [util[pm.id] for pm in state.pms if watts[pm.id] > 0 or not power.power_off_empty]
    mean_on = sum(on) / len(on) if on else 0.0
    all_u = [util[pm.id] for pm in state.pms]
    mean_all = sum(all_u) / len(all_u) if all_u else 0.0
    std = math.sqrt(sum((u - mean_all) ** 2 for u in all_u) / len(all_u)) if all_u else 0.0
    return StepMetrics(
        time=state.time,
        total_power=total,
        energy_joules=total * cfg.step_seconds,
        cpu_utilization=mean_on,
        migrations_active=len(state.migrations),
        downtime_steps=downtime,
        deferred_requests=len(state.pending_requests),
        soft_penalty_total=active_soft_penalty(state),
        load_imbalance=std,
        peak_energy_joules=sum(pm.power_peak for pm in state.pms) * cfg.step_seconds,
    )


def _reject(state, action, reason, message):
    return SimEvent(state.time, ACTION_REJECTED, {
        "action": type(action).__name__, "reason": reason, "message": message})


def step(state: ClusterState, cfg: SimConfig, actions=(), trace=None,
         power: PowerModel | None = None) -> tuple[StepMetrics, list[SimEvent]]:
    """Advance the cluster by one step; ``state`` is updated in place.

    Order: demand updates, arrivals and admission actions, migration starts,
    migration progress, request completion, metrics, clock.
    """
    power = power or PowerModel(power_off_empty=cfg.power_off_empty)
    events: list[SimEvent] = []

    _apply_demands(state, trace)

    arrivals = trace.arrivals_at(state.time) if trace is not None else []
    for req in arrivals:
        events.append(SimEvent(state.time, REQUEST_ARRIVED, {"request": req.id}))
    waiting = {r.id: r for r in state.pending_requests}
    for r in arrivals:
        waiting.setdefault(r.id, r)
    handled = set()
    for action in actions:
        if isinstance(action, (Place, Defer)):
            req = waiting.get(action.request)
            if req is None or action.request in handled:
                events.append(_reject(state, action, "unknown_request",
                                      f"request {action.request} is not waiting"))
                continue
            try:
                events.append(admit_request(state, req, action.placement if isinstance(action, Place) else None))
                handled.add(req.id)
            except ConstraintViolation as e:
                events.append(_reject(state, action, "constraint_violation", str(e)))
    for req in arrivals:
        if req.id not in handled:
            events.append(admit_request(state, req, None))

    for action in actions:
        if isinstance(action, Migrate):
            try:
                job = start_migration(state, action.vm, action.target, cfg)
                events.append(SimEvent(state.time, MIGRATION_STARTED,
                                       {"vm": job.vm, "source": job.source, "target": job.target}))
            except MigrationRejected as e:
                events.append(_reject(state, action, e.reason, str(e)))
            except UnknownIdError as e:
                events.append(_reject(state, action, "unknown_id", str(e)))

    events.extend(advance_migrations(state, cfg))
    downtime = len(state.down_vms)
    events.extend(_complete_requests(state))
    state.down_vms &= set(state.vms)

    metrics = compute_metrics(state, cfg, power, downtime)
    state.time += 1
    return metrics, events


class Simulation:
    """One simulation instance: initial cluster, config, optional trace and power model."""

    def __init__(self, pms: list[PhysicalMachine], cfg: SimConfig, vms=(), trace=None,
                 power: PowerModel | None = None):
        self.pms = list(pms)
        self.cfg = cfg
        self.initial_vms = [VirtualMachine(**asdict(v)) for v in vms]
        self.trace = trace
        self.power = power or PowerModel(power_off_empty=cfg.power_off_empty)
        self.reset()

    def reset(self) -> ClusterState:
        kw = {}
        if self.trace is not None:
            kw = {"max_storage_io": self.trace.meta.max_storage_io or 1.0,
                  "max_net_io": self.trace.meta.max_net_io or 1.0}
        self.state = ClusterState(self.pms, [VirtualMachine(**asdict(v)) for v in self.initial_vms], **kw)
        if not self.state.capacity_ok():
            raise ValueError("initial placement exceeds PM capacity")
        return self.state

    @property
    def done(self) -> bool:
        return self.state.time >= self.cfg.horizon

    def waiting(self) -> list[UserRequest]:
        return waiting_requests(self.state, self.trace)

    def step(self, actions=()):
        return step(self.state, self.cfg, actions, self.trace, self.power)
