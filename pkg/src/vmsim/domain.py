"""Core datacenter types, placement constraints and per-decision featurization.

PMs are ordered by their position in ``ClusterState.pms``; that order is the
"id order" every deterministic scan and tie-break in the package uses.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

CLAMP_TOL = 1e-9
CAPACITY_TOL = 1e-9


class UnknownIdError(KeyError):
    """Raised when a VM or PM identifier is not present in the cluster."""


@dataclass(frozen=True)
class PhysicalMachine:
    id: str
    cpu_capacity: float
    mem_capacity: float
    power_idle: float
    power_peak: float
    fault_domain: int = 0
    location: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.cpu_capacity > 0 and self.mem_capacity > 0):
            raise ValueError(f"PM {self.id}: capacities must be positive")
        if not (0 <= self.power_idle <= self.power_peak):
            raise ValueError(f"PM {self.id}: need 0 <= power_idle <= power_peak")


@dataclass
class VirtualMachine:
    id: str
    cpu_demand: float
    mem_demand: float
    storage_io: float = 0.0
    net_io: float = 0.0
    mem_footprint: float = 0.0
    placement: str | None = None
    group: str | None = None

    def __post_init__(self):
        for name in ("cpu_demand", "mem_demand", "storage_io", "net_io", "mem_footprint"):
            if getattr(self, name) < 0:
                raise ValueError(f"VM {self.id}: {name} must be nonnegative")


@dataclass(frozen=True)
class FeatureVector:
    vm_cpu: float
    vm_mem: float
    vm_storage_io: float
    vm_net_io: float
    pm_cpu_remaining: float
    pm_mem_remaining: float
    pm_power: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.vm_cpu, self.vm_mem, self.vm_storage_io, self.vm_net_io,
                self.pm_cpu_remaining, self.pm_mem_remaining, self.pm_power)


@dataclass(frozen=True)
class AntiAffinity:
    """Every VM of ``group`` must sit in a distinct fault domain."""

    group: str


@dataclass(frozen=True)
class Proximity:
    """Penalizes distance between each assigned VM's host and ``origin``."""

    weight: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("soft constraint weight must be nonnegative")


@dataclass(frozen=True)
class CoLocation:
    """Penalizes pairwise host distance among members of ``group``.

    With ``group=None`` the constraint covers every VM in the assignment.
    """

    weight: float
    group: str | None = None

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("soft constraint weight must be nonnegative")


HardConstraint = AntiAffinity
SoftConstraint = Proximity | CoLocation


@dataclass
class UserRequest:
    id: str
    arrival_time: int
    vms: list[VirtualMachine]
    duration: int
    hard: list[AntiAffinity] = field(default_factory=list)
    soft: list[SoftConstraint] = field(default_factory=list)
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError(f"request {self.id}: duration must be >= 1")
        if not self.vms:
            raise ValueError(f"request {self.id}: needs at least one VM")


@dataclass
class ClusterState:
    pms: list[PhysicalMachine]
    vms: dict[str, VirtualMachine] = field(default_factory=dict)
    time: int = 0
    migrations: list = field(default_factory=list)
    pending_requests: list[UserRequest] = field(default_factory=list)
    max_storage_io: float = 1.0
    max_net_io: float = 1.0
    active_requests: dict = field(default_factory=dict)
    down_vms: set = field(default_factory=set)

    def __post_init__(self):
        self.pm_index = {pm.id: i for i, pm in enumerate(self.pms)}
        if len(self.pm_index) != len(self.pms):
            raise ValueError("duplicate PM ids")
        if not isinstance(self.vms, dict):
            self.vms = {vm.id: vm for vm in self.vms}

    def pm(self, pm_id: str) -> PhysicalMachine:
        try:
            return self.pms[self.pm_index[pm_id]]
        except KeyError:
            raise UnknownIdError(f"unknown PM id {pm_id!r}") from None

    def vm(self, vm_id: str) -> VirtualMachine:
        try:
            return self.vms[vm_id]
        except KeyError:
            raise UnknownIdError(f"unknown VM id {vm_id!r}") from None

    def add_vm(self, vm: VirtualMachine) -> None:
        if vm.id in self.vms:
            raise ValueError(f"duplicate VM id {vm.id!r}")
        self.vms[vm.id] = vm

    def remove_vm(self, vm_id: str) -> VirtualMachine:
        return self.vms.pop(vm_id)

    def copy(self) -> ClusterState:
        return copy.deepcopy(self)

    def migrating(self, vm_id: str):
        for job in self.migrations:
            if job.vm == vm_id:
                return job
        return None

    def committed_load(self) -> dict[str, list[float]]:
        """Per-PM [cpu, mem] committed to placed VMs plus migration reservations."""
        load = {pm.id: [0.0, 0.0] for pm in self.pms}
        for vm in self.vms.values():
            if vm.placement is not None:
                slot = load[vm.placement]
                slot[0] += vm.cpu_demand
                slot[1] += vm.mem_demand
        for job in self.migrations:
            vm = self.vms.get(job.vm)
            if vm is not None:
                slot = load[job.target]
                slot[0] += vm.cpu_demand
                slot[1] += vm.mem_demand
        return load

    def serving_load(self) -> dict[str, float]:
        """Per-PM cpu demand actually served (VMs in switchover serve nothing)."""
        load = {pm.id: 0.0 for pm in self.pms}
        for vm in self.vms.values():
            if vm.placement is not None and vm.id not in self.down_vms:
                load[vm.placement] += vm.cpu_demand
        return load

    def hosted_counts(self) -> dict[str, int]:
        counts = {pm.id: 0 for pm in self.pms}
        for vm in self.vms.values():
            if vm.placement is not None:
                counts[vm.placement] += 1
        return counts

    def capacity_ok(self, tol: float = CAPACITY_TOL) -> bool:
        load = self.committed_load()
        return all(load[pm.id][0] <= pm.cpu_capacity + tol and
                   load[pm.id][1] <= pm.mem_capacity + tol for pm in self.pms)


def _clamp01(x: float) -> float:
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


def featurize(state: ClusterState, vm_id: str, pm_id: str, power=None) -> FeatureVector:
    """Seven per-decision features for placing or keeping ``vm_id`` on ``pm_id``.

    The VM ratios are taken against its host when placed, otherwise against the
    candidate PM. ``power`` maps (pm, utilization) to watts; it defaults to the
    linear energy-proportional model.
    """
    from .energymodel import linear_power

    vm = state.vm(vm_id)
    candidate = state.pm(pm_id)
    host = state.pm(vm.placement) if vm.placement is not None else candidate

    load = state.committed_load()[candidate.id]
    serving = state.serving_load()[candidate.id]
    util = _clamp01(serving / candidate.cpu_capacity)
    watts = (power or linear_power)(candidate, util)
    pm_power = watts / candidate.power_peak if candidate.power_peak > 0 else 0.0

    return FeatureVector(
        vm_cpu=_clamp01(vm.cpu_demand / host.cpu_capacity),
        vm_mem=_clamp01(vm.mem_demand / host.mem_capacity),
        vm_storage_io=_clamp01(vm.storage_io / state.max_storage_io) if state.max_storage_io > 0 else 0.0,
        vm_net_io=_clamp01(vm.net_io / state.max_net_io) if state.max_net_io > 0 else 0.0,
        pm_cpu_remaining=_clamp01(1.0 - load[0] / candidate.cpu_capacity),
        pm_mem_remaining=_clamp01(1.0 - load[1] / candidate.mem_capacity),
        pm_power=pm_power,
    )


def _lookup_vm(state: ClusterState, vm_id: str, extra: Mapping[str, VirtualMachine]):
    if vm_id in extra:
        return extra[vm_id]
    return state.vm(vm_id)


def _post_assignment_hosts(state, assignment, extra):
    hosts = {vm.id: vm.placement for vm in state.vms.values() if vm.placement is not None}
    for vm_id, pm_id in assignment.items():
        hosts[vm_id] = pm_id
    members = dict(state.vms)
    members.update(extra)
    return hosts, members


def check_hard(state: ClusterState, assignment: Mapping[str, str],
               constraints: Iterable[AntiAffinity], vms: Iterable[VirtualMachine] = ()) -> bool:
    """True iff capacity holds after the assignment and every anti-affinity
    group spans pairwise-distinct fault domains.

    ``vms`` supplies specs for VMs not yet in the cluster (a pending request).
    """
    extra = {vm.id: vm for vm in vms}
    load = state.committed_load()
    for vm_id, pm_id in assignment.items():
        vm = _lookup_vm(state, vm_id, extra)
        state.pm(pm_id)
        if vm_id in state.vms and vm.placement is not None:
            load[vm.placement][0] -= vm.cpu_demand
            load[vm.placement][1] -= vm.mem_demand
        load[pm_id][0] += vm.cpu_demand
        load[pm_id][1] += vm.mem_demand
    for pm in state.pms:
        cpu, mem = load[pm.id]
        if cpu > pm.cpu_capacity + CAPACITY_TOL or mem > pm.mem_capacity + CAPACITY_TOL:
            return False

    hosts, members = _post_assignment_hosts(state, assignment, extra)
    for c in constraints:
        domains = [state.pm(hosts[v.id]).fault_domain
                   for v in members.values() if v.group == c.group and v.id in hosts]
        if len(domains) != len(set(domains)):
            return False
    return True


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def soft_penalty(state: ClusterState, assignment: Mapping[str, str],
                 constraints: Iterable[SoftConstraint], vms: Iterable[VirtualMachine] = ()) -> float:
    extra = {vm.id: vm for vm in vms}
    hosts, members = _post_assignment_hosts(state, assignment, extra)
    total = 0.0
    for c in constraints:
        if c.weight == 0:
            continue
        if isinstance(c, Proximity):
            total += c.weight * sum(_dist(state.pm(pm_id).location, c.origin)
                                    for pm_id in assignment.values())
        else:
            if c.group is None:
                group_hosts = [assignment[v] for v in sorted(assignment)]
            else:
                group_hosts = [hosts[v.id] for v in members.values()
                               if v.group == c.group and v.id in hosts]
            locs = [state.pm(p).location for p in group_hosts]
            total += c.weight * sum(_dist(locs[i], locs[j])
                                    for i in range(len(locs)) for j in range(i + 1, len(locs)))
    return total
