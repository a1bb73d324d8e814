"""Fixed-dimension scenarios the DQN agent trains on."""

from __future__ import annotations

from dataclasses import dataclass, field

from .domain import PhysicalMachine, VirtualMachine
from .simkernel import SimConfig
from .traceio import SynthConfig, WorkloadTrace, generate_synthetic, synthetic_vm_ids


@dataclass
class RewardConfig:
    w_util: float = 1.0
    w_energy: float = 0.5
    w_balance: float = 0.0
    w_migration: float = 0.1
    w_soft: float = 0.0
    shaping_bonus: float = 0.0
    soft_scale: float = 1.0

    def __post_init__(self):
        weights = (self.w_util, self.w_energy, self.w_balance, self.w_migration, self.w_soft,
                   self.shaping_bonus)
        if any(w < 0 for w in weights):
            raise ValueError("reward weights must be nonnegative")
        if not any(w > 0 for w in weights[:5]):
            raise ValueError("at least one reward weight must be positive")
        if self.soft_scale <= 0:
            raise ValueError("soft_scale must be positive")


@dataclass
class Scenario:
    """Cluster, workload and action layout for one experiment.

    ``vm_slots`` fixes how many VMs the state vector and action enumeration
    cover; ``request_slots`` how many waiting requests are visible.
    """

    pms: list[PhysicalMachine]
    sim: SimConfig
    vms: list[VirtualMachine] = field(default_factory=list)
    trace: WorkloadTrace | None = None
    vm_slots: int | None = None
    request_slots: int = 0
    max_pending: int = 10
    reward: RewardConfig = field(default_factory=RewardConfig)
    name: str = "custom"

    def __post_init__(self):
        if self.vm_slots is None:
            self.vm_slots = len(self.vms)
        if self.vm_slots < len(self.vms):
            raise ValueError("vm_slots smaller than the initial VM count")


def toy_consolidation(horizon: int = 20) -> Scenario:
    """2 PMs, 3 constant-demand VMs split 2/1, migration-only.

    Consolidating the lone VM lets the second PM power off.
    """
    pms = [PhysicalMachine(f"pm{k}", 1.0, 4096.0, 100.0, 200.0, fault_domain=k, location=(float(k), 0.0))
           for k in range(2)]
    vms = [VirtualMachine(f"vm{k}", 0.3, 1024.0, mem_footprint=1024.0, placement=p)
           for k, p in enumerate(["pm0", "pm0", "pm1"])]
    sim = SimConfig(step_seconds=300.0, migration_bandwidth=1024.0, preparation_steps=0,
                    switchover_steps=1, horizon=horizon, power_off_empty=True)
    return Scenario(pms, sim, vms, reward=RewardConfig(w_util=1.0, w_energy=0.5, w_migration=0.1),
                    name="toy_consolidation")


def synthetic_consolidation(seed: int = 0, horizon: int = 24, num_pms: int = 4, num_vms: int = 12) -> Scenario:
    """4 PMs with 12 sinusoidal-demand VMs spread round-robin; migration-only."""
    pms = [PhysicalMachine(f"pm{k}", 1.0, 8192.0, 100.0, 200.0, fault_domain=k,
                           location=(float(k % 2), float(k // 2))) for k in range(num_pms)]
    synth = SynthConfig(num_vms=num_vms, horizon=horizon, base=0.15, amplitude=0.05, period=24,
                        noise_sigma=0.01, seed=seed, mem=1024.0)
    trace = generate_synthetic(synth)
    first = {r.vm_id: r for r in trace.records_at(0)}
    vms = [VirtualMachine(vm_id, first[vm_id].cpu, 1024.0, mem_footprint=1024.0,
                          placement=pms[k % num_pms].id)
           for k, vm_id in enumerate(synthetic_vm_ids(num_vms))]
    sim = SimConfig(step_seconds=300.0, migration_bandwidth=1024.0, preparation_steps=0,
                    switchover_steps=1, horizon=horizon, power_off_empty=True, seed=seed)
    return Scenario(pms, sim, vms, trace=trace,
                    reward=RewardConfig(w_util=1.0, w_energy=1.0, w_migration=0.0),
                    name="synthetic_consolidation")
