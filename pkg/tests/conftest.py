import pytest

from vmsim.domain import ClusterState, PhysicalMachine, VirtualMachine


def make_pm(name, cpu=1.0, mem=4096.0, idle=100.0, peak=200.0, domain=0, loc=(0.0, 0.0)):
    return PhysicalMachine(name, cpu, mem, idle, peak, fault_domain=domain, location=loc)


def make_vm(name, cpu=0.25, mem=512.0, placement=None, group=None, footprint=1024.0):
    return VirtualMachine(name, cpu, mem, mem_footprint=footprint, placement=placement, group=group)


@pytest.fixture
def two_pm_state():
    pms = [make_pm("pm0", domain=0, loc=(0.0, 0.0)), make_pm("pm1", domain=1, loc=(3.0, 4.0))]
    return ClusterState(pms)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results, key=lambda c: int(c[1:])):
        terminalreporter.write_line(results[cid])
