"""Deterministic datacenter simulator with learned and heuristic placement/migration policies."""

from .domain import (
    AntiAffinity,
    ClusterState,
    CoLocation,
    FeatureVector,
    PhysicalMachine,
    Proximity,
    UserRequest,
    VirtualMachine,
    check_hard,
    featurize,
    soft_penalty,
)
from .simkernel import SimConfig, Simulation, StepMetrics

__version__ = "0.1.0"
