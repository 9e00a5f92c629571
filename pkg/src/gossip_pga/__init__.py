"""Gossip-PGA - decentralized SGD with periodic global averaging."""

__version__ = "0.1.0"

from .config import ConfigManager
from .engine import WorkerState, run, step
from .models import ExperimentConfig, RunConfig, RunnerSettings, Variant
from .runner import ExperimentRunner, emit_theory_tables, run_experiment
from .topology import Topology, TopologyKind, beta, build_topology, mixing_constants

__all__ = [
    "ConfigManager",
    "ExperimentConfig",
    "ExperimentRunner",
    "RunConfig",
    "RunnerSettings",
    "Topology",
    "TopologyKind",
    "Variant",
    "WorkerState",
    "beta",
    "build_topology",
    "emit_theory_tables",
    "mixing_constants",
    "run",
    "run_experiment",
    "step",
]
