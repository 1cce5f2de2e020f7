"""Agent-based simulation on top of the ledger."""

from .config import AgentStrategy, ConfigError, SimConfig, TaskStream, load_scenario, rng_for
from .scenario import InvariantBreach, Metrics, Simulation, run_scenario

__all__ = ["AgentStrategy", "ConfigError", "SimConfig", "TaskStream", "load_scenario", "rng_for",
           "InvariantBreach", "Metrics", "Simulation", "run_scenario"]
