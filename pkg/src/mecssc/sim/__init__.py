"""Discrete-event fabric and declarative scenarios."""

from .analysis import GapStats, check_conservation, measure_gap, measure_rtt
from .core import Link, SimEvent, Simulator, Trace
from .scenario import (Network, Scenario, ScenarioError, ScenarioResult, load_scenario,
                       parse_scenario, run_scenario, write_artifacts)

__all__ = ["GapStats", "Link", "Network", "Scenario", "ScenarioError", "ScenarioResult",
           "SimEvent", "Simulator", "Trace", "check_conservation", "load_scenario",
           "measure_gap", "measure_rtt", "parse_scenario", "run_scenario", "write_artifacts"]
