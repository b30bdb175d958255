"""Deterministic simulation of clients, service providers and the server."""

from .engine import EventLoop, split_rng, to_us
from .report import report_from_trace
from .scenario import Scenario, ScenarioError, load_scenario, load_text
from .world import InvariantViolation, World, run_scenario

__all__ = ["EventLoop", "InvariantViolation", "Scenario", "ScenarioError", "World", "load_scenario", "load_text",
           "report_from_trace", "run_scenario", "split_rng", "to_us"]
