"""Discrete-event simulation of a lightmesh deployment."""
from .engine import EventQueue, InvariantViolation, Simulator
from .report import merge_rows, nodes_csv, report_json, summary_text, sweep_row
from .scenario import InvalidFault, Scenario, ScenarioError, bundled, load_scenario, load_scenario_file


def run(scenario: Scenario, seed: int | None = None, trace=None) -> dict:
    """Simulate ``scenario`` and return its report dictionary."""
    return Simulator(scenario, seed=seed, trace=trace).run()


__all__ = [
    "EventQueue", "InvalidFault", "InvariantViolation", "Scenario", "ScenarioError", "Simulator",
    "bundled", "load_scenario", "load_scenario_file", "merge_rows", "nodes_csv", "report_json", "run",
    "summary_text", "sweep_row",
]
