"""Scenario pipeline: catalog, stage tracking and the sequential workflow."""

from app.pipeline.scenarios import get_scenario, list_scenarios
from app.pipeline.stage_tracker import StageStatus, StageTracker
from app.pipeline.workflow import ScenarioWorkflow, run_scenario

__all__ = [
    "ScenarioWorkflow",
    "StageStatus",
    "StageTracker",
    "get_scenario",
    "list_scenarios",
    "run_scenario",
]
