"""Stage tracking for pipeline runs."""

import logging
import time
from enum import Enum

from app.schemas import ALL_STAGES, Stage, StageRecord

logger = logging.getLogger(__name__)


class StageStatus(str, Enum):
    """Status of one pipeline stage."""

    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    PARTIAL_SUCCESS = "partial_success"
    FAILED = "failed"
    SKIPPED = "skipped"


FINISHED = (StageStatus.COMPLETED, StageStatus.PARTIAL_SUCCESS, StageStatus.FAILED, StageStatus.SKIPPED)


class StageTracker:
    """
    Records the status and result of every stage of one scenario run.

    Wall-clock durations go to the log only; the records themselves stay
    deterministic so that ``stages.json`` is byte-identical across runs.
    """

    def __init__(self, scenario: str):
        self.scenario = scenario
        self.current_stage: str | None = None
        self._status: dict[str, StageStatus] = {s.value: StageStatus.PENDING for s in ALL_STAGES}
        self._results: dict[str, dict | None] = {s.value: None for s in ALL_STAGES}
        self._started: dict[str, float] = {}

    def update_stage(self, stage_name: str | Stage, status: str | StageStatus, result: dict | None = None) -> dict:
        """
        Update a stage's status and optionally its result.

        Valid stage names (in order): glue, extend, complete, certify, geodesy.
        Valid statuses: pending, in_progress, completed, partial_success, failed, skipped.

        Returns:
            Dictionary with ``success`` and either the new state or an ``error``
        """
        name = stage_name.value if isinstance(stage_name, Stage) else stage_name
        if name not in self._status:
            return {
                "success": False,
                "error": f"Invalid stage name: {name}. Valid stages: {list(self._status)}",
            }
        try:
            new_status = StageStatus(status)
        except ValueError:
            return {
                "success": False,
                "error": f"Invalid status: {status}. Valid statuses: {[s.value for s in StageStatus]}",
            }

        self._status[name] = new_status
        if result is not None:
            self._results[name] = result
        if new_status == StageStatus.IN_PROGRESS:
            self._started[name] = time.perf_counter()
            self.current_stage = name
            logger.info(f"▶️ [{self.scenario}] {name}")
        elif new_status in FINISHED and name in self._started:
            elapsed = time.perf_counter() - self._started.pop(name)
            logger.info(f"⏹️ [{self.scenario}] {name}: {new_status.value} ({elapsed:.2f}s)")
        return {"success": True, "stage_name": name, "status": new_status.value, "scenario": self.scenario}

    def status(self, stage: str | Stage) -> StageStatus:
        return self._status[stage.value if isinstance(stage, Stage) else stage]

    def records(self) -> list[StageRecord]:
        return [
            StageRecord(stage=name, status=status.value, result=self._results[name])
            for name, status in self._status.items()
        ]
