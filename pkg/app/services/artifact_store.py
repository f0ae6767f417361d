"""Artifact storage for scenario reports and tables."""

import csv
import io
import json
import math
import shutil
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from app.config import Settings


def _plain(value):
    """JSON-ready copy: models dumped, numpy scalars unwrapped, non-finite floats as None."""
    if isinstance(value, BaseModel):
        return _plain(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, float | np.floating):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "value") and isinstance(value.value, str):
        return value.value
    return value


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return str(value)


class ArtifactStore:
    """Writes deterministic JSON and CSV artifacts under ``<base_dir>/<scenario>/``."""

    def __init__(self, base_dir: str | None = None):
        """
        Initialize the artifact store.

        Args:
            base_dir: Base directory for artifacts. Defaults to ``RIEMEXT_OUTPUT_DIR``
                (or ``./artifacts``), read when the store is created
        """
        self.base_dir = Path(base_dir or Settings().output_dir)
        self._ensure_base_dir()

    def _ensure_base_dir(self) -> None:
        self.base_dir.mkdir(parents=True, exist_ok=True)

    def scenario_dir(self, scenario: str) -> Path:
        """Get or create the directory for one scenario's artifacts."""
        path = self.base_dir / scenario
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_json(self, scenario: str, name: str, payload) -> Path:
        """
        Write a JSON artifact with sorted keys and two-space indentation.

        Args:
            scenario: Scenario name (directory)
            name: File name, e.g. ``factor.json``
            payload: Pydantic model, dict or list

        Returns:
            Path of the written file
        """
        path = self.scenario_dir(scenario) / name
        text = json.dumps(_plain(payload), sort_keys=True, indent=2, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    def write_csv(self, scenario: str, name: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
        """
        Write a CSV table with a fixed column order; floats use ``repr``.

        Returns:
            Path of the written file
        """
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"{name}: row has {len(row)} cells, expected {len(columns)}")
            writer.writerow([_cell(v) for v in row])
        path = self.scenario_dir(scenario) / name
        path.write_text(buffer.getvalue(), encoding="utf-8")
        return path

    def read_artifact(self, scenario: str, name: str) -> bytes | None:
        """Artifact content, or None if it was never written."""
        path = self.base_dir / scenario / name
        if path.exists():
            return path.read_bytes()
        return None

    def delete_scenario_artifacts(self, scenario: str) -> bool:
        """
        Delete every artifact of a scenario.

        Returns:
            True if the directory was deleted, False if it did not exist
        """
        path = self.base_dir / scenario
        if path.exists():
            shutil.rmtree(path)
            return True
        return False
