"""Tests for the scenario catalog, stage tracking, artifact output and full runs."""

import json
import math

import pytest

from app.errors import EXIT_AUDIT_FAILURE, EXIT_NUMERIC_GUARD, EXIT_OK, SpecError
from app.pipeline import ScenarioWorkflow, StageStatus, StageTracker, get_scenario, list_scenarios, run_scenario
from app.schemas import Stage, Verdict
from app.services import ArtifactStore


def _coarse(name: str, **update):
    return get_scenario(name).model_copy(update=update)


def _read_json(store: ArtifactStore, scenario: str, name: str):
    return json.loads(store.read_artifact(scenario, name))


class TestCatalog:
    def test_lists_builtin_scenarios(self):
        names = [info.name for info in list_scenarios()]
        assert len(names) >= 6
        assert {"flat-double", "cusp-tail", "two-tail", "sphere-suite", "open-disk", "half-plane"} <= set(names)

    def test_filter(self):
        assert [info.name for info in list_scenarios("cusp")] == ["cusp-tail"]
        assert list_scenarios("no-such") == []

    def test_unknown_scenario(self):
        with pytest.raises(SpecError):
            get_scenario("no-such")

    def test_scenarios_validate(self):
        for info in list_scenarios():
            cfg = get_scenario(info.name)
            assert cfg.kind == info.kind
            assert (cfg.glue is not None) == (cfg.kind == "glue")


class TestStageTracker:
    def test_records_in_stage_order(self):
        tracker = StageTracker("demo")
        assert tracker.update_stage(Stage.EXTEND, StageStatus.IN_PROGRESS)["success"]
        assert tracker.update_stage("extend", "completed", {"collars": 1})["status"] == "completed"
        records = tracker.records()
        assert [r.stage for r in records] == ["glue", "extend", "complete", "certify", "geodesy"]
        assert records[1].result == {"collars": 1}
        assert tracker.status(Stage.GLUE) == StageStatus.PENDING
        assert tracker.current_stage == "extend"

    def test_rejects_unknown_names(self):
        tracker = StageTracker("demo")
        bad_stage = tracker.update_stage("polish", "completed")
        assert not bad_stage["success"]
        assert "Invalid stage name" in bad_stage["error"]
        bad_status = tracker.update_stage("glue", "done")
        assert not bad_status["success"]
        assert "Invalid status" in bad_status["error"]


class TestArtifactStore:
    def test_defaults_to_environment_directory(self, artifact_dir):
        assert ArtifactStore().base_dir == artifact_dir

    def test_json_is_sorted_and_finite(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        store.write_json("s", "r.json", {"b": math.nan, "a": [1.5, math.inf], "c": Verdict.COMPLETE})
        text = store.read_artifact("s", "r.json").decode()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [1.5, None], "b": None, "c": "complete-up-to-budget"}

    def test_csv_cells(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        store.write_csv("s", "t.csv", ["x", "y", "ok"], [(0.1, None, True), (2, 1e-9, False)])
        lines = store.read_artifact("s", "t.csv").decode().splitlines()
        assert lines == ["x,y,ok", "0.1,,true", "2,1e-09,false"]
        with pytest.raises(ValueError):
            store.write_csv("s", "t.csv", ["x"], [(1, 2)])

    def test_missing_and_delete(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        assert store.read_artifact("s", "none.json") is None
        assert not store.delete_scenario_artifacts("s")
        store.write_json("s", "a.json", {})
        assert store.delete_scenario_artifacts("s")


class TestRuns:
    def test_sphere_suite(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        summary = run_scenario(get_scenario("sphere-suite"), store)
        assert summary.exit_code == EXIT_OK
        assert summary.audits["constant_curvature"]
        assert summary.audits["geodesic_closed"]
        assert summary.audits["riccati"]
        statuses = {r.stage: r.status for r in summary.stages}
        assert statuses["geodesy"] == "completed"
        assert statuses["glue"] == "skipped"
        geodesy = _read_json(store, "sphere-suite", "geodesy.json")
        assert geodesy["riccati"]["positive-curvature"]["error"] <= 1e-6

    def test_runs_are_byte_identical(self, tmp_path):
        outputs = []
        for run in ("a", "b"):
            store = ArtifactStore(str(tmp_path / run))
            run_scenario(_coarse("half-plane", resolution=0.1), store)
            outputs.append(
                {p.name: p.read_bytes() for p in sorted((tmp_path / run / "half-plane").iterdir())}
            )
        assert outputs[0] == outputs[1]
        assert "completeness.json" in outputs[0]

    def test_open_disk_is_incomplete(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        summary = run_scenario(_coarse("open-disk", resolution=0.05), store)
        assert summary.exit_code == EXIT_OK
        report = _read_json(store, "open-disk", "completeness.json")["report"]
        assert report["verdict"] == Verdict.INCOMPLETE.value
        assert report["witness"]["length"] < 1.05

    def test_half_plane_is_complete(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        summary = run_scenario(_coarse("half-plane", resolution=0.1), store)
        assert summary.exit_code == EXIT_OK
        report = _read_json(store, "half-plane", "completeness.json")["report"]
        assert report["verdict"] == Verdict.COMPLETE.value
        assert report["growth_ok"]
        exhaustion = _read_json(store, "half-plane", "geodesy.json")["exhaustion"]
        assert summary.audits["exhaustion_proper"]
        assert summary.audits["cutoff_halving"]
        assert 0.45 <= exhaustion["cutoff_ratios"]["1->2"] <= 0.55

    def test_flat_double_keeps_factor_one(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        summary = run_scenario(_coarse("flat-double", resolution=0.1), store)
        assert summary.exit_code == EXIT_OK, summary.audits
        factor = _read_json(store, "flat-double", "factor.json")
        assert factor["bumps"] == []
        assert factor["max_factor"] == 1.0
        assert factor["factor_on_m"] == 0.0
        assert summary.audits["isometric_restriction"]

    def test_stage_selection(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        summary = run_scenario(_coarse("flat-double", resolution=0.1, stages=[Stage.GLUE]), store)
        assert summary.exit_code == EXIT_OK
        assert [r.status for r in summary.stages] == ["completed"] + ["skipped"] * 4
        assert store.read_artifact("flat-double", "atlas.json") is not None
        assert store.read_artifact("flat-double", "factor.json") is None


class TestCuspTail:
    @pytest.fixture(scope="class")
    def cusp_run(self, tmp_path_factory):
        store = ArtifactStore(str(tmp_path_factory.mktemp("cusp")))
        workflow = ScenarioWorkflow(get_scenario("cusp-tail"), store)
        return workflow, workflow.run(), store

    def test_cusp_tail_certificates(self, cusp_run):
        workflow, summary, _ = cusp_run
        assert summary.exit_code == EXIT_OK, summary.audits
        for j in range(6):
            values = [v for (level, _), v in workflow.conformal.q1.items() if level == j and math.isfinite(v)]
            assert values, j
            assert min(values) == pytest.approx(math.exp(-j) * (1.0 - math.exp(-1.0)), rel=0.05)

    def test_crossing_audit_after_deformation(self, cusp_run):
        _, summary, store = cusp_run
        crossing = _read_json(store, "cusp-tail", "completeness.json")["crossing"]
        assert summary.audits["crossing"]
        assert crossing["passed"]
        assert crossing["min_a"] >= 0.95
        assert crossing["min_b_ratio"] is None or crossing["min_b_ratio"] >= 0.95

    def test_divergent_length_grows_per_annulus(self, cusp_run):
        _, summary, store = cusp_run
        growth = _read_json(store, "cusp-tail", "completeness.json")["growth"]
        assert summary.audits["growth"]
        assert len(growth) >= 5
        assert min(growth[:5]) >= 0.95

    def test_negative_control_without_deformation(self, tmp_path):
        cfg = get_scenario("cusp-tail")
        cfg = cfg.model_copy(update={"stages": [s for s in cfg.stages if s != Stage.COMPLETE]})
        summary = run_scenario(cfg, ArtifactStore(str(tmp_path)))
        assert summary.exit_code == EXIT_AUDIT_FAILURE
        assert not summary.audits["crossing"]
        assert not summary.audits["completeness"]
        statuses = {r.stage: r.status for r in summary.stages}
        assert statuses["complete"] == "skipped"
        assert statuses["certify"] == "partial_success"


class TestFailures:
    def test_unmet_growth_fails_the_run(self, tmp_path):
        cfg = _coarse("flat-double", resolution=0.1, min_growth=100.0)
        summary = run_scenario(cfg, ArtifactStore(str(tmp_path)))
        assert summary.exit_code == EXIT_AUDIT_FAILURE
        assert not summary.audits["growth"]

    def _glue_with_metric(self, metric, stages):
        cfg = get_scenario("flat-double")
        m = cfg.glue.M.model_copy(deep=True)
        m.charts[0].metric = metric
        glue = cfg.glue.model_copy(update={"M": m})
        return cfg.model_copy(update={"glue": glue, "resolution": 0.1, "stages": stages})

    def test_indefinite_metric_fails_the_audit(self, tmp_path):
        cfg = self._glue_with_metric([["1 - x2^2", "0"], ["0", "1"]], [Stage.GLUE])
        summary = run_scenario(cfg, ArtifactStore(str(tmp_path)))
        assert summary.exit_code == EXIT_AUDIT_FAILURE
        assert not summary.audits["base_spd"]
        assert summary.stages[0].status == "partial_success"

    def test_domain_error_stops_the_run(self, tmp_path):
        cfg = self._glue_with_metric([["log(x2 - 100)", "0"], ["0", "1"]], [Stage.GLUE, Stage.EXTEND])
        store = ArtifactStore(str(tmp_path))
        summary = run_scenario(cfg, store)
        assert summary.exit_code == EXIT_NUMERIC_GUARD
        assert summary.stages[0].status == "failed"
        assert summary.error.startswith("[glue]")
        assert summary.stages[1].status == "pending"
        assert store.read_artifact("flat-double", "summary.json") is not None
