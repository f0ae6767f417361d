"""Tests for the command-line entry point."""

import json

import pytest

from app.errors import EXIT_NUMERIC_GUARD, EXIT_OK, EXIT_SPEC_ERROR, NumericGuardError, SpecError
from app.main import build_config, load_spec, main
from app.main import _build_parser as build_parser
from app.pipeline import get_scenario
from app.schemas import Stage


def test_list(capsys):
    assert main(["list"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "flat-double" in out
    assert "sphere-suite" in out


def test_list_filter(capsys):
    assert main(["list", "tail"]) == EXIT_OK
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines() if line.strip()]
    assert names == ["cusp-tail", "two-tail"]


def test_run_needs_a_source():
    assert main(["run"]) == EXIT_SPEC_ERROR


def test_unknown_scenario():
    assert main(["run", "--scenario", "no-such"]) == EXIT_SPEC_ERROR


def test_unreadable_spec(tmp_path):
    assert main(["run", "--spec", str(tmp_path / "missing.json")]) == EXIT_SPEC_ERROR
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["run", "--spec", str(bad)]) == EXIT_SPEC_ERROR


def test_bad_stage_name():
    assert main(["run", "--scenario", "sphere-suite", "--stages", "geodesy,polish"]) == EXIT_SPEC_ERROR


def test_load_spec_variants(tmp_path):
    cfg = get_scenario("flat-double")
    full = tmp_path / "full.json"
    full.write_text(cfg.model_dump_json())
    assert load_spec(str(full)).name == "flat-double"

    glue = tmp_path / "pair.json"
    glue.write_text(cfg.glue.model_dump_json())
    loaded = load_spec(str(glue))
    assert loaded.kind == "glue"
    assert loaded.name == "pair"

    manifold = tmp_path / "disk.json"
    manifold.write_text(get_scenario("open-disk").manifold.model_dump_json())
    loaded = load_spec(str(manifold))
    assert loaded.kind == "manifold"
    assert loaded.stages == [Stage.CERTIFY, Stage.GEODESY]

    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"charts": []}))
    with pytest.raises(SpecError):
        load_spec(str(broken))


def test_overrides(tmp_path):
    args = build_parser().parse_args(
        [
            "run", "--scenario", "open-disk", "--stages", "certify", "--resolution", "0.1",
            "--window", "0.5,0.9", "--epsilon", "0.5", "--seed", "7", "--out", str(tmp_path),
        ]
    )
    cfg = build_config(args)
    assert cfg.stages == [Stage.CERTIFY]
    assert cfg.resolution == 0.1
    assert cfg.windows == [0.5, 0.9]
    assert cfg.epsilon == 0.5
    assert cfg.seed == 7
    assert cfg.output_dir == str(tmp_path)


def test_invalid_override():
    args = build_parser().parse_args(["run", "--scenario", "open-disk", "--window", "0.9,0.5"])
    with pytest.raises(SpecError):
        build_config(args)


def test_run_writes_artifacts(tmp_path, capsys):
    code = main(["run", "--scenario", "half-plane", "--resolution", "0.1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "half-plane" / "summary.json").exists()
    assert "exit 0" in capsys.readouterr().out


def test_run_uses_environment_directory(artifact_dir):
    assert main(["run", "--scenario", "sphere-suite"]) == EXIT_OK
    summary = json.loads((artifact_dir / "sphere-suite" / "summary.json").read_text())
    assert summary["exit_code"] == EXIT_OK


def test_numeric_guard_exit_code(monkeypatch):
    def explode(cfg, store=None):
        raise NumericGuardError("metric blew up", stage="extend")

    monkeypatch.setattr("app.main.run_scenario", explode)
    assert main(["run", "--scenario", "flat-double"]) == EXIT_NUMERIC_GUARD
