"""Command-line entry point: ``riemext run`` and ``riemext list``."""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from app.errors import EXIT_OK, PipelineError, SpecError
from app.pipeline import get_scenario, list_scenarios, run_scenario
from app.schemas import GlueSpec, ManifoldSpec, RunSummary, ScenarioConfig, Stage
from app.services import ArtifactStore

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    if verbose:
        logging.getLogger("app.pipeline").setLevel(logging.DEBUG)


def load_spec(path: str) -> ScenarioConfig:
    """
    Read a scenario from a JSON file.

    The file may hold a full scenario (``name`` plus a ``glue`` or
    ``manifold`` block), a bare glue block (``M``/``Q``/``eta``) or a bare
    manifold description.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read spec {path!r}: {exc}") from exc
    if not isinstance(payload, dict):
        raise SpecError(f"spec {path!r} must hold a JSON object")

    name = Path(path).stem
    try:
        if "name" in payload and any(k in payload for k in ("glue", "manifold", "kind")):
            return ScenarioConfig.model_validate(payload)
        if "M" in payload:
            return ScenarioConfig(name=name, kind="glue", glue=GlueSpec.model_validate(payload))
        manifold = ManifoldSpec.model_validate(payload)
        return ScenarioConfig(name=name, kind="manifold", manifold=manifold, stages=[Stage.CERTIFY, Stage.GEODESY])
    except ValidationError as exc:
        raise SpecError(f"invalid spec {path!r}: {exc}") from exc


def _parse_stages(text: str) -> list[Stage]:
    try:
        return [Stage(s.strip()) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise SpecError(f"unknown stage in {text!r}; valid: {[s.value for s in Stage]}") from exc


def _parse_radii(text: str) -> list[float]:
    try:
        return [float(r) for r in text.split(",") if r.strip()]
    except ValueError as exc:
        raise SpecError(f"window radii must be numbers, got {text!r}") from exc


def build_config(args: argparse.Namespace) -> ScenarioConfig:
    """Scenario from ``--spec`` or ``--scenario`` with command-line overrides applied."""
    if args.spec:
        cfg = load_spec(args.spec)
    elif args.scenario:
        cfg = get_scenario(args.scenario)
    else:
        raise SpecError("either --spec or --scenario is required")

    update: dict = {}
    if args.stages:
        update["stages"] = _parse_stages(args.stages)
    if args.resolution is not None:
        update["resolution"] = args.resolution
    if args.window:
        update["windows"] = _parse_radii(args.window)
    if args.epsilon is not None:
        update["epsilon"] = args.epsilon
    if args.seed is not None:
        update["seed"] = args.seed
    if args.out:
        update["output_dir"] = args.out
    if not update:
        return cfg
    try:
        return ScenarioConfig.model_validate({**cfg.model_dump(), **update})
    except ValidationError as exc:
        raise SpecError(f"invalid override: {exc}") from exc


def run_pipeline(cfg: ScenarioConfig, store: ArtifactStore | None = None) -> RunSummary:
    """Run one scenario and return its summary (also written to ``summary.json``)."""
    return run_scenario(cfg, store)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riemext",
        description="Glue, extend and complete Riemannian manifolds with boundary on sampled meshes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario")
    run.add_argument("--spec", help="JSON scenario, glue block or manifold description")
    run.add_argument("--scenario", help="Catalog scenario name (see 'riemext list')")
    run.add_argument("--stages", help="Comma-separated stages, e.g. glue,extend,certify")
    run.add_argument("--resolution", type=float, help="Mesh step h")
    run.add_argument("--window", help="Comma-separated increasing window radii")
    run.add_argument("--epsilon", type=float, help="Lipschitz slack for the Fermi collars")
    run.add_argument("--seed", type=int, help="Seed for walks and audits")
    run.add_argument("--out", help="Artifact directory (overrides RIEMEXT_OUTPUT_DIR)")
    run.add_argument("-v", "--verbose", action="store_true", help="Debug logging for the pipeline")

    ls = sub.add_parser("list", help="List catalog scenarios")
    ls.add_argument("filter", nargs="?", help="Substring of the scenario name")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    configure_logging(getattr(args, "verbose", False))

    if args.command == "list":
        for info in list_scenarios(args.filter):
            print(f"{info.name:20s} {info.kind:9s} {info.description}")
        return EXIT_OK

    try:
        cfg = build_config(args)
        summary = run_pipeline(cfg)
    except PipelineError as exc:
        logger.error(f"💥 {exc}")
        return exc.exit_code

    for record in summary.stages:
        print(f"{record.stage:10s} {record.status}")
    failed = [name for name, ok in summary.audits.items() if not ok]
    if failed:
        print(f"failed audits: {', '.join(failed)}")
    print(f"exit {summary.exit_code}")
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
