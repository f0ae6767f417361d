"""Shared fixtures: flat atlases and isolated artifact directories."""

import pytest

from app.schemas import ManifoldSpec


def chart(cid, metric, kind="ball", radius=10.0, window=None, center=None, open_=False):
    spec = {"id": cid, "domain": {"kind": kind, "radius": radius, "open": open_}, "metric": metric}
    if center is not None:
        spec["domain"]["center"] = center
    if window is not None:
        spec["window"] = {"lower": window[0], "upper": window[1]}
    return spec


def manifold(charts, transitions=(), boundary=(), name="test", resolution=None) -> ManifoldSpec:
    return ManifoldSpec.model_validate(
        {
            "name": name,
            "charts": list(charts),
            "transitions": list(transitions),
            "boundary": list(boundary),
            "resolution": resolution,
        }
    )


FLAT = [["1", "0"], ["0", "1"]]


@pytest.fixture
def flat_square() -> ManifoldSpec:
    return manifold([chart("sq", FLAT, window=([0.0, 0.0], [1.0, 1.0]))])


@pytest.fixture
def flat_half_disk() -> ManifoldSpec:
    return manifold(
        [chart("h", FLAT, kind="half_ball", radius=1.0)],
        boundary=[{"id": "edge", "chart": "h"}],
    )


@pytest.fixture(autouse=True)
def artifact_dir(tmp_path, monkeypatch):
    out = tmp_path / "artifacts"
    monkeypatch.setenv("RIEMEXT_OUTPUT_DIR", str(out))
    return out
