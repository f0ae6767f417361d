"""Tests for the exhaustion, crossing certificates and the conformal factor."""

import math
from dataclasses import replace

import numpy as np
import pytest

from app.errors import SpecError
from app.geometry.atlas import manifold_from_spec, sample_mesh
from app.geometry.complete import (
    CONFORMAL_TAG,
    NO_CROSSING,
    build_exhaustion,
    certify_annuli,
    certify_completeness,
    conformal_metric,
    decompose_annuli,
    exit_length_growth,
    undeformed,
    verify_crossing_cost,
)
from app.geometry.lengthspace import DivergentPath
from tests.conftest import FLAT, chart, manifold

H = 0.25


@pytest.fixture(scope="module")
def strip():
    """Flat strip [0, 3] x [0, 1]; M is the two leftmost columns and P = M."""
    spec = manifold([chart("s", FLAT, window=([0.0, 0.0], [3.0, 1.0]))])
    mesh = sample_mesh(manifold_from_spec(spec), H)
    mesh = replace(mesh, in_m=mesh.coords[:, 0] <= H + 1e-9)
    return mesh.with_lengths("tilde", mesh.edge_lengths("base").copy())


def _exhaustion(mesh, step=0.5):
    base = np.flatnonzero(mesh.coords[:, 0] <= 1e-9)
    return build_exhaustion(mesh, base, step)


def _row(mesh, xs, y):
    return np.array([mesh.nearest_vertex([x, y]) for x in xs])


@pytest.fixture(scope="module")
def deformed(strip):
    exh = _exhaustion(strip)
    ann = decompose_annuli(strip, exh, strip.in_m.copy())
    q1, q2 = certify_annuli(strip, exh, ann)
    mesh_n, field = conformal_metric(strip, exh, ann, q1, q2)
    return exh, ann, mesh_n, field


class TestExhaustion:
    def test_levels_are_distance_sublevels(self, strip):
        exh = _exhaustion(strip)
        assert exh.depth == 6
        x = strip.coords[:, 0]
        for j, level in enumerate(exh.levels):
            np.testing.assert_array_equal(level, x <= 0.5 * (j + 1) + 1e-9)
        assert exh.index()[strip.nearest_vertex([0.75, 0.5])] == 1

    def test_levels_nest(self, strip):
        exh = _exhaustion(strip, step=0.75)
        for inner, outer in zip(exh.levels, exh.levels[1:], strict=False):
            assert np.all(outer[inner])

    def test_rejects_bad_steps(self, strip):
        with pytest.raises(SpecError):
            _exhaustion(strip, step=0.0)
        with pytest.raises(SpecError):
            _exhaustion(strip, step=0.01)


class TestCertificates:
    def test_annulus_components(self, deformed):
        _, ann, _, _ = deformed
        assert sorted(ann.annuli) == [0, 1, 2, 3, 4]
        assert all(len(comps) == 1 for comps in ann.annuli.values())
        assert len(ann.shells[0][0].trace) == 5
        assert all(len(s.trace) == 0 for j in (1, 2, 3) for s in ann.shells[j])

    def test_q1_is_the_annulus_width(self, deformed):
        _, _, _, field = deformed
        for j in range(4):
            assert field.q1[(j, 0)] == pytest.approx(0.5)
        assert field.q1[(4, 0)] == NO_CROSSING

    def test_q2_is_one_on_a_straight_boundary(self, deformed):
        _, _, _, field = deformed
        assert field.q2[(0, 0)].value == pytest.approx(1.0)
        assert field.q2[(0, 0)].sampling == "exhaustive"
        assert field.q2[(1, 0)].sampling == "vacuous"

    def test_rows_report_missing_crossings_as_null(self, deformed):
        _, _, _, field = deformed
        rows = [r for r in field.certificate_rows() if r.kind == "q1"]
        assert [r.value is None for r in rows] == [False, False, False, False, True]


class TestConformalFactor:
    def test_one_bump_per_short_annulus(self, deformed):
        _, _, _, field = deformed
        assert [(b.kind, b.j) for b in field.bumps] == [("q1", j) for j in range(4)]
        assert all(b.weight == pytest.approx(math.log(2.0)) for b in field.bumps)

    def test_factor_is_one_on_m(self, deformed, strip):
        _, _, _, field = deformed
        assert np.all(field.factor[strip.in_m] == 1.0)
        assert field.factor.min() == 1.0
        assert field.factor[strip.nearest_vertex([0.75, 0.5])] == pytest.approx(4.0)

    def test_deformed_lengths_dominate(self, deformed, strip):
        _, _, mesh_n, _ = deformed
        assert np.all(mesh_n.edge_lengths(CONFORMAL_TAG) >= strip.edge_lengths("tilde") * (1 - 1e-12))

    def test_flat_certificates_give_no_bumps(self, strip):
        exh = _exhaustion(strip, step=1.0)
        ann = decompose_annuli(strip, exh, strip.in_m.copy())
        q1, q2 = certify_annuli(strip, exh, ann)
        _, field = conformal_metric(strip, exh, ann, q1, q2)
        assert field.bumps == ()
        np.testing.assert_array_equal(field.factor, 1.0)


class TestAudits:
    def test_crossing_cost_after_deformation(self, deformed):
        _, ann, mesh_n, _ = deformed
        audit = verify_crossing_cost(mesh_n, ann, trials=20, seed=3)
        assert audit.passed
        assert audit.checks > 0
        assert audit.min_a >= 1.0

    def test_undeformed_metric_fails_crossing(self, deformed, strip):
        _, ann, _, _ = deformed
        mesh_n, _ = undeformed(strip)
        audit = verify_crossing_cost(mesh_n, ann, trials=20, seed=3)
        assert not audit.passed
        assert audit.min_a == pytest.approx(0.5)
        assert {f.kind for f in audit.failures} == {"a"}

    def test_three_cases(self, deformed):
        exh, ann, mesh_n, _ = deformed
        xs = np.arange(0.0, 3.0 + 1e-9, H)
        leave = DivergentPath("leave", _row(mesh_n, xs, 0.5))
        stay = DivergentPath("stay", np.array([mesh_n.nearest_vertex([0.0, y]) for y in (0.0, 0.25, 0.5, 0.75, 1.0)]))
        wander = DivergentPath(
            "wander", np.array([mesh_n.nearest_vertex(p) for p in ([0.0, 0.0], [0.25, 0.0], [0.25, 0.25], [0.0, 0.25])])
        )
        report = certify_completeness(mesh_n, exh, ann, [leave, stay, wander])
        assert report.passed
        cases = {c.path_id: c for c in report.paths}
        assert cases["leave"].case == 1
        assert cases["leave"].bound == pytest.approx(4 * 0.95)
        assert cases["leave"].length > 4.0
        assert cases["stay"].case == 2
        assert cases["wander"].case == 3
        assert cases["wander"].excursions == 1

    def test_tail_decides_the_case(self, deformed):
        exh, ann, mesh_n, _ = deformed
        xs = np.arange(H, 3.0 + 1e-9, H)
        head = [mesh_n.nearest_vertex(p) for p in ([0.0, 0.0], [0.25, 0.25], [0.0, 0.5])]
        path = DivergentPath("wander-then-leave", np.concatenate([head, _row(mesh_n, xs, 0.5)]))
        report = certify_completeness(mesh_n, exh, ann, [path])
        (case,) = report.paths
        assert case.case == 1
        assert case.excursions == 1
        assert case.bound == pytest.approx(4 * 0.95)
        assert case.length > 4.0
        assert case.holds

    def test_exit_length_growth(self):
        rows = [(0, 1.0), (0, 0.8), (1, 2.0), (2, 3.5)]
        assert exit_length_growth(rows) == pytest.approx([1.2, 1.5])
