"""Tests for boundary maps and the collar gluing."""

import math

import numpy as np
import pytest

from app.errors import SpecError
from app.geometry.atlas import Box, ChartSide, manifold_from_spec, sample_mesh
from app.geometry.glue import (
    BoundaryDiffeo,
    collar_coordinates,
    glue,
    glue_from_spec,
    make_boundary_diffeo,
)
from app.pipeline.scenarios import get_scenario
from app.schemas import EtaSpec


def _sides(name: str):
    cfg = get_scenario(name)
    return manifold_from_spec(cfg.glue.M, ChartSide.M), manifold_from_spec(cfg.glue.Q, ChartSide.Q), cfg


@pytest.fixture
def flat_double():
    m, q, cfg = _sides("flat-double")
    return glue_from_spec(m, q, cfg.glue.eta, cfg.name)


class TestBoundaryDiffeo:
    box = Box((-2.0,), (2.0,))

    def test_identity(self):
        eta = make_boundary_diffeo(EtaSpec(component="c"), 2, self.box)
        assert eta.orientation == 1
        np.testing.assert_allclose(eta.apply(np.array([[0.5]])), [[0.5]])

    def test_reflection_reverses_orientation(self):
        eta = make_boundary_diffeo(EtaSpec(component="c", forward="-x1", inverse="-x1"), 2, self.box)
        assert eta.orientation == -1

    def test_wrong_inverse(self):
        with pytest.raises(SpecError):
            make_boundary_diffeo(EtaSpec(component="c", forward="2 * x1", inverse="x1"), 2, self.box)

    def test_component_count(self):
        with pytest.raises(SpecError):
            make_boundary_diffeo(EtaSpec(component="c", forward="x1; x1", inverse="x1"), 2, self.box)

    def test_periodic_round_trip_is_wrapped(self):
        box = Box((0.0,), (2 * math.pi,))
        spec = EtaSpec(component="c", forward="x1 + 1", inverse="x1 - 1 + 2 * pi")
        eta = make_boundary_diffeo(spec, 2, box, period=2 * math.pi)
        assert eta.orientation == 1

    def test_periodic_shift_needs_period(self):
        box = Box((0.0,), (2 * math.pi,))
        spec = EtaSpec(component="c", forward="x1 + 1", inverse="x1 - 1 + 2 * pi")
        with pytest.raises(SpecError):
            make_boundary_diffeo(spec, 2, box)

    def test_identity_builder(self):
        eta = BoundaryDiffeo.identity("c", 3)
        np.testing.assert_allclose(eta.apply_inverse(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


class TestGlue:
    def test_flat_double_has_one_collar(self, flat_double):
        assert list(flat_double.atlas.charts) == ["collar:edge"]
        collar = flat_double.collar("edge")
        assert collar.depth_m == pytest.approx(4.0)
        assert collar.depth_q == pytest.approx(4.0)
        assert flat_double.orientations() == {"edge": 1}
        assert flat_double.atlas.boundary[0].chart == "collar:edge"

    def test_collar_metric_switches_at_interface(self):
        m, q, cfg = _sides("cusp-tail")
        n = glue_from_spec(m, q, cfg.glue.eta, cfg.name)
        g = n.atlas.chart("collar:end").metric("base")
        mats = g.matrix(np.array([[0.1, -0.5], [0.1, 0.5]]))
        assert mats[0, 0, 0] == pytest.approx(math.exp(2.0))
        assert mats[1, 0, 0] == pytest.approx(math.exp(1.0))
        assert mats[1, 1, 1] == pytest.approx(math.exp(1.0))

    def test_reflected_eta_still_matches_metric(self):
        m, q, _ = _sides("flat-double")
        n = glue_from_spec(m, q, [EtaSpec(component="edge", forward="-x1", inverse="-x1")])
        assert n.orientations() == {"edge": -1}
        g = n.atlas.chart("collar:edge").metric("base")
        np.testing.assert_allclose(g.matrix(np.array([[0.3, 1.0]]))[0], np.eye(2))

    def test_mesh_has_single_interface_row(self, flat_double):
        mesh = sample_mesh(flat_double.atlas, 0.5)
        assert mesh.n_vertices == 9 * 17
        assert int(mesh.in_m.sum()) == 81
        assert int(mesh.in_q.sum()) == 81
        assert int(mesh.on_boundary.sum()) == 9

    def test_periodic_transitions_move_to_collar(self):
        m, q, cfg = _sides("circle-boundary")
        n = glue_from_spec(m, q, cfg.glue.eta, cfg.name)
        assert [(t.source, t.target) for t in n.atlas.transitions] == [("collar:circle", "collar:circle")] * 2
        q_side = n.atlas.transitions[1]
        np.testing.assert_allclose(q_side.apply(np.array([[2 * math.pi + 0.1, 0.5]])), [[0.1, 0.5]], atol=1e-12)
        assert q_side.overlap.lower[-1] == pytest.approx(0.0)
        assert q_side.overlap.upper[-1] == pytest.approx(0.9)

    def test_mismatched_boundaries(self, flat_square):
        m, _, _ = _sides("flat-double")
        with pytest.raises(SpecError):
            glue(m, manifold_from_spec(flat_square, ChartSide.Q), [])

    def test_unknown_eta_component(self):
        m, q, _ = _sides("flat-double")
        with pytest.raises(SpecError):
            glue_from_spec(m, q, [EtaSpec(component="nope")])

    def test_two_components_pair_in_order(self):
        m, q, cfg = _sides("two-tail")
        n = glue_from_spec(m, q, cfg.glue.eta, cfg.name)
        assert [c.component for c in n.collars] == ["a", "b"]
        assert [(c.m_chart, c.q_chart) for c in n.collars] == [("left", "slow"), ("right", "fast")]


class TestCollarCoordinates:
    def test_from_collar_chart(self, flat_double):
        assert collar_coordinates(flat_double, [0.5, -1.0]) == ((0.5,), -1.0)

    def test_from_q_chart(self, flat_double):
        u, s = collar_coordinates(flat_double, [0.5, -1.0], chart="q")
        assert u == (0.5,)
        assert s == pytest.approx(1.0)

    def test_outside(self, flat_double):
        with pytest.raises(SpecError):
            collar_coordinates(flat_double, [0.0, 9.0])
