"""Tests for the metric extension, partition of unity and Fermi reflection."""

import numpy as np
import pytest

from app.errors import SPDError, SpecError
from app.geometry.atlas import ChartSide, MetricField, manifold_from_spec, sample_mesh
from app.geometry.extend import (
    TILDE_TAG,
    build_fermi_collars,
    build_partition_of_unity,
    extend_chart_metric,
    extend_metric,
    in_collar_region,
    lipschitz_audit,
    p_mask,
    project_path,
    project_rho,
    reflect_metric,
    rho_inverse,
    sample_audit_paths,
    seeley_coefficients,
)
from app.geometry.glue import glue_from_spec
from app.geometry.lengthspace import SampledPath
from app.pipeline.scenarios import get_scenario
from app.schemas import EtaSpec
from tests.conftest import FLAT, chart, manifold


def _glued(name: str):
    cfg = get_scenario(name)
    m = manifold_from_spec(cfg.glue.M, ChartSide.M)
    q = manifold_from_spec(cfg.glue.Q, ChartSide.Q)
    return glue_from_spec(m, q, cfg.glue.eta, cfg.name)


def _strip_pair(m_metric):
    window = ([-1.0, -1.0], [1.0, 0.0])
    m = manifold(
        [chart("m", m_metric, kind="half_ball", radius=2.0, window=window)],
        boundary=[{"id": "edge", "chart": "m"}],
        name="M",
    )
    q = manifold(
        [chart("q", FLAT, kind="half_ball", radius=2.0, window=window)],
        boundary=[{"id": "edge", "chart": "q"}],
        name="Q",
    )
    return glue_from_spec(
        manifold_from_spec(m, ChartSide.M), manifold_from_spec(q, ChartSide.Q), [EtaSpec(component="edge")]
    )


@pytest.fixture(scope="module")
def flat_collar():
    n, _, _ = extend_metric(_glued("flat-double"), 0.25)
    return n, build_fermi_collars(n, 0.25, eps=1.0)[0]


@pytest.fixture(scope="module")
def circle_collar():
    n, _, _ = extend_metric(_glued("circle-boundary"), 0.1)
    return n, build_fermi_collars(n, 0.1, eps=1.0)[0]


class TestReflection:
    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    def test_coefficients_match_moments(self, order):
        c = seeley_coefficients(order)
        k = np.arange(1, order + 1)
        for j in range(order):
            assert np.sum(c * (-1.0 / k) ** j) == pytest.approx(1.0)

    def test_reproduces_low_degree_polynomials(self):
        g = MetricField.parse([["1 + x2 + x2^2", "0"], ["0", "1"]], 2)
        ext = reflect_metric(g, 3)
        assert ext.matrix(np.array([[0.0, 0.3]]))[0, 0, 0] == pytest.approx(1.39)
        assert ext.matrix(np.array([[0.0, -0.3]]))[0, 0, 0] == pytest.approx(0.79)

    def test_flat_chart_valid_to_full_depth(self, flat_half_disk):
        ext = extend_chart_metric(manifold_from_spec(flat_half_disk).chart("h"))
        assert ext.t_beta == pytest.approx(0.5)
        assert sum(ext.coefficients) == pytest.approx(1.0)

    def test_depth_limited_by_positivity(self):
        spec = manifold(
            [chart("h", [["1", "0"], ["0", "1 - 12*x2"]], kind="half_ball", radius=1.0)],
            boundary=[{"id": "edge", "chart": "h"}],
        )
        ext = extend_chart_metric(manifold_from_spec(spec).chart("h"))
        assert ext.t_beta == pytest.approx(0.025)

    def test_needs_boundary_chart(self, flat_square):
        with pytest.raises(SpecError):
            extend_chart_metric(manifold_from_spec(flat_square).chart("sq"))

    def test_not_spd_on_half_ball(self):
        spec = manifold(
            [chart("h", [["1", "0"], ["0", "x2 + 0.5"]], kind="half_ball", radius=1.0)],
            boundary=[{"id": "edge", "chart": "h"}],
        )
        with pytest.raises(SPDError):
            extend_chart_metric(manifold_from_spec(spec).chart("h"))


class TestPartitionOfUnity:
    def test_weights(self, flat_half_disk):
        ext = extend_chart_metric(manifold_from_spec(flat_half_disk).chart("h"))
        pou = build_partition_of_unity(ext, 2, width_m=0.5)
        s = np.linspace(-1.0, 1.0, 201)
        w = pou.weights(np.stack([np.zeros_like(s), s], axis=1))
        assert np.all(w >= -1e-12) and np.all(w <= 1 + 1e-12)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(w[s <= -0.5, 0], 1.0)
        np.testing.assert_allclose(w[s >= pou.support_q, 1], 1.0)
        np.testing.assert_allclose(w[(s >= -0.25) & (s <= 0.0), 2], 1.0)

    def test_positive_widths(self, flat_half_disk):
        ext = extend_chart_metric(manifold_from_spec(flat_half_disk).chart("h"))
        with pytest.raises(SpecError):
            build_partition_of_unity(ext, 2, width_m=0.0)


class TestExtendedMetric:
    def test_flat_double_stays_flat(self, flat_collar):
        n, _ = flat_collar
        g = n.atlas.chart("collar:edge").metric(TILDE_TAG)
        pts = np.array([[0.0, -1.0], [0.3, -0.1], [0.3, 0.1], [-1.0, 0.4], [1.5, 3.0]])
        np.testing.assert_allclose(g.matrix(pts), np.broadcast_to(np.eye(2), (5, 2, 2)), atol=1e-12)

    def test_restricts_to_m_metric(self):
        n, _, _ = extend_metric(_strip_pair([["1 + x1^2", "0"], ["0", "1"]]), 0.05)
        g = n.atlas.chart("collar:edge").metric(TILDE_TAG)
        pts = np.array([[0.5, -0.5], [-0.25, 0.0]])
        np.testing.assert_allclose(g.matrix(pts)[:, 0, 0], [1.25, 1.0625])

    def test_default_support_keeps_metric_positive(self):
        _, exts, pous = extend_metric(_strip_pair([["1", "0"], ["0", "1 - 12*x2"]]), 0.05)
        assert exts[0].t_beta == pytest.approx(0.025)
        assert pous[0].support_q == pytest.approx(0.025)

    def test_wide_support_fails_positivity(self):
        with pytest.raises(SPDError):
            extend_metric(_strip_pair([["1", "0"], ["0", "1 - 12*x2"]]), 0.05, support_q=0.5)


class TestFermiCollar:
    def test_flat_collar_reaches_cap(self, flat_collar):
        _, collar = flat_collar
        assert collar.min_depth == pytest.approx(0.5)
        np.testing.assert_allclose(collar.stretch_at(0.3), 1.0, atol=1e-9)
        assert all(row.max_dr == pytest.approx(1.0) for row in collar.sample_rows())

    def test_flat_reflection_is_mirror(self, flat_collar):
        _, collar = flat_collar
        np.testing.assert_allclose(project_rho(collar, [0.3, 0.2]), [0.3, -0.2], atol=1e-9)
        np.testing.assert_allclose(project_rho(collar, [0.3, -0.7]), [0.3, -0.7])
        np.testing.assert_allclose(rho_inverse(collar, [0.3, -0.2]), [0.3, 0.2], atol=1e-9)

    def test_path_image_stays_in_m(self, flat_collar):
        _, collar = flat_collar
        path = SampledPath.from_points(np.linspace([0.3, -0.4], [0.3, 0.4], 9), chart=collar.chart_id)
        image = project_path(collar, path)
        np.testing.assert_allclose(image.points[:, 1], -np.abs(path.points[:, 1]), atol=1e-9)
        np.testing.assert_array_equal(image.times, path.times)
        assert image.chart == collar.chart_id

    def test_outside_region(self, flat_collar):
        _, collar = flat_collar
        assert in_collar_region(collar, np.array([[0.3, 0.4], [0.3, 0.8]])).tolist() == [True, False]
        with pytest.raises(SpecError):
            project_rho(collar, [0.3, 0.8])

    def test_p_mask(self, flat_collar):
        n, collar = flat_collar
        mesh = sample_mesh(n.atlas, 0.25)
        p = p_mask(mesh, [collar])
        s = mesh.coords[:, 1]
        assert p[s <= 0.25 + 1e-9].all()
        assert not p[s >= 0.75 - 1e-9].any()

    def test_lipschitz_audit_on_mirror(self, flat_collar):
        n, collar = flat_collar
        paths = sample_audit_paths(collar, 10, seed=3)
        audit = lipschitz_audit(collar, n.atlas.chart(collar.chart_id), paths)
        assert audit.passed
        assert audit.max_ratio <= 1.0 + 1e-9

    def test_audit_paths_are_seeded(self, flat_collar):
        _, collar = flat_collar
        a = sample_audit_paths(collar, 3, seed=7)
        b = sample_audit_paths(collar, 3, seed=7)
        for pa, pb in zip(a, b, strict=True):
            np.testing.assert_array_equal(pa.points, pb.points)

    def test_circle_stretch_sets_depth(self, circle_collar):
        _, collar = circle_collar
        assert collar.min_depth == pytest.approx(1.0 / 3.0, abs=5e-3)

    @pytest.mark.parametrize("depth", [0.1, 0.2, 0.3])
    def test_circle_stretch_matches_reflection(self, circle_collar, depth):
        _, collar = circle_collar
        np.testing.assert_allclose(collar.stretch_at(depth), (1.0 + depth) / (1.0 - depth), rtol=0.02)

    def test_circle_stretch_stays_within_bound(self, circle_collar):
        _, collar = circle_collar
        assert all(row.max_dr <= 2.0 + 1e-9 for row in collar.sample_rows())

    def test_lipschitz_audit_on_circle(self, circle_collar):
        n, collar = circle_collar
        paths = sample_audit_paths(collar, 50, seed=0)
        audit = lipschitz_audit(collar, n.atlas.chart(collar.chart_id), paths)
        assert audit.passed
        assert audit.max_ratio <= 2.04

    def test_epsilon_must_be_positive(self, flat_collar):
        n, _ = flat_collar
        with pytest.raises(SpecError):
            build_fermi_collars(n, 0.25, eps=0.0)
