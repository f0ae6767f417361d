"""Tests for Christoffel symbols, curvature, geodesic shooting, Riccati and cutoffs."""

import math

import numpy as np
import pytest

from app.errors import NumericGuardError, SpecError
from app.geometry.atlas import MetricField, manifold_from_spec, sample_mesh
from app.geometry.lengthspace import distances_from
from app.geometry.geodesy import (
    check_curvature_bound,
    christoffel,
    cutoff_gradient_sups,
    cutoff_sequence,
    edge_quotients,
    exhaustion_function,
    gaussian_curvature,
    gaussian_curvature_batch,
    riccati_evolve,
    shoot_geodesic,
    unit_start,
)
from tests.conftest import FLAT, chart, manifold

SPHERE = [["4/(1 + x1^2 + x2^2)^2", "0"], ["0", "4/(1 + x1^2 + x2^2)^2"]]


@pytest.fixture(scope="module")
def sphere():
    return manifold_from_spec(manifold([chart("stereo", SPHERE, radius=3.0)]))


class TestCurvature:
    def test_polar_christoffel(self):
        c = manifold_from_spec(manifold([chart("p", [["1", "0"], ["0", "x1^2"]], radius=5.0)])).chart("p")
        gamma = christoffel(c, [2.0, 0.3])
        assert gamma[0, 1, 1] == pytest.approx(-2.0)
        assert gamma[1, 0, 1] == pytest.approx(0.5)
        assert gamma[1, 1, 0] == pytest.approx(0.5)
        assert gamma[0, 0, 0] == pytest.approx(0.0)

    def test_stereographic_sphere_has_unit_curvature(self, sphere):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, -1.5], [2.0, 2.0]])
        k = gaussian_curvature_batch(sphere.chart("stereo").metric("base"), pts)
        np.testing.assert_allclose(k, 1.0, rtol=1e-8)

    def test_round_sphere_in_angles(self):
        g = MetricField.parse([["1", "0"], ["0", "sin(x1)^2"]], 2)
        k = gaussian_curvature_batch(g, np.array([[0.7, 0.0], [1.5, 2.0], [2.4, -1.0]]))
        np.testing.assert_allclose(k, 1.0, rtol=1e-8)

    def test_upper_half_plane_is_hyperbolic(self):
        g = MetricField.parse([["1/x2^2", "0"], ["0", "1/x2^2"]], 2)
        k = gaussian_curvature_batch(g, np.array([[0.0, 1.0], [3.0, 0.2]]))
        np.testing.assert_allclose(k, -1.0, rtol=1e-8)

    def test_point_outside_chart(self, sphere):
        with pytest.raises(SpecError):
            gaussian_curvature(sphere.chart("stereo"), [4.0, 0.0])

    def test_curvature_bound(self):
        c = manifold_from_spec(manifold([chart("f", FLAT)])).chart("f")
        pts = [np.array([[0.0, 0.0], [1.0, 1.0]])]
        assert check_curvature_bound([c], pts, 1.0, "<", "base") == (0.0, 0.0)
        with pytest.raises(NumericGuardError):
            check_curvature_bound([c], pts, -1.0, "<", "base")
        with pytest.raises(SpecError):
            check_curvature_bound([c], [np.zeros((0, 2))], 1.0, "<", "base")


class TestShooting:
    def test_flat_geodesic_is_straight(self):
        man = manifold_from_spec(manifold([chart("f", FLAT)]))
        start = unit_start(man, "f", [0.0, 0.0], [3.0, 4.0])
        traj = shoot_geodesic(man, start, 2.0, step=0.01)
        assert not traj.boundary_hit
        assert traj.final.position == pytest.approx((1.2, 1.6))
        assert traj.final.arc_length == pytest.approx(2.0)
        assert traj.speed_drift() < 1e-12

    def test_unit_start_normalizes_speed(self):
        man = manifold_from_spec(manifold([chart("c", [["4", "0"], ["0", "4"]])]))
        assert unit_start(man, "c", [0.0, 0.0], [1.0, 0.0]).velocity == pytest.approx((0.5, 0.0))
        with pytest.raises(SpecError):
            unit_start(man, "c", [0.0, 0.0], [0.0, 0.0])

    def test_great_circle_closes(self, sphere):
        start = unit_start(sphere, "stereo", [1.0, 0.0], [0.0, 1.0])
        traj = shoot_geodesic(sphere, start, 2 * math.pi, step=0.01)
        assert not traj.boundary_hit
        assert traj.final.position == pytest.approx((1.0, 0.0), abs=1e-6)
        np.testing.assert_allclose(np.linalg.norm(traj.points, axis=1), 1.0, atol=1e-6)
        assert traj.speed_drift() < 1e-6

    def test_open_disk_is_left_in_finite_time(self):
        man = manifold_from_spec(manifold([chart("d", FLAT, radius=1.0, open_=True)]))
        start = unit_start(man, "d", [0.0, 0.0], [1.0, 0.0])
        traj = shoot_geodesic(man, start, 2.0, step=0.01)
        assert traj.boundary_hit
        assert traj.hit_length == pytest.approx(1.0, abs=0.02)

    def test_step_must_resolve_length(self):
        man = manifold_from_spec(manifold([chart("f", FLAT)]))
        start = unit_start(man, "f", [0.0, 0.0], [1.0, 0.0])
        with pytest.raises(SpecError):
            shoot_geodesic(man, start, 1.0, step=0.5)

    def test_start_outside_chart(self):
        man = manifold_from_spec(manifold([chart("f", FLAT, radius=1.0)]))
        start = unit_start(man, "f", [0.0, 0.0], [1.0, 0.0])
        moved = type(start)("f", (5.0, 0.0), start.velocity)
        with pytest.raises(SpecError):
            shoot_geodesic(man, moved, 1.0, step=0.01)


class TestRiccati:
    @pytest.mark.parametrize(
        ("lambda0", "curvature", "length", "expected"),
        [
            (-1.0, 0.0, 0.5, -2.0 / 3.0),
            (0.0, 1.0, math.pi / 4, 1.0),
            (0.0, -1.0, 0.5, -math.tanh(0.5)),
        ],
    )
    def test_closed_forms(self, lambda0, curvature, length, expected):
        result = riccati_evolve(lambda0, curvature, length)
        assert not result.blew_up
        assert result.value == pytest.approx(expected, abs=1e-6)

    def test_blow_up_is_reported(self):
        result = riccati_evolve(1.0, 0.0, 2.0)
        assert result.blew_up
        assert result.blow_up == pytest.approx(1.0, abs=0.01)

    def test_time_dependent_curvature(self):
        result = riccati_evolve(0.0, lambda t: 2.0 * t, 0.5)
        # lambda = t^2 + t^5/5 + O(t^8)
        assert result.value == pytest.approx(0.2565, abs=1e-3)


class TestExhaustionFunction:
    @pytest.fixture(scope="class")
    def mesh(self):
        spec = manifold([chart("sq", FLAT, window=([-2.0, -2.0], [2.0, 2.0]))])
        return sample_mesh(manifold_from_spec(spec), 0.25)

    def test_lipschitz_and_proper(self, mesh):
        base = mesh.nearest_vertex([0.0, 0.0])
        rho = exhaustion_function(mesh, 1.1, 0.5, base=base)
        assert rho.lipschitz <= 1.1 + 1e-12
        assert edge_quotients(mesh, rho.values, "base").max() <= 1.1 + 1e-12
        corner = mesh.nearest_vertex([2.0, 2.0])
        assert rho.values[corner] > rho.values[base] + 1.5

    def test_cutoffs(self, mesh):
        rho = exhaustion_function(mesh, 1.1, 0.5, base=mesh.nearest_vertex([0.0, 0.0]))
        for k in (1, 2):
            psi = cutoff_sequence(rho, k)
            assert np.all(psi[rho.values <= k] == 1.0)
            assert np.all(psi[rho.values >= 2 * k] == 0.0)
            assert np.all((psi >= 0.0) & (psi <= 1.0))
        with pytest.raises(SpecError):
            cutoff_sequence(rho, 0)

    def test_rejects_bad_parameters(self, mesh):
        with pytest.raises(SpecError):
            exhaustion_function(mesh, 1.0, 0.5)
        with pytest.raises(SpecError):
            exhaustion_function(mesh, 1.1, 0.25)


class TestFlatPlaneExhaustion:
    @pytest.fixture(scope="class")
    def plane(self):
        spec = manifold([chart("plane", FLAT, radius=30.0, window=([-14.0, -14.0], [14.0, 14.0]))])
        mesh = sample_mesh(manifold_from_spec(spec), 0.25)
        base = mesh.nearest_vertex([0.0, 0.0])
        return mesh, base, exhaustion_function(mesh, 1.1, 0.5, base=base)

    def test_gradient_bound(self, plane):
        mesh, _, rho = plane
        assert edge_quotients(mesh, rho.values, "base").max() <= 1.1 + 1e-12

    def test_exceeds_ten_outside_radius_twelve(self, plane):
        mesh, base, rho = plane
        far = distances_from(mesh, base, "base") > 12.0
        assert far.any()
        assert rho.values[far].min() > 10.0

    def test_cutoff_gradient_halves(self, plane):
        mesh, _, rho = plane
        sups = cutoff_gradient_sups(mesh, rho, (1, 2, 4))
        assert 0.45 <= sups[2] / sups[1] <= 0.55
        assert 0.45 <= sups[4] / sups[2] <= 0.55
