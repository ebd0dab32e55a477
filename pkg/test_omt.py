#!/usr/bin/env python3
"""
Tests for omt: sigma-mass integrals, power diagrams, the transport energy
and the Newton / gradient solvers
"""

import csv

import numpy as np
import pytest
import shapely
from scipy import integrate

from capmap_errors import ArgumentError, FlipError
from conformal import PlanarMap, disk_conformal_flatten
from mesh_core import log_area_ratios, validate_topology, vertex_areas
from metrics import spherical_triangle_areas
from omt import (
    DomainPolygon,
    omt_energy,
    omt_solve,
    power_diagram,
    power_hessian,
    sigma_centroid,
    sigma_mass,
    target_measure,
)
from projection import cap_embed, cap_from_radius
from surface_generator import flat_disk, geodesic_cap


def _ngon(n, radius=1.0, center=(0.0, 0.0)):
    angle = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(angle), center[1] + radius * np.sin(angle)])


def _sigma(x, y):
    return 4.0 / (1.0 + x * x + y * y) ** 2


# ---------------------------------------------------------------------------
# sigma integrals
# ---------------------------------------------------------------------------

def test_unit_disk_mass_is_hemisphere():
    assert sigma_mass(_ngon(4096)) == pytest.approx(2.0 * np.pi, abs=1e-5)


def test_radius_two_disk_mass():
    assert sigma_mass(_ngon(4096, 2.0)) == pytest.approx(16.0 * np.pi / 5.0, abs=1e-4)


def test_triangle_mass_matches_quadrature():
    expected, _ = integrate.dblquad(lambda y, x: _sigma(x, y), 0.0, 1.0, 0.0, lambda x: 1.0 - x,
                                    epsabs=1e-13, epsrel=1e-13)
    assert sigma_mass(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])) == pytest.approx(expected, abs=1e-8)


def test_mass_ignores_orientation():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert sigma_mass(square[::-1]) == pytest.approx(sigma_mass(square))


def test_uniform_density_is_shoelace_area():
    square = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 3.0], [0.0, 3.0]])
    assert sigma_mass(square, density="uniform") == pytest.approx(6.0)


def test_symmetric_polygon_centroid():
    square = np.array([[-0.1, -0.1], [0.1, -0.1], [0.1, 0.1], [-0.1, 0.1]])
    np.testing.assert_allclose(sigma_centroid(square), [0.0, 0.0], atol=1e-10)


def test_small_square_centroid_matches_quadrature():
    square = np.array([[0.9, 0.9], [1.1, 0.9], [1.1, 1.1], [0.9, 1.1]])
    mass, _ = integrate.dblquad(lambda y, x: _sigma(x, y), 0.9, 1.1, 0.9, 1.1, epsabs=1e-14, epsrel=1e-13)
    mx, _ = integrate.dblquad(lambda y, x: x * _sigma(x, y), 0.9, 1.1, 0.9, 1.1, epsabs=1e-14, epsrel=1e-13)
    my, _ = integrate.dblquad(lambda y, x: y * _sigma(x, y), 0.9, 1.1, 0.9, 1.1, epsabs=1e-14, epsrel=1e-13)
    np.testing.assert_allclose(sigma_centroid(square), [mx / mass, my / mass], atol=1e-6)


def test_tiny_polygon_centroid_is_euclidean():
    tiny = _ngon(7, radius=5e-5, center=(2.0, 0.0))
    np.testing.assert_allclose(sigma_centroid(tiny), tiny.mean(axis=0), atol=1e-8)


# ---------------------------------------------------------------------------
# Domain and target measure
# ---------------------------------------------------------------------------

def test_domain_is_stored_counterclockwise():
    omega = DomainPolygon(_ngon(8)[::-1])
    assert omega.polygon.exterior.is_ccw


def test_self_intersecting_domain_is_rejected():
    with pytest.raises(ArgumentError):
        DomainPolygon(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]))


def test_equal_vertex_areas_give_equal_targets(tetrahedron):
    omega = DomainPolygon(_ngon(64, 0.7))
    tau = target_measure(tetrahedron, omega)
    np.testing.assert_allclose(tau, omega.mass() / 4.0, rtol=1e-12)


def test_targets_sum_to_domain_mass():
    disk = flat_disk(200)
    tau = target_measure(disk, DomainPolygon(_ngon(4096)))
    assert tau.sum() == pytest.approx(2.0 * np.pi, abs=1e-5)


def test_targets_are_proportional_to_vertex_areas():
    disk = flat_disk(200)
    tau = target_measure(disk, DomainPolygon(_ngon(32)))
    ratio = tau / vertex_areas(disk)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_unknown_normalization(tetrahedron):
    with pytest.raises(ArgumentError):
        target_measure(tetrahedron, DomainPolygon(_ngon(8)), normalization="other")


# ---------------------------------------------------------------------------
# Power diagram
# ---------------------------------------------------------------------------

UNIT_SQUARE = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])


def test_two_sites_split_symmetrically():
    state = power_diagram(np.array([[-0.5, 0.0], [0.5, 0.0]]), np.zeros(2), DomainPolygon(UNIT_SQUARE))
    assert state.masses[0] == pytest.approx(state.masses[1], abs=1e-9)
    assert state.cells[0][:, 0].max() == pytest.approx(0.0, abs=1e-9)
    assert state.cells[1][:, 0].min() == pytest.approx(0.0, abs=1e-9)


def test_single_site_owns_domain():
    omega = DomainPolygon(UNIT_SQUARE)
    state = power_diagram(np.array([[0.1, 0.2]]), np.zeros(1), omega)
    assert state.masses[0] == pytest.approx(sigma_mass(UNIT_SQUARE), rel=1e-12)


def test_height_shifts_bisector():
    omega = DomainPolygon(2.0 * UNIT_SQUARE)
    state = power_diagram(np.array([[-0.5, 0.0], [0.5, 0.0]]), np.array([1.0, 0.0]), omega)
    assert state.cells[0][:, 0].max() == pytest.approx(0.5, abs=1e-9)
    assert state.cells[1][:, 0].min() == pytest.approx(0.5, abs=1e-9)


def test_cell_masses_cover_domain(rng):
    omega = DomainPolygon(_ngon(64, 1.2))
    sites = rng.uniform(-0.7, 0.7, size=(30, 2))
    state = power_diagram(sites, rng.uniform(-0.05, 0.05, size=30), omega)
    assert state.masses.sum() == pytest.approx(omega.mass(), rel=1e-10)


def test_equal_heights_reduce_to_voronoi(rng):
    omega = DomainPolygon(_ngon(32))
    sites = rng.uniform(-0.6, 0.6, size=(15, 2))
    state = power_diagram(sites, np.full(15, 0.37), omega, "uniform")
    regions = shapely.get_parts(shapely.voronoi_polygons(shapely.multipoints(sites), extend_to=omega.polygon))
    assert len(regions) == 15
    for region in regions:
        owners = [i for i in range(15) if region.contains(shapely.Point(sites[i]))]
        assert len(owners) == 1
        assert state.masses[owners[0]] == pytest.approx(shapely.intersection(region, omega.polygon).area, abs=1e-9)
    for i, cell in enumerate(state.cells):
        distances = np.linalg.norm(cell[:, None, :] - sites[None, :, :], axis=2)
        assert np.all(distances[:, i] <= distances.min(axis=1) + 1e-9)


def test_duplicate_sites_are_rejected():
    with pytest.raises(ArgumentError):
        power_diagram(np.array([[0.0, 0.0], [0.0, 0.0]]), np.zeros(2), DomainPolygon(UNIT_SQUARE))


# ---------------------------------------------------------------------------
# Energy and Hessian
# ---------------------------------------------------------------------------

def test_single_site_at_origin_has_zero_energy():
    state = power_diagram(np.zeros((1, 2)), np.zeros(1), DomainPolygon(UNIT_SQUARE))
    assert omt_energy(state, np.array([state.masses[0]])) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("density, radius, tolerance", [("uniform", 1.5, 1e-7), ("stereographic", 0.3, 1e-5)])
def test_energy_gradient_is_mass_residual(rng, density, radius, tolerance):
    omega = DomainPolygon(_ngon(48, radius))
    sites = rng.uniform(-0.5, 0.5, size=(10, 2)) * radius
    heights = np.zeros(10)
    tau = np.full(10, omega.mass(density) / 10)
    state = power_diagram(sites, heights, omega, density)
    step = 1e-5
    for i in range(10):
        offset = np.zeros(10)
        offset[i] = step
        plus = omt_energy(power_diagram(sites, heights + offset, omega, density), tau)
        minus = omt_energy(power_diagram(sites, heights - offset, omega, density), tau)
        assert (plus - minus) / (2 * step) == pytest.approx(state.masses[i] - tau[i], abs=tolerance)


def test_energy_is_invariant_under_height_shift(rng):
    omega = DomainPolygon(_ngon(48))
    sites = rng.uniform(-0.5, 0.5, size=(10, 2))
    tau = np.full(10, omega.mass() / 10)
    base = omt_energy(power_diagram(sites, np.zeros(10), omega), tau)
    shifted = omt_energy(power_diagram(sites, np.full(10, 0.3), omega), tau)
    assert shifted == pytest.approx(base, abs=1e-9)


def test_hessian_matches_mass_differences(rng):
    omega = DomainPolygon(_ngon(48, 1.5))
    sites = rng.uniform(-0.8, 0.8, size=(12, 2))
    heights = np.zeros(12)
    hessian = power_hessian(power_diagram(sites, heights, omega, "uniform")).toarray()
    np.testing.assert_allclose(hessian.sum(axis=1), 0.0, atol=1e-12)
    step = 1e-6
    for j in range(12):
        offset = np.zeros(12)
        offset[j] = step
        plus = power_diagram(sites, heights + offset, omega, "uniform").masses
        minus = power_diagram(sites, heights - offset, omega, "uniform").masses
        np.testing.assert_allclose((plus - minus) / (2 * step), hessian[:, j], atol=1e-6)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _disk_problem(n=300, radius=0.8):
    disk = flat_disk(n)
    loop = validate_topology(disk).boundary
    initial = PlanarMap(disk.vertices[:, :2] * radius, disk.faces)
    omega = DomainPolygon.from_loop(initial.positions, loop, radius=radius)
    return disk, loop, initial, omega


def test_zero_tolerance_is_rejected():
    disk, loop, initial, omega = _disk_problem()
    with pytest.raises(ArgumentError):
        omt_solve(initial, disk, omega, tol=0.0)


def test_unknown_method_is_rejected():
    disk, loop, initial, omega = _disk_problem()
    with pytest.raises(ArgumentError):
        omt_solve(initial, disk, omega, method="lbfgs")


def test_balanced_masses_are_a_fixed_point():
    disk, loop, initial, omega = _disk_problem()
    tau = power_diagram(initial.positions, np.zeros(disk.n_vertices), omega).masses
    result = omt_solve(initial, disk, omega, tol=1e-3, tau=tau, boundary=loop)
    assert result.iterations <= 2
    assert result.residual <= 1e-3
    np.testing.assert_allclose(result.heights, 0.0, atol=1e-12)


@pytest.mark.parametrize("method", ["newton", "gradient"])
def test_solver_reaches_tolerance(tmp_path, method):
    disk, loop, initial, omega = _disk_problem(n=150)
    diagnostics = str(tmp_path / f"{method}.csv")
    result = omt_solve(initial, disk, omega, tol=1e-3, method=method, boundary=loop,
                       diagnostics_path=diagnostics)
    assert result.residual <= 1e-3
    assert np.max(np.abs(result.state.masses - result.tau) / result.tau) <= 1e-3
    np.testing.assert_allclose(np.linalg.norm(result.map.positions[loop], axis=1), 0.8, atol=1e-12)
    assert len(result.map.flipped_faces()) == 0
    with open(diagnostics) as f:
        header = f.readline().strip()
    assert header == "iteration,energy,residual,step,mass_error"


@pytest.mark.parametrize("method", ["newton", "gradient"])
def test_iteration_log_invariants(method):
    disk, loop, initial, omega = _disk_problem(n=150)
    result = omt_solve(initial, disk, omega, tol=1e-3, method=method, boundary=loop)
    energies = [record["energy"] for record in result.history]
    assert len(energies) >= 2
    assert all(later <= earlier for earlier, later in zip(energies, energies[1:]))
    assert max(record["mass_error"] for record in result.history) <= 1e-9


def test_warm_start_with_empty_cell_restarts_cold():
    disk, loop, initial, omega = _disk_problem(n=150)
    starved = np.zeros(disk.n_vertices)
    starved[0] = -10.0
    cold = omt_solve(initial, disk, omega, tol=1e-3, boundary=loop)
    warm = omt_solve(initial, disk, omega, tol=1e-3, boundary=loop, heights=starved)
    np.testing.assert_allclose(warm.map.positions, cold.map.positions, atol=1e-12)
    assert warm.history[0]["energy"] == pytest.approx(cold.history[0]["energy"])


def test_wide_disk_with_thin_rim_density_converges(tmp_path):
    cap = geodesic_cap(np.pi / 4, 500)
    loop = validate_topology(cap).boundary
    initial = disk_conformal_flatten(cap).scaled(1.7)
    omega = DomainPolygon.from_loop(initial.positions, loop, radius=1.7)
    diagnostics = str(tmp_path / "wide.csv")
    try:
        omt_solve(initial, cap, omega, tol=1e-3, boundary=loop, diagnostics_path=diagnostics)
    except FlipError:
        pass  # a far-off radius may fold the centroid map; the transport itself must converge
    with open(diagnostics) as f:
        rows = list(csv.DictReader(f))
    assert float(rows[-1]["residual"]) <= 1e-3
    energies = [float(row["energy"]) for row in rows]
    assert all(later <= earlier for earlier, later in zip(energies, energies[1:]))


@pytest.mark.slow
def test_cap_becomes_area_preserving():
    half_angle = np.pi / 3
    cap = geodesic_cap(half_angle, 1000)
    loop = validate_topology(cap).boundary
    radius = np.tan(half_angle / 2)
    initial = disk_conformal_flatten(cap).scaled(radius)
    omega = DomainPolygon.from_loop(initial.positions, loop, radius=radius)
    result = omt_solve(initial, cap, omega, tol=1e-4, boundary=loop)
    assert cap_from_radius(radius).zstar == pytest.approx(np.cos(half_angle))
    image = spherical_triangle_areas(cap_embed(result.map.positions), cap.faces)
    d_area = log_area_ratios(cap.face_areas, image)
    assert np.mean(np.abs(d_area)) <= 0.02
