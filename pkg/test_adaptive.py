#!/usr/bin/env python3
"""
Tests for adaptive: pipeline options, the conformality objective, the radius
search, closed-surface puncturing and the two end-to-end pipelines
"""

import json
from pathlib import Path

import numpy as np
import pytest

from adaptive import (
    CapMap,
    PipelineOptions,
    PipelineReport,
    conformal_energy,
    find_puncture_quad,
    optimize_radius,
    parameterize_closed,
    parameterize_disk_omt,
    parameterize_open,
    sweep_lambda,
    _quad_from_pair,
)
from capmap_errors import ArgumentError, TopologyError
from conformal import PlanarMap, disk_conformal_flatten
from mesh_core import face_adjacency, validate_topology
from surface_generator import blob, flat_disk, geodesic_cap, icosphere, stretched_cap


# ---------------------------------------------------------------------------
# Options
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("changes", [
    {"lam": 1.5},
    {"r_bounds": (2.0, 1.0)},
    {"r_bounds": (0.0, 1.0)},
    {"rtol": 0.0},
    {"domain_mode": "torus"},
    {"energy_measure": "volume"},
    {"omt_method": "lbfgs"},
    {"fixed_radius": -1.0},
    {"rho_side": 0.5},
    {"axis": (0.0, 0.0, 0.0)},
])
def test_invalid_options(changes):
    with pytest.raises(ArgumentError):
        PipelineOptions(**changes).validate()


def test_resolved_radius():
    assert PipelineOptions().resolved_radius() is None
    assert PipelineOptions(domain_mode="hemisphere").resolved_radius() == 1.0
    assert PipelineOptions(domain_mode="sphere").resolved_radius() == 40.0
    assert PipelineOptions(domain_mode="hemisphere", fixed_radius=2.5).resolved_radius() == 2.5


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def test_isometric_map_has_zero_energy(grid_mesh):
    planar = PlanarMap(grid_mesh.vertices[:, :2], grid_mesh.faces)
    assert conformal_energy(grid_mesh, planar) == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("measure", ["planar", "cap"])
def test_stretched_map_energy(grid_mesh, measure):
    planar = PlanarMap(grid_mesh.vertices[:, :2] * [2.0, 1.0], grid_mesh.faces)
    assert conformal_energy(grid_mesh, planar, measure) == pytest.approx(1.0 / 9.0, rel=1e-10)


def test_energy_stays_below_one(rng):
    cap = geodesic_cap(np.pi / 3, 400)
    g = disk_conformal_flatten(cap)
    squeezed = PlanarMap(g.positions * [3.0, 0.5], g.faces)
    assert 0.0 <= conformal_energy(cap, squeezed) < 1.0


def test_unknown_energy_measure(grid_mesh):
    planar = PlanarMap(grid_mesh.vertices[:, :2], grid_mesh.faces)
    with pytest.raises(ArgumentError):
        conformal_energy(grid_mesh, planar, "volume")


def test_reversed_bounds_are_rejected():
    cap = geodesic_cap(np.pi / 3, 200)
    g = disk_conformal_flatten(cap)
    with pytest.raises(ArgumentError):
        optimize_radius(cap, g, (2.0, 1.0), 0.01, validate_topology(cap).boundary)


# ---------------------------------------------------------------------------
# Puncture
# ---------------------------------------------------------------------------

def test_octahedron_puncture(octahedron):
    quad = find_puncture_quad(octahedron)
    assert not quad.fallback
    assert quad.side_ratio <= np.sqrt(2.0) + 1e-12
    assert quad.diagonal_ratio <= np.sqrt(2.0) + 1e-12
    bottom = int(np.argmin(octahedron.vertices[:, 2]))
    assert any(bottom in octahedron.faces[f] for f in quad.faces)
    assert len(set(quad.corners)) == 4


def test_puncture_corners_follow_boundary(octahedron):
    quad = find_puncture_quad(octahedron)
    loop = validate_topology(octahedron.without_faces(quad.faces)).boundary.tolist()
    start = loop.index(quad.corners[0])
    assert loop[start:] + loop[:start] == quad.corners


def test_icosphere_puncture_contract():
    sphere = icosphere(2)
    quad = find_puncture_quad(sphere)
    if quad.fallback:
        scores = [_quad_from_pair(sphere, int(fa), int(fb)).score for fa, fb, _, _ in face_adjacency(sphere)]
        assert quad.score == pytest.approx(min(scores))
    else:
        assert quad.side_ratio <= 1.5
        assert quad.diagonal_ratio <= 1.5


def test_icosphere_passes_relaxed_thresholds():
    quad = find_puncture_quad(icosphere(3), rho_side=2.0, rho_diag=2.0)
    assert not quad.fallback
    assert quad.score <= 2.0


def test_needle_falls_back_to_best_pair(octahedron):
    needle = octahedron.with_vertices(octahedron.vertices * [1.0, 1.0, 20.0])
    quad = find_puncture_quad(needle)
    assert quad.fallback
    assert quad.to_dict()["fallback"] is True


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def test_open_pipeline_rejects_closed_mesh(octahedron):
    with pytest.raises(TopologyError) as excinfo:
        parameterize_open(octahedron)
    assert excinfo.value.stage == "validate"


def test_closed_pipeline_rejects_open_mesh(grid_mesh):
    with pytest.raises(TopologyError) as excinfo:
        parameterize_closed(grid_mesh)
    assert excinfo.value.stage == "validate"


@pytest.mark.slow
@pytest.mark.parametrize("half_angle", [np.pi / 4, np.pi / 2, 2 * np.pi / 3])
def test_cap_recovers_itself(half_angle):
    cap = geodesic_cap(half_angle, 5000)
    result, report = parameterize_open(cap)
    assert report.z_star == pytest.approx(np.cos(half_angle), abs=0.05)
    assert report.distortion["mean_abs_d_area"] <= 0.02
    assert report.distortion["mean_abs_d_angle"] <= 0.05
    loop = validate_topology(cap).boundary
    np.testing.assert_allclose(result.positions[loop, 2], result.spec.zstar, atol=1e-12)
    assert len(result.flipped_faces()) == 0
    assert set(report.timings) == {"validate", "flatten", "radius-search", "project", "metrics"}


@pytest.mark.slow
def test_adaptive_radius_beats_hemisphere_on_stretched_cap():
    surface = stretched_cap(2 * np.pi / 3, 2000)
    _, adaptive_report = parameterize_open(surface)
    _, hemisphere_report = parameterize_open(surface, PipelineOptions(domain_mode="hemisphere"))
    assert hemisphere_report.z_star == pytest.approx(0.0, abs=1e-12)
    assert adaptive_report.distortion["mean_abs_d_angle"] < hemisphere_report.distortion["mean_abs_d_angle"]
    assert adaptive_report.distortion["mean_abs_d_area"] <= hemisphere_report.distortion["mean_abs_d_area"] + 0.01


@pytest.mark.slow
def test_reported_radius_is_trace_argmin():
    _, report = parameterize_open(stretched_cap(np.pi / 3, 800))
    radii, energies = zip(*report.trace)
    assert len(radii) > 1
    assert report.r_star == radii[int(np.argmin(energies))]


@pytest.mark.slow
def test_uniform_scaling_changes_nothing():
    cap = geodesic_cap(np.pi / 3, 600)
    base, base_report = parameterize_open(cap)
    scaled, scaled_report = parameterize_open(cap.with_vertices(cap.vertices * 7.5))
    assert scaled_report.r_star == pytest.approx(base_report.r_star, abs=1e-6)
    np.testing.assert_allclose(scaled.positions, base.positions, atol=1e-6)
    for key, value in base_report.distortion.items():
        assert scaled_report.distortion[key] == pytest.approx(value, abs=1e-6)


@pytest.mark.slow
def test_flat_disk_maps_to_small_cap():
    _, report = parameterize_open(flat_disk(800))
    assert report.z_star > 0
    assert report.distortion["mean_abs_d_area"] <= 0.05


@pytest.mark.slow
def test_hemisphere_mode_uses_one_radius():
    cap = geodesic_cap(np.pi / 3, 600)
    _, report = parameterize_open(cap, PipelineOptions(domain_mode="hemisphere"))
    assert report.r_star == 1.0
    assert report.z_star == pytest.approx(0.0, abs=1e-12)
    assert len(report.trace) == 1


def _check_closed_contract(surface, cap, report):
    assert len(report.corners) == 4
    assert len(report.refilled_faces) == 2
    remaining = surface.without_faces(report.puncture["faces"])
    assert len(cap.faces) == remaining.n_faces + len(report.refilled_faces) == surface.n_faces
    assert {tuple(sorted(f)) for f in cap.faces.tolist()} == {tuple(sorted(f)) for f in surface.faces.tolist()}
    on_rim = np.flatnonzero(np.abs(cap.positions[:, 2] - cap.spec.zstar) <= 1e-9)
    assert sorted(on_rim.tolist()) == sorted(report.corners)
    assert np.all(np.delete(cap.positions[:, 2], on_rim) > cap.spec.zstar)
    assert len(cap.flipped_faces()) == 0
    assert report.distortion["mean_abs_d_area"] <= 0.1


@pytest.mark.slow
def test_icosphere_closed_pipeline():
    sphere = icosphere(3)
    cap, report = parameterize_closed(sphere)
    assert report.lam == 0.2
    _check_closed_contract(sphere, cap, report)
    _check_schema_keys_and_enums(json.loads(json.dumps(report.to_dict())))


@pytest.mark.slow
def test_blob_closed_pipeline():
    surface = blob(2562, seed=1)
    cap, report = parameterize_closed(surface)
    _check_closed_contract(surface, cap, report)


@pytest.mark.slow
def test_elongated_sphere_needs_large_cap():
    sphere = icosphere(3)
    _, report = parameterize_closed(sphere.with_vertices(sphere.vertices * [1.0, 1.0, 2.0]))
    assert report.z_star < 0


@pytest.mark.slow
def test_cap_map_rebuilds_from_report():
    sphere = icosphere(2)
    cap, report = parameterize_closed(sphere)
    rebuilt = CapMap.from_report(cap.as_mesh(), json.loads(json.dumps(report.to_dict())))
    np.testing.assert_allclose(rebuilt.positions, cap.positions, atol=1e-12)
    assert sorted(rebuilt.refilled_faces) == sorted(cap.refilled_faces)
    assert rebuilt.spec.zstar == pytest.approx(cap.spec.zstar)
    assert rebuilt.provenance == "closed"


@pytest.mark.slow
def test_lambda_sweep_rows():
    rows = sweep_lambda(icosphere(2), [0.0, 0.2])
    assert [row["lambda"] for row in rows] == [0.0, 0.2]
    assert all(np.isfinite(row["z_star"]) for row in rows)


def test_disk_baseline_rejects_closed_mesh(octahedron):
    with pytest.raises(TopologyError):
        parameterize_disk_omt(octahedron)


@pytest.mark.slow
def test_disk_baseline_is_area_preserving():
    cap = geodesic_cap(np.pi / 3, 600)
    planar, summary = parameterize_disk_omt(cap)
    loop = validate_topology(cap).boundary
    np.testing.assert_allclose(np.linalg.norm(planar.positions[loop], axis=1), 1.0, atol=1e-9)
    assert len(planar.flipped_faces()) == 0
    assert summary["omt_residual"] <= 1e-4
    assert summary["mean_abs_d_area"] <= 0.05


def _check_schema_keys_and_enums(data):
    with open(Path(__file__).parent / "schemas" / "report.schema.json") as f:
        schema = json.load(f)
    assert set(schema["required"]) <= set(data)
    assert set(data) <= set(schema["properties"])
    assert data["provenance"] in schema["properties"]["provenance"]["enum"]
    assert data["domain_mode"] in schema["properties"]["domain_mode"]["enum"]


def test_report_keys_and_enums_match_schema():
    report = PipelineReport("closed", trace=[(0.5, 0.01)], failures=[(3.0, "flip")], lam=0.2)
    data = json.loads(json.dumps(report.to_dict()))
    _check_schema_keys_and_enums(data)
    assert data["trace"] == [[0.5, 0.01]]
    assert data["failures"] == [[3.0, "flip"]]
