#!/usr/bin/env python3
"""
Tests for mesh_core: construction checks, file I/O, areas and angles,
topology classification, alignment and closest-point queries
"""

import numpy as np
import pytest

from capmap_errors import ArgumentError, DegenerateGeometryError, MeshFormatError, TopologyError
from conftest import make_grid
from mesh_core import (
    TriangleMesh,
    align_to_axis,
    closest_point,
    closest_points_on_triangles,
    face_adjacency,
    face_geometry,
    load_mesh,
    rotation_to_z,
    save_mesh,
    validate_topology,
    vertex_areas,
)
from surface_generator import icosphere, torus


def _write(path, text):
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def test_arrays_are_read_only(tetrahedron):
    with pytest.raises(ValueError):
        tetrahedron.vertices[0, 0] = 5.0
    with pytest.raises(ValueError):
        tetrahedron.faces[0, 0] = 1


def test_out_of_range_face_index():
    with pytest.raises(TopologyError):
        TriangleMesh(np.eye(3), [[0, 1, 3]])


def test_repeated_vertex_in_face():
    with pytest.raises(TopologyError):
        TriangleMesh(np.eye(3), [[0, 1, 1]])


def test_collinear_face_is_degenerate():
    vertices = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
    with pytest.raises(DegenerateGeometryError) as excinfo:
        TriangleMesh(vertices, [[0, 1, 2]])
    assert excinfo.value.faces == [0]


def test_bad_vertex_shape():
    with pytest.raises(ArgumentError):
        TriangleMesh(np.zeros((3, 2)), [[0, 1, 2]])


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def test_single_triangle_obj(tmp_path):
    path = _write(tmp_path / "tri.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    mesh = load_mesh(path)
    assert mesh.n_faces == 1
    assert mesh.total_area() == pytest.approx(0.5)


@pytest.mark.parametrize("ext", [".obj", ".off", ".ply"])
def test_tetrahedron_save_load(tmp_path, tetrahedron, ext):
    path = str(tmp_path / f"tet{ext}")
    save_mesh(path, tetrahedron)
    loaded = load_mesh(path)
    np.testing.assert_array_equal(loaded.faces, tetrahedron.faces)
    np.testing.assert_allclose(loaded.vertices, tetrahedron.vertices, atol=1e-9)


def test_ply_writes_vertex_channels(tmp_path, tetrahedron):
    path = str(tmp_path / "tet.ply")
    save_mesh(path, tetrahedron, {"theta": np.arange(4, dtype=float)})
    text = open(path).read()
    assert "property double theta" in text
    # extra columns are ignored on load
    loaded = load_mesh(path)
    np.testing.assert_allclose(loaded.vertices, tetrahedron.vertices, atol=1e-9)


def test_off_quad_face_is_topology_error(tmp_path):
    path = _write(tmp_path / "quad.off", "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(TopologyError):
        load_mesh(path)


def test_obj_zero_index_reports_line(tmp_path):
    path = _write(tmp_path / "zero.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
    with pytest.raises(MeshFormatError) as excinfo:
        load_mesh(path)
    assert excinfo.value.line == 4


def test_binary_ply_is_rejected(tmp_path):
    path = _write(tmp_path / "bin.ply", "ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(MeshFormatError):
        load_mesh(path)


def test_missing_file_is_argument_error(tmp_path):
    with pytest.raises(ArgumentError):
        load_mesh(str(tmp_path / "nope.obj"))


def test_unknown_extension(tmp_path):
    path = _write(tmp_path / "mesh.stl", "solid\n")
    with pytest.raises(MeshFormatError):
        load_mesh(path)


# ---------------------------------------------------------------------------
# Areas and angles
# ---------------------------------------------------------------------------

def test_vertex_areas_right_triangle():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(vertex_areas(mesh), [1 / 6] * 3)


def test_vertex_areas_regular_tetrahedron(tetrahedron):
    np.testing.assert_allclose(vertex_areas(tetrahedron), np.sqrt(3) / 4, rtol=1e-12)


def test_vertex_areas_sum_to_total():
    sphere = icosphere(3)
    assert sphere.n_vertices == 642
    assert vertex_areas(sphere).sum() == pytest.approx(sphere.total_area(), rel=1e-12)


def test_equilateral_triangle_geometry():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]], [[0, 1, 2]])
    geometry = face_geometry(mesh)
    assert geometry.areas[0] == pytest.approx(np.sqrt(3) / 4)
    np.testing.assert_allclose(geometry.angles[0], np.pi / 3)


def test_right_isosceles_angles():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(face_geometry(mesh).angles[0], [np.pi / 2, np.pi / 4, np.pi / 4])


def test_angle_sums(rng):
    points = rng.normal(size=(30, 3))
    faces = np.arange(30).reshape(10, 3)
    geometry = face_geometry(TriangleMesh(points, faces))
    np.testing.assert_allclose(geometry.angles.sum(axis=1), np.pi, atol=1e-9)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def test_icosphere_is_closed():
    info = validate_topology(icosphere(2))
    assert info.kind == "closed"
    assert info.euler == 2
    assert info.boundary is None


def test_icosphere_minus_face_is_open():
    sphere = icosphere(2)
    info = validate_topology(sphere.without_faces([0]))
    assert info.kind == "open"
    assert sorted(info.boundary.tolist()) == sorted(sphere.faces[0].tolist())


def test_grid_boundary_loop(grid_mesh):
    info = validate_topology(grid_mesh)
    assert info.kind == "open"
    assert info.euler == 1
    assert len(info.boundary) == 4 * 5
    assert info.boundary[0] == 0


def test_classification_ignores_face_and_vertex_order(rng):
    grid = make_grid(7)
    base = validate_topology(grid)

    shuffled = validate_topology(TriangleMesh(grid.vertices, grid.faces[rng.permutation(grid.n_faces)]))
    assert (shuffled.kind, shuffled.euler, shuffled.n_edges) == (base.kind, base.euler, base.n_edges)
    np.testing.assert_array_equal(shuffled.boundary, base.boundary)

    perm = rng.permutation(grid.n_vertices)
    relabelled = validate_topology(TriangleMesh(grid.vertices[perm], np.argsort(perm)[grid.faces]))
    assert (relabelled.kind, relabelled.euler, relabelled.n_edges) == (base.kind, base.euler, base.n_edges)
    loop = perm[relabelled.boundary].tolist()
    start = loop.index(int(base.boundary[0]))
    assert loop[start:] + loop[:start] == base.boundary.tolist()

    sphere = icosphere(2)
    info = validate_topology(TriangleMesh(sphere.vertices, sphere.faces[rng.permutation(sphere.n_faces)]))
    assert (info.kind, info.euler) == ("closed", 2)


def test_torus_is_rejected():
    with pytest.raises(TopologyError, match="Euler"):
        validate_topology(torus())


def test_inconsistent_orientation(octahedron):
    faces = octahedron.faces.copy()
    faces[0] = faces[0][[0, 2, 1]]
    with pytest.raises(TopologyError, match="orientation"):
        validate_topology(TriangleMesh(octahedron.vertices, faces))


def test_two_boundary_loops():
    grid = make_grid(4)
    shifted = grid.vertices + [5.0, 0.0, 0.0]
    mesh = TriangleMesh(np.vstack([grid.vertices, shifted]), np.vstack([grid.faces, grid.faces + grid.n_vertices]))
    with pytest.raises(TopologyError, match="boundary loops"):
        validate_topology(mesh)


def test_isolated_vertex():
    with pytest.raises(TopologyError, match="isolated"):
        validate_topology(TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]]))


def test_face_adjacency_counts_interior_edges(octahedron, grid_mesh):
    assert len(face_adjacency(octahedron)) == 12
    info = validate_topology(grid_mesh)
    assert len(face_adjacency(grid_mesh)) == info.n_edges - len(info.boundary)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def test_z_axis_is_identity():
    sphere = icosphere(1)
    aligned = align_to_axis(sphere, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(aligned.vertices, sphere.vertices, atol=1e-12)


def test_prolate_long_axis_goes_to_z():
    sphere = icosphere(2)
    ellipsoid = sphere.with_vertices(sphere.vertices * [3.0, 1.0, 1.0])
    aligned = align_to_axis(ellipsoid)
    extent = np.ptp(aligned.vertices, axis=0)
    assert extent[2] == pytest.approx(np.ptp(ellipsoid.vertices[:, 0]), abs=1e-6)
    assert extent[2] > 2.5 * max(extent[0], extent[1])


def test_minus_z_axis_is_rigid():
    sphere = icosphere(1)
    aligned = align_to_axis(sphere, np.array([0.0, 0.0, -1.0]))
    np.testing.assert_allclose(aligned.vertices[:, 2], -sphere.vertices[:, 2], atol=1e-12)
    before = np.linalg.norm(sphere.vertices[:, None] - sphere.vertices[None], axis=2)
    after = np.linalg.norm(aligned.vertices[:, None] - aligned.vertices[None], axis=2)
    np.testing.assert_allclose(after, before, atol=1e-12)


def test_rotation_to_z(rng):
    axis = rng.normal(size=3)
    rotation = rotation_to_z(axis)
    np.testing.assert_allclose(rotation @ (axis / np.linalg.norm(axis)), [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rotation) == pytest.approx(1.0)


def test_zero_axis_is_rejected():
    with pytest.raises(ArgumentError):
        rotation_to_z(np.zeros(3))


# ---------------------------------------------------------------------------
# Closest point
# ---------------------------------------------------------------------------

def test_query_on_vertex(grid_mesh):
    result = closest_point(grid_mesh, grid_mesh.vertices[7])
    np.testing.assert_allclose(result.points[0], grid_mesh.vertices[7], atol=1e-15)
    assert result.distances[0] == pytest.approx(0.0, abs=1e-15)


def test_query_above_planar_mesh(grid_mesh):
    query = np.array([0.43, 0.61, 1.0])
    result = closest_point(grid_mesh, query)
    assert result.distances[0] == pytest.approx(1.0)
    np.testing.assert_allclose(result.points[0], [0.43, 0.61, 0.0], atol=1e-12)


def test_queries_match_brute_force(rng):
    sphere = icosphere(2)
    queries = rng.normal(size=(1000, 3)) * 0.8
    result = closest_point(sphere, queries)

    tri = sphere.vertices[sphere.faces]
    brute = np.empty(len(queries))
    for i, q in enumerate(queries):
        p = np.repeat(q[None], sphere.n_faces, axis=0)
        points, _ = closest_points_on_triangles(p, tri[:, 0], tri[:, 1], tri[:, 2])
        brute[i] = np.linalg.norm(points - q, axis=1).min()
    np.testing.assert_allclose(result.distances, brute, atol=1e-12)


def test_barycentric_reproduces_point(rng):
    sphere = icosphere(2)
    result = closest_point(sphere, rng.normal(size=(50, 3)))
    corners = sphere.vertices[sphere.faces[result.faces]]
    np.testing.assert_allclose(np.einsum("ij,ijk->ik", result.barycentric, corners), result.points, atol=1e-12)
