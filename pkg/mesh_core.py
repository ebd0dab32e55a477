#!/usr/bin/env python3
"""
Triangle Mesh Core
Indexed triangle surfaces, ASCII mesh file I/O (OBJ/OFF/PLY), per-vertex and
per-face geometry, topology validation, Z-axis alignment and closest-point
queries. Every other capmap module builds on the TriangleMesh defined here.
"""

import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from capmap_errors import (
    ArgumentError,
    DegenerateGeometryError,
    MeshFormatError,
    TopologyError,
)

logger = logging.getLogger(__name__)

# Faces smaller than this fraction of the squared bounding-box diagonal are degenerate
DEGENERATE_AREA_RATIO = 1e-12

# Per-vertex scalar field with area units
VertexAreaField = np.ndarray


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable indexed triangle mesh.

    Faces are ordered vertex triples, counterclockwise with respect to the
    outward normal. Arrays are copied on construction and marked read-only,
    so a mesh can be shared between threads.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        faces = np.array(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ArgumentError(f"vertices must have shape (n, 3), got {vertices.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise TopologyError(f"faces must be vertex triples, got shape {faces.shape}")
        if not np.all(np.isfinite(vertices)):
            raise ArgumentError("vertex coordinates must be finite")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            bad = np.flatnonzero((faces < 0).any(axis=1) | (faces >= len(vertices)).any(axis=1))
            raise TopologyError(f"face index out of range in faces {bad[:5].tolist()}")
        repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if np.any(repeated):
            raise TopologyError(f"faces repeat a vertex: {np.flatnonzero(repeated)[:5].tolist()}")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

        if len(faces):
            areas = triangle_areas(vertices, faces)
            threshold = self.degenerate_area
            degenerate = np.flatnonzero(areas <= threshold)
            if len(degenerate):
                raise DegenerateGeometryError(
                    f"{len(degenerate)} face(s) below area threshold {threshold:.3g}, first: {degenerate[:5].tolist()}",
                    faces=degenerate[:20],
                )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @property
    def degenerate_area(self) -> float:
        return DEGENERATE_AREA_RATIO * self.bbox_diagonal ** 2

    @cached_property
    def face_areas(self) -> np.ndarray:
        areas = triangle_areas(self.vertices, self.faces)
        areas.setflags(write=False)
        return areas

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        directed = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.unique(np.sort(directed, axis=1), axis=0)

    @cached_property
    def locator(self) -> "SurfaceLocator":
        """Closest-point index, built on first use."""
        return SurfaceLocator(self)

    def total_area(self) -> float:
        return float(self.face_areas.sum())

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces)

    def without_faces(self, face_ids) -> "TriangleMesh":
        keep = np.ones(self.n_faces, dtype=bool)
        keep[np.asarray(face_ids, dtype=np.int64)] = False
        return TriangleMesh(self.vertices, self.faces[keep])


@dataclass(frozen=True)
class FaceGeometry:
    """Per-face areas and per-corner angles (radians); angles[f, k] sits at faces[f, k]."""

    areas: np.ndarray
    angles: np.ndarray


@dataclass(frozen=True)
class TopologyInfo:
    """Result of validate_topology."""

    kind: str
    euler: int
    n_edges: int
    boundary: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ClosestPoints:
    """Closest surface points for a batch of queries."""

    points: np.ndarray
    faces: np.ndarray
    distances: np.ndarray
    barycentric: np.ndarray


# ---------------------------------------------------------------------------
# Geometry helpers (work on raw arrays so planar maps can share them)
# ---------------------------------------------------------------------------

def triangle_areas(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unsigned triangle areas for 2-D or 3-D points."""
    points = np.asarray(points, dtype=float)
    a = points[faces[:, 0]]
    e1 = points[faces[:, 1]] - a
    e2 = points[faces[:, 2]] - a
    if points.shape[1] == 2:
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def signed_areas_2d(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Signed areas of planar triangles, positive for counterclockwise faces."""
    a = points[faces[:, 0]]
    e1 = points[faces[:, 1]] - a
    e2 = points[faces[:, 2]] - a
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def corner_angles(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Interior angle at each corner, computed as atan2(|u x v|, u . v)."""
    points = np.asarray(points, dtype=float)
    angles = np.empty((len(faces), 3))
    for k in range(3):
        p = points[faces[:, k]]
        u = points[faces[:, (k + 1) % 3]] - p
        v = points[faces[:, (k + 2) % 3]] - p
        if points.shape[1] == 2:
            cross = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        else:
            cross = np.linalg.norm(np.cross(u, v), axis=1)
        angles[:, k] = np.arctan2(cross, np.einsum("ij,ij->i", u, v))
    return angles


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray,
                                c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closest point on each triangle (a, b, c) to each query p.

    Row-wise Voronoi-region classification of the query against the
    triangle's vertices, edges and interior. Works in 2-D and 3-D.

    Returns:
        (closest points, barycentric weights for a, b, c)
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    ones, zeros = np.ones_like(d1), np.zeros_like(d1)
    conditions = [in_a, in_b, in_ab, in_c, in_ac, in_bc]
    wb = np.select(conditions, [zeros, ones, t_ab, zeros, zeros, 1.0 - t_bc], default=v_in)
    wc = np.select(conditions, [zeros, zeros, zeros, ones, t_ac, t_bc], default=w_in)
    wb = np.nan_to_num(wb)
    wc = np.nan_to_num(wc)
    wa = 1.0 - wb - wc
    bary = np.column_stack([wa, wb, wc])
    closest = wa[:, None] * a + wb[:, None] * b + wc[:, None] * c
    return closest, bary


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _format_float(value: float) -> str:
    return repr(float(value))


def _resolve_obj_index(token: str, n_vertices: int, line_no: int, path: str) -> int:
    raw = token.split("/")[0]
    try:
        index = int(raw)
    except ValueError:
        raise MeshFormatError(f"bad face index '{token}'", line=line_no, path=path)
    if index < 0:
        return n_vertices + index
    if index == 0:
        raise MeshFormatError("OBJ indices are 1-based, found 0", line=line_no, path=path)
    return index - 1


def _load_obj(path: str) -> TriangleMesh:
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshFormatError(f"bad vertex line '{line}'", line=line_no, path=path)
                if len(vertices[-1]) != 3:
                    raise MeshFormatError("vertex needs 3 coordinates", line=line_no, path=path)
            elif tag == "f":
                if len(parts) != 4:
                    raise TopologyError(f"{path}:{line_no}: non-triangular face with {len(parts) - 1} vertices")
                faces.append([_resolve_obj_index(t, len(vertices), line_no, path) for t in parts[1:]])
            # normals, texture coordinates, groups and materials pass through unread
    return TriangleMesh(np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _data_lines(path: str):
    """Yield (line number, stripped content) skipping comments and blanks."""
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line_no, line in enumerate(f, start=1):
            content = line.split("#", 1)[0].strip()
            if content:
                yield line_no, content


def _load_off(path: str) -> TriangleMesh:
    lines = _data_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise MeshFormatError("empty OFF file", path=path)
    if not header.startswith("OFF"):
        raise MeshFormatError("missing OFF header", line=line_no, path=path)
    rest = header[3:].split()
    try:
        if not rest:
            line_no, counts_line = next(lines)
            rest = counts_line.split()
        n_vertices, n_faces = int(rest[0]), int(rest[1])
    except (StopIteration, ValueError, IndexError):
        raise MeshFormatError("bad OFF counts line", line=line_no, path=path)

    vertices = np.empty((n_vertices, 3))
    faces = np.empty((n_faces, 3), dtype=np.int64)
    try:
        for i in range(n_vertices):
            line_no, content = next(lines)
            vertices[i] = [float(x) for x in content.split()[:3]]
        for i in range(n_faces):
            line_no, content = next(lines)
            parts = content.split()
            if int(parts[0]) != 3:
                raise TopologyError(f"{path}:{line_no}: non-triangular face with {parts[0]} vertices")
            faces[i] = [int(x) for x in parts[1:4]]
    except StopIteration:
        raise MeshFormatError("unexpected end of file", line=line_no, path=path)
    except ValueError:
        raise MeshFormatError(f"cannot parse '{content}'", line=line_no, path=path)
    return TriangleMesh(vertices, faces)


def _load_ply(path: str) -> TriangleMesh:
    with open(path, "rb") as f:
        raw = f.read()
    text = raw.decode("latin-1")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError("missing 'ply' magic", line=1, path=path)

    elements: List[Tuple[str, int, List[str]]] = []
    header_end = None
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise MeshFormatError(f"only ASCII PLY is supported, got '{line.strip()}'", line=line_no, path=path)
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", line=line_no, path=path)
            elements[-1][2].append(parts[-1])
        elif parts[0] == "end_header":
            header_end = line_no
            break
    if header_end is None:
        raise MeshFormatError("missing end_header", path=path)

    vertices = None
    faces = None
    cursor = header_end
    for name, count, props in elements:
        block = lines[cursor:cursor + count]
        if len(block) < count:
            raise MeshFormatError(f"expected {count} {name} rows", line=cursor + len(block), path=path)
        if name == "vertex":
            try:
                ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
            except ValueError:
                raise MeshFormatError("vertex element lacks x/y/z", path=path)
            vertices = np.empty((count, 3))
            for k, row in enumerate(block):
                try:
                    values = row.split()
                    vertices[k] = [float(values[ix]), float(values[iy]), float(values[iz])]
                except (ValueError, IndexError):
                    raise MeshFormatError(f"cannot parse vertex '{row}'", line=cursor + k + 1, path=path)
        elif name == "face":
            faces = np.empty((count, 3), dtype=np.int64)
            for k, row in enumerate(block):
                values = row.split()
                try:
                    n = int(values[0])
                    if n != 3:
                        raise TopologyError(f"{path}:{cursor + k + 1}: non-triangular face with {n} vertices")
                    faces[k] = [int(v) for v in values[1:4]]
                except (ValueError, IndexError):
                    raise MeshFormatError(f"cannot parse face '{row}'", line=cursor + k + 1, path=path)
        cursor += count
    if vertices is None or faces is None:
        raise MeshFormatError("PLY needs vertex and face elements", path=path)
    return TriangleMesh(vertices, faces)


def load_mesh(path: str) -> TriangleMesh:
    """Load an ASCII OBJ, OFF or PLY triangle mesh."""
    if not os.path.exists(path):
        raise ArgumentError(f"mesh file not found: {path}")
    ext = os.path.splitext(path)[1].lower()
    loaders = {".obj": _load_obj, ".off": _load_off, ".ply": _load_ply}
    if ext not in loaders:
        raise MeshFormatError(f"unsupported mesh extension '{ext}'", path=path)
    mesh = loaders[ext](path)
    logger.debug(f"Loaded {path}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return mesh


def save_mesh(path: str, mesh: TriangleMesh, vertex_scalars: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write a mesh as ASCII OBJ, OFF or PLY.

    Args:
        path: Output file; the extension selects the format
        mesh: Mesh to write
        vertex_scalars: Extra per-vertex float channels, written only to PLY
    """
    ext = os.path.splitext(path)[1].lower()
    vertex_scalars = vertex_scalars or {}
    if vertex_scalars and ext != ".ply":
        logger.warning(f"⚠️ Per-vertex channels {sorted(vertex_scalars)} are only written to PLY, dropped for {path}")
    rows: List[str] = []
    if ext == ".obj":
        rows.append("# capmap mesh")
        rows.extend("v " + " ".join(_format_float(x) for x in v) for v in mesh.vertices)
        rows.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    elif ext == ".off":
        rows.append("OFF")
        rows.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        rows.extend(" ".join(_format_float(x) for x in v) for v in mesh.vertices)
        rows.extend(f"3 {a} {b} {c}" for a, b, c in mesh.faces)
    elif ext == ".ply":
        names = sorted(vertex_scalars)
        for name in names:
            if len(vertex_scalars[name]) != mesh.n_vertices:
                raise ArgumentError(f"channel '{name}' has {len(vertex_scalars[name])} values for {mesh.n_vertices} vertices")
        rows.extend(["ply", "format ascii 1.0", "comment capmap mesh", f"element vertex {mesh.n_vertices}",
                     "property double x", "property double y", "property double z"])
        rows.extend(f"property double {name}" for name in names)
        rows.extend([f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"])
        columns = [mesh.vertices] + [np.asarray(vertex_scalars[n], dtype=float).reshape(-1, 1) for n in names]
        table = np.hstack(columns)
        rows.extend(" ".join(_format_float(x) for x in row) for row in table)
        rows.extend(f"3 {a} {b} {c}" for a, b, c in mesh.faces)
    else:
        raise MeshFormatError(f"unsupported mesh extension '{ext}'", path=path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    logger.debug(f"Saved {path}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")


def mesh_io(path: str, direction: str, mesh: Optional[TriangleMesh] = None) -> Optional[TriangleMesh]:
    """Load or save a mesh depending on direction ('load' or 'save')."""
    if direction == "load":
        return load_mesh(path)
    if direction == "save":
        if mesh is None:
            raise ArgumentError("save needs a mesh")
        save_mesh(path, mesh)
        return None
    raise ArgumentError(f"direction must be 'load' or 'save', got '{direction}'")


# ---------------------------------------------------------------------------
# Geometry queries
# ---------------------------------------------------------------------------

def vertex_areas(mesh: TriangleMesh) -> VertexAreaField:
    """One third of the area of every incident face, summed per vertex."""
    shares = np.repeat(mesh.face_areas / 3.0, 3)
    return np.bincount(mesh.faces.ravel(), weights=shares, minlength=mesh.n_vertices)


def face_geometry(mesh: TriangleMesh) -> FaceGeometry:
    """Face areas and corner angles."""
    areas = np.array(mesh.face_areas)
    degenerate = np.flatnonzero(areas <= mesh.degenerate_area)
    if len(degenerate):
        raise DegenerateGeometryError(f"degenerate face {int(degenerate[0])}", faces=degenerate)
    return FaceGeometry(areas=areas, angles=corner_angles(mesh.vertices, mesh.faces))


def validate_topology(mesh: TriangleMesh) -> TopologyInfo:
    """Classify a mesh as a topological disk ('open') or sphere ('closed').

    Raises:
        TopologyError: non-manifold edge, inconsistent orientation, isolated
            vertex, several boundary loops or a wrong Euler characteristic
    """
    if mesh.n_faces == 0:
        raise TopologyError("mesh has no faces")
    referenced = np.zeros(mesh.n_vertices, dtype=bool)
    referenced[mesh.faces.ravel()] = True
    if not referenced.all():
        raise TopologyError(f"{int((~referenced).sum())} isolated vertices")

    directed = mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    undirected, inverse, counts = np.unique(np.sort(directed, axis=1), axis=0,
                                            return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        bad = undirected[counts > 2][0]
        raise TopologyError(f"non-manifold edge ({bad[0]}, {bad[1]}) shared by {counts.max()} faces")
    _, directed_counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(directed_counts > 1):
        raise TopologyError("inconsistent face orientation: a directed edge appears twice")

    n_edges = len(undirected)
    euler = mesh.n_vertices - n_edges + mesh.n_faces
    boundary_edges = directed[counts[inverse] == 1]

    if len(boundary_edges) == 0:
        if euler != 2:
            raise TopologyError(f"closed mesh has Euler characteristic {euler}, expected 2 (genus 0)")
        return TopologyInfo(kind="closed", euler=euler, n_edges=n_edges)

    successor: Dict[int, int] = {}
    for u, v in boundary_edges:
        if int(u) in successor:
            raise TopologyError(f"non-manifold boundary vertex {int(u)}")
        successor[int(u)] = int(v)

    loops: List[List[int]] = []
    unvisited = set(successor)
    while unvisited:
        start = min(unvisited)
        loop = [start]
        unvisited.discard(start)
        current = successor[start]
        while current != start:
            if current not in unvisited:
                raise TopologyError(f"boundary walk broke at vertex {current}")
            loop.append(current)
            unvisited.discard(current)
            current = successor[current]
        loops.append(loop)
    if len(loops) > 1:
        raise TopologyError(f"found {len(loops)} boundary loops, expected exactly one")
    if euler != 1:
        raise TopologyError(f"open mesh has Euler characteristic {euler}, expected 1 (disk)")
    return TopologyInfo(kind="open", euler=euler, n_edges=n_edges, boundary=np.array(loops[0], dtype=np.int64))


def rotation_to_z(axis: np.ndarray) -> np.ndarray:
    """Rotation matrix taking the unit direction of `axis` to +Z."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if not np.isfinite(norm) or norm < 1e-15:
        raise ArgumentError("alignment axis must be nonzero")
    a = axis / norm
    z = np.array([0.0, 0.0, 1.0])
    c = float(a @ z)
    if c > 1.0 - 1e-15:
        return np.eye(3)
    if c < -1.0 + 1e-15:
        # half turn about the x axis
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(a, z)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def principal_up_axis(mesh: TriangleMesh) -> np.ndarray:
    """Largest-variance direction, signed so the side with more area points up."""
    centroid = mesh.vertices.mean(axis=0)
    covariance = np.cov((mesh.vertices - centroid).T)
    _, eigenvectors = np.linalg.eigh(covariance)
    axis = eigenvectors[:, -1]
    face_centers = mesh.vertices[mesh.faces].mean(axis=1)
    side = (face_centers - centroid) @ axis
    upper = mesh.face_areas[side > 0].sum()
    lower = mesh.face_areas[side < 0].sum()
    return axis if upper >= lower else -axis


def align_to_axis(mesh: TriangleMesh, axis: Optional[np.ndarray] = None) -> TriangleMesh:
    """Rotate a mesh so `axis` (default: principal_up_axis) points along +Z."""
    if axis is None:
        axis = principal_up_axis(mesh)
    rotation = rotation_to_z(axis)
    return mesh.with_vertices(mesh.vertices @ rotation.T)


class SurfaceLocator:
    """Closest-point index over the faces of one mesh.

    A k-d tree over face centroids plus each face's bounding radius: after an
    exact distance d to the face with the nearest centroid, only faces whose
    centroid lies within d + max radius can be closer, and those are all
    checked exactly.
    """

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        corners = mesh.vertices[mesh.faces]
        self.centroids = corners.mean(axis=1)
        self.radii = np.linalg.norm(corners - self.centroids[:, None, :], axis=2).max(axis=1)
        self.max_radius = float(self.radii.max()) if len(self.radii) else 0.0
        self.tree = cKDTree(self.centroids)

    def _exact(self, queries: np.ndarray, face_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        tri = self.mesh.vertices[self.mesh.faces[face_ids]]
        return closest_points_on_triangles(queries, tri[:, 0], tri[:, 1], tri[:, 2])

    def query(self, queries: np.ndarray) -> ClosestPoints:
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        _, nearest = self.tree.query(queries, k=1)
        first, _ = self._exact(queries, nearest)
        upper = np.linalg.norm(first - queries, axis=1)

        candidates = self.tree.query_ball_point(queries, upper + self.max_radius + 1e-12)
        lengths = np.array([len(c) for c in candidates], dtype=np.int64)
        owner = np.repeat(np.arange(len(queries)), lengths)
        face_ids = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates]) if lengths.sum() else nearest
        points, bary = self._exact(queries[owner], face_ids)
        distances = np.linalg.norm(points - queries[owner], axis=1)

        # best candidate per query: sort by (owner, distance) and take the first of each run
        order = np.lexsort((distances, owner))
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        best = order[starts]
        return ClosestPoints(points=points[best], faces=face_ids[best], distances=distances[best],
                             barycentric=bary[best])


def closest_point(mesh: TriangleMesh, query: np.ndarray) -> ClosestPoints:
    """Closest point(s) on the mesh surface.

    Args:
        mesh: Surface to query; its spatial index is built once and reused
        query: One 3-D point or an (k, 3) array

    Returns:
        ClosestPoints with one row per query
    """
    return mesh.locator.query(query)


def face_adjacency(mesh: TriangleMesh) -> np.ndarray:
    """Pairs of faces sharing an edge, as rows (face_a, face_b, v0, v1)."""
    directed = mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    owners = np.repeat(np.arange(mesh.n_faces), 3)
    keys = np.sort(directed, axis=1)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    keys, owners = keys[order], owners[order]
    same = np.all(keys[1:] == keys[:-1], axis=1)
    idx = np.flatnonzero(same)
    return np.column_stack([owners[idx], owners[idx + 1], keys[idx, 0], keys[idx, 1]])


def log_area_ratios(source_areas: np.ndarray, image_areas: np.ndarray) -> np.ndarray:
    """ln of each face's image-area share over its source-area share."""
    source_areas = np.asarray(source_areas, dtype=float)
    image_areas = np.asarray(image_areas, dtype=float)
    return np.log((image_areas / image_areas.sum()) / (source_areas / source_areas.sum()))
