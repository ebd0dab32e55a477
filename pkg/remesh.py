#!/usr/bin/env python3
"""
Parameterization-Based Remeshing

Builds regular meshes on a spherical cap and carries them back onto the
original surface through the inverse of a cap parameterization.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import shapely
from scipy.spatial import Delaunay
from shapely.strtree import STRtree

from capmap_errors import ArgumentError, CoverageError
from mesh_core import TriangleMesh, signed_areas_2d
from projection import CapSpec, cap_flatten, from_spherical_angles

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
MIN_UNIFORM_COUNT = 16
SNAP_LIMIT = 0.01


@dataclass
class CapSampling:
    """Unit vectors on the cap Z >= Z*, optionally triangulated."""

    points: np.ndarray
    spec: CapSpec
    faces: Optional[np.ndarray] = None
    boundary: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if np.any(np.abs(np.linalg.norm(self.points, axis=1) - 1.0) > 1e-12):
            raise ArgumentError("cap samples must be unit vectors")
        if np.any(self.points[:, 2] < self.spec.zstar - 1e-12):
            raise ArgumentError(f"cap samples must satisfy Z >= {self.spec.zstar:.6g}")

    def as_mesh(self) -> TriangleMesh:
        if self.faces is None:
            raise ArgumentError("sampling has no triangulation")
        return TriangleMesh(self.points, self.faces)


def cap_samples(spec: CapSpec, target_count: int) -> CapSampling:
    """Golden-angle equal-area spiral inside the cap plus evenly spaced boundary points."""
    if target_count < MIN_UNIFORM_COUNT:
        raise ArgumentError(f"cap mesh needs at least {MIN_UNIFORM_COUNT} points, got {target_count}")
    height = 1.0 - spec.zstar
    spacing = np.sqrt(2.0 * np.pi * height / target_count)
    ring = 2.0 * np.pi * np.sin(spec.theta_star)
    n_boundary = int(min(max(3, round(ring / spacing)), target_count // 2))
    n_inner = target_count - n_boundary

    k = np.arange(n_inner)
    z = 1.0 - height * (k + 0.5) / n_inner
    radial = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    inner = np.column_stack([radial * np.cos(k * GOLDEN_ANGLE), radial * np.sin(k * GOLDEN_ANGLE), z])

    phi = 2.0 * np.pi * np.arange(n_boundary) / n_boundary
    edge = np.column_stack([np.sin(spec.theta_star) * np.cos(phi), np.sin(spec.theta_star) * np.sin(phi),
                            np.full(n_boundary, spec.zstar)])
    points = np.vstack([inner, edge])
    points /= np.linalg.norm(points, axis=1)[:, None]
    points[n_inner:, 2] = np.maximum(points[n_inner:, 2], spec.zstar)
    return CapSampling(points=points, spec=spec, boundary=np.arange(n_inner, target_count))


def cap_uniform_mesh(spec: CapSpec, target_count: int) -> TriangleMesh:
    """Near-regular triangle mesh of the cap.

    Delaunay triangulation in the stereographic plane matches the spherical
    one because the projection preserves circles.
    """
    sampling = cap_samples(spec, target_count)
    plane = cap_flatten(sampling.points)
    faces = Delaunay(plane).simplices.astype(np.int64)
    flip = signed_areas_2d(plane, faces) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    sampling.faces = faces
    logger.debug(f"Uniform cap mesh: {len(sampling.points)} points, {len(faces)} faces")
    return sampling.as_mesh()


def latlong_cap_mesh(spec: CapSpec, n_theta: int, n_phi: int) -> Tuple[TriangleMesh, np.ndarray]:
    """Latitude/longitude grid on the cap with a pole fan.

    Returns:
        (mesh, per-vertex theta labels)
    """
    if n_theta < 2:
        raise ArgumentError(f"n_theta must be >= 2, got {n_theta}")
    if n_phi < 3:
        raise ArgumentError(f"n_phi must be >= 3, got {n_phi}")
    theta = np.repeat(np.arange(1, n_theta + 1) * spec.theta_star / n_theta, n_phi)
    phi = np.tile(2.0 * np.pi * np.arange(n_phi) / n_phi, n_theta)
    points = np.vstack([[0.0, 0.0, 1.0], from_spherical_angles(theta, phi)])
    labels = np.concatenate([[0.0], theta])

    def vertex(j, l):
        return 1 + (j - 1) * n_phi + (l % n_phi)

    faces = [(0, vertex(1, l), vertex(1, l + 1)) for l in range(n_phi)]
    for j in range(1, n_theta):
        for l in range(n_phi):
            a, b = vertex(j, l), vertex(j, l + 1)
            c, d = vertex(j + 1, l + 1), vertex(j + 1, l)
            faces.append((a, d, c))
            faces.append((a, c, b))
    return TriangleMesh(points, np.asarray(faces, dtype=np.int64)), labels


@dataclass
class PullbackResult:
    mesh: TriangleMesh
    faces: np.ndarray
    barycentric: np.ndarray
    snapped: np.ndarray

    @property
    def snapped_fraction(self) -> float:
        return len(self.snapped) / max(len(self.faces), 1)


def _barycentric_2d(q: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Affine coordinates of q in each triangle, negative outside it."""
    e1, e2, d = b - a, c - a, q - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    u = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
    v = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
    return np.column_stack([1.0 - u - v, u, v])


def pullback(cap, source: TriangleMesh, cap_mesh: TriangleMesh, strict: bool = False) -> PullbackResult:
    """Carry a cap mesh onto the source surface through the inverse parameterization.

    Each cap vertex is flattened, located among the planar image faces and
    interpolated barycentrically on the source. Points outside every image
    face are snapped to the nearest one and use its affine extension, so
    remeshed faces in the uncovered region keep a nonzero area.

    Args:
        cap: CapMap of the source surface
        source: Surface the CapMap parameterizes
        cap_mesh: Mesh whose vertices lie on the cap
        strict: Raise instead of warning when more than 1% of points snap

    Raises:
        CoverageError: strict mode and too many snapped points
    """
    if cap.n_vertices != source.n_vertices:
        raise ArgumentError("parameterization and source mesh have different vertex counts")
    planar = cap.planar_positions()
    covered = np.setdiff1d(np.arange(len(cap.faces)), np.asarray(cap.refilled_faces, dtype=np.int64))
    triangles = planar[cap.faces[covered]]
    tree = STRtree(shapely.polygons(triangles))

    queries = cap_flatten(cap_mesh.vertices)
    points = shapely.points(queries)
    hits = tree.query(points, predicate="intersects")
    owner = np.full(len(queries), -1, dtype=np.int64)
    if hits.shape[1]:
        first = np.unique(hits[0], return_index=True)[1]
        owner[hits[0, first]] = hits[1, first]
    snapped = np.flatnonzero(owner < 0)
    if len(snapped):
        nearest = tree.query_nearest(points[snapped], return_distance=False)
        first = np.unique(nearest[0], return_index=True)[1]
        owner[snapped[nearest[0, first]]] = nearest[1, first]

    tri = triangles[owner]
    bary = _barycentric_2d(queries, tri[:, 0], tri[:, 1], tri[:, 2])
    faces = covered[owner]
    surface = np.einsum("ij,ijk->ik", bary, source.vertices[source.faces[faces]])
    result = PullbackResult(mesh=TriangleMesh(surface, cap_mesh.faces), faces=faces, barycentric=bary,
                            snapped=snapped)

    if result.snapped_fraction > SNAP_LIMIT:
        message = f"{len(snapped)} of {len(queries)} points ({100 * result.snapped_fraction:.1f}%) fell outside the parameterized region"
        if strict:
            raise CoverageError(message, stage="remesh")
        logger.warning(f"⚠️ {message}; snapped to the nearest face")
    elif len(snapped):
        logger.debug(f"Snapped {len(snapped)} point(s) onto the nearest face")
    return result
