#!/usr/bin/env python3
"""
Synthetic Surface Generator
Deterministic test surfaces for the parameterization pipelines: geodesic and
stretched caps, a flat disk (open); icosphere, bumpy sphere, blob (closed,
genus 0) and a torus for topology rejection. Randomized shapes take a seed
and produce identical output for identical arguments.
"""

import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay

from capmap_errors import ArgumentError
from mesh_core import TriangleMesh, signed_areas_2d
from projection import CapSpec
from remesh import GOLDEN_ANGLE, cap_uniform_mesh

logger = logging.getLogger(__name__)

SHAPES = ("cap", "stretched-cap", "bumpy-sphere", "blob", "icosphere", "disk", "torus")


def _orient_outward(vertices: np.ndarray, faces: np.ndarray, center: Optional[np.ndarray] = None) -> np.ndarray:
    """Flip faces whose normal points toward the center of a star-shaped surface."""
    center = vertices.mean(axis=0) if center is None else center
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), (a + b + c) / 3.0 - center) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def _icosahedron():
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return vertices / np.linalg.norm(vertices, axis=1)[:, None], faces


def _subdivide(vertices: np.ndarray, faces: np.ndarray):
    """Split every face into four, pushing the new midpoints onto the unit sphere."""
    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    edges, inverse = np.unique(np.sort(directed, axis=1), axis=0, return_inverse=True)
    midpoints = vertices[edges].mean(axis=1)
    midpoints /= np.linalg.norm(midpoints, axis=1)[:, None]
    mid = (len(vertices) + inverse.reshape(-1)).reshape(-1, 3)
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]
    new_faces = np.concatenate([
        np.column_stack([a, ab, ca]), np.column_stack([ab, b, bc]),
        np.column_stack([ca, bc, c]), np.column_stack([ab, bc, ca]),
    ])
    return np.vstack([vertices, midpoints]), new_faces


def icosphere(subdivisions: int = 3) -> TriangleMesh:
    if subdivisions < 0:
        raise ArgumentError(f"subdivisions must be >= 0, got {subdivisions}")
    vertices, faces = _icosahedron()
    for _ in range(subdivisions):
        vertices, faces = _subdivide(vertices, faces)
    return TriangleMesh(vertices, _orient_outward(vertices, faces, np.zeros(3)))


def _subdivisions_for(n: int) -> int:
    level = 0
    while 10 * 4 ** level + 2 < n:
        level += 1
    return level


def geodesic_cap(half_angle: float, n: int = 2000) -> TriangleMesh:
    """Unit-sphere cap of polar half-angle half_angle around +Z."""
    if not 0.0 < half_angle < np.pi:
        raise ArgumentError(f"half angle must lie in (0, pi), got {half_angle}")
    return cap_uniform_mesh(CapSpec.from_zstar(float(np.cos(half_angle))), n)


def stretched_cap(half_angle: float, n: int = 2000, stretch: Sequence[float] = (1.6, 1.0, 0.7)) -> TriangleMesh:
    """Geodesic cap scaled anisotropically along the coordinate axes."""
    scale = np.asarray(stretch, dtype=float)
    if scale.shape != (3,) or np.any(scale <= 0):
        raise ArgumentError(f"stretch needs three positive factors, got {stretch}")
    cap = geodesic_cap(half_angle, n)
    return cap.with_vertices(cap.vertices * scale)


def _smooth_field(directions: np.ndarray, rng: np.random.Generator, terms: int = 6) -> np.ndarray:
    """Random smooth function on the sphere in [-1, 1]."""
    axes = rng.normal(size=(terms, 3))
    axes /= np.linalg.norm(axes, axis=1)[:, None]
    frequency = rng.integers(1, 4, size=terms)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=terms)
    field = np.cos(frequency * np.arccos(np.clip(directions @ axes.T, -1.0, 1.0)) + phase).sum(axis=1)
    return field / terms


def bumpy_sphere(n: int = 2562, seed: int = 0, amplitude: float = 0.15) -> TriangleMesh:
    """Unit sphere with radial bumps; stays star-shaped for amplitude < 1."""
    if not 0.0 <= amplitude < 1.0:
        raise ArgumentError(f"amplitude must lie in [0, 1), got {amplitude}")
    sphere = icosphere(_subdivisions_for(n))
    rng = np.random.default_rng(seed)
    radius = 1.0 + amplitude * _smooth_field(sphere.vertices, rng)
    return sphere.with_vertices(sphere.vertices * radius[:, None])


def blob(n: int = 2562, seed: int = 0) -> TriangleMesh:
    """Random ellipsoid with gentle bumps, elongated along a random axis."""
    sphere = icosphere(_subdivisions_for(n))
    rng = np.random.default_rng(seed)
    radius = 1.0 + 0.1 * _smooth_field(sphere.vertices, rng, terms=4)
    axes = np.sort(rng.uniform(0.6, 1.6, size=3))[::-1]
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    vertices = (sphere.vertices * radius[:, None] * axes) @ q.T
    return sphere.with_vertices(vertices)


def flat_disk(n: int = 1000) -> TriangleMesh:
    """Unit disk in Z = 0 from a sunflower pattern with an even boundary ring."""
    if n < 16:
        raise ArgumentError(f"disk needs at least 16 points, got {n}")
    n_boundary = max(8, int(round(np.sqrt(4.0 * np.pi * n))))
    n_inner = n - n_boundary
    k = np.arange(n_inner)
    rho = np.sqrt((k + 0.5) / n_inner) * (1.0 - 0.5 / np.sqrt(n))
    phi = 2.0 * np.pi * np.arange(n_boundary) / n_boundary
    plane = np.vstack([np.column_stack([rho * np.cos(k * GOLDEN_ANGLE), rho * np.sin(k * GOLDEN_ANGLE)]),
                       np.column_stack([np.cos(phi), np.sin(phi)])])
    faces = Delaunay(plane).simplices.astype(np.int64)
    flip = signed_areas_2d(plane, faces) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(np.column_stack([plane, np.zeros(len(plane))]), faces)


def torus(n_major: int = 32, n_minor: int = 16, major: float = 1.0, minor: float = 0.35) -> TriangleMesh:
    if n_major < 3 or n_minor < 3:
        raise ArgumentError("torus needs at least 3 segments in each direction")
    u = 2.0 * np.pi * np.arange(n_major) / n_major
    v = 2.0 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    vertices = np.column_stack([(ring * np.cos(uu)).ravel(), (ring * np.sin(uu)).ravel(),
                                (minor * np.sin(vv)).ravel()])
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = (i * n_minor + j).ravel()
    b = (((i + 1) % n_major) * n_minor + j).ravel()
    c = (((i + 1) % n_major) * n_minor + (j + 1) % n_minor).ravel()
    d = (i * n_minor + (j + 1) % n_minor).ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(vertices, faces)


def generate(shape: str, n: int = 2000, seed: int = 0, half_angle: float = np.pi / 3,
             **params) -> TriangleMesh:
    """Build a named shape.

    Args:
        shape: One of SHAPES
        n: Approximate vertex count
        seed: Seed for randomized shapes
        half_angle: Polar half-angle for cap shapes
        **params: Shape-specific extras (stretch, amplitude, subdivisions)
    """
    builders: Dict[str, Callable[[], TriangleMesh]] = {
        "cap": lambda: geodesic_cap(half_angle, n),
        "stretched-cap": lambda: stretched_cap(half_angle, n, params.get("stretch", (1.6, 1.0, 0.7))),
        "bumpy-sphere": lambda: bumpy_sphere(n, seed, params.get("amplitude", 0.15)),
        "blob": lambda: blob(n, seed),
        "icosphere": lambda: icosphere(params.get("subdivisions", _subdivisions_for(n))),
        "disk": lambda: flat_disk(n),
        "torus": lambda: torus(),
    }
    if shape not in builders:
        raise ArgumentError(f"unknown shape '{shape}', expected one of {SHAPES}")
    mesh = builders[shape]()
    logger.info(f"Generated {shape}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return mesh
