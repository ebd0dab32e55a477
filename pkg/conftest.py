#!/usr/bin/env python3
"""
Shared fixtures for the capmap test suite
"""

import numpy as np
import pytest

from mesh_core import TriangleMesh


def make_grid(n: int = 5, size: float = 1.0) -> TriangleMesh:
    """Planar square [0, size]^2 in Z = 0, n x n vertices, counterclockwise faces."""
    xs = np.linspace(0.0, size, n)
    xx, yy = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(n * n)])
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            a = j * n + i
            b, c, d = a + 1, a + n + 1, a + n
            faces.append((a, b, c))
            faces.append((a, c, d))
    return TriangleMesh(vertices, np.asarray(faces))


def make_octahedron() -> TriangleMesh:
    vertices = np.array([
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
    ], dtype=float)
    faces = np.array([
        [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
        [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
    ])
    return TriangleMesh(vertices, faces)


def make_tetrahedron() -> TriangleMesh:
    """Regular tetrahedron with edge length 1, outward faces."""
    vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / (2.0 * np.sqrt(2.0))
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(vertices, faces)


@pytest.fixture
def grid_mesh() -> TriangleMesh:
    return make_grid(6)


@pytest.fixture
def octahedron() -> TriangleMesh:
    return make_octahedron()


@pytest.fixture
def tetrahedron() -> TriangleMesh:
    return make_tetrahedron()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
