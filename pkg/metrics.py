#!/usr/bin/env python3
"""
Distortion and Remeshing Metrics

Per-face area distortion, per-corner angle distortion, remeshing quality
(face area deviation, mean surface distance) and the two-sample t-test
used to compare shape descriptors between groups.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import stats

from capmap_errors import ArgumentError, DegenerateGeometryError
from mesh_core import DEGENERATE_AREA_RATIO, TriangleMesh, closest_point, corner_angles, log_area_ratios, triangle_areas

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 50


def spherical_triangle_areas(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Areas of geodesic triangles on the unit sphere via the solid-angle formula."""
    points = np.asarray(points, dtype=float)
    a, b, c = (points[faces[:, k]] for k in range(3))
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(triple, denom)


def _image_points(image) -> np.ndarray:
    if isinstance(image, TriangleMesh):
        return image.vertices
    return np.asarray(image.positions, dtype=float)


def _image_areas(image) -> np.ndarray:
    points = _image_points(image)
    if getattr(image, "spherical", False):
        return spherical_triangle_areas(points, image.faces)
    return triangle_areas(points, image.faces)


def _check_connectivity(source: TriangleMesh, image) -> None:
    if len(_image_points(image)) != source.n_vertices or not np.array_equal(np.asarray(image.faces), source.faces):
        raise ArgumentError("source and image must share connectivity")


def area_distortion(source: TriangleMesh, image) -> np.ndarray:
    """ln of each face's normalized image area over its normalized source area.

    Args:
        source: Original mesh
        image: PlanarMap, CapMap (spherical areas) or TriangleMesh with the same faces

    Raises:
        DegenerateGeometryError: an image face has (near) zero area
    """
    _check_connectivity(source, image)
    areas = _image_areas(image)
    scale = areas.sum() if getattr(image, "spherical", False) else np.ptp(_image_points(image), axis=0).max() ** 2
    degenerate = np.flatnonzero(areas <= DEGENERATE_AREA_RATIO * scale)
    if len(degenerate):
        raise DegenerateGeometryError(f"{len(degenerate)} degenerate image face(s), first {degenerate[:5].tolist()}",
                                      faces=degenerate)
    return log_area_ratios(source.face_areas, areas)


def angle_distortion(source: TriangleMesh, image) -> np.ndarray:
    """Per-corner image angle minus source angle, shape (faces, 3).

    Spherical images are measured between 3-D chord vectors.
    """
    _check_connectivity(source, image)
    points = _image_points(image)
    image_areas = triangle_areas(points, source.faces)
    extent = np.ptp(points, axis=0).max()
    degenerate = np.flatnonzero(image_areas <= DEGENERATE_AREA_RATIO * extent ** 2)
    if len(degenerate):
        raise DegenerateGeometryError(f"{len(degenerate)} degenerate image face(s), first {degenerate[:5].tolist()}",
                                      faces=degenerate)
    return corner_angles(points, source.faces) - corner_angles(source.vertices, source.faces)


def face_area_deviation(mesh: TriangleMesh) -> float:
    areas = mesh.face_areas
    return float(np.mean(np.abs(areas - areas.mean())))


def surface_distance(remeshed: TriangleMesh, original: TriangleMesh) -> float:
    """Mean distance from remeshed vertices to the original surface."""
    return float(np.mean(closest_point(original, remeshed.vertices).distances))


def two_sample_t(a: Sequence[float], b: Sequence[float], equal_var: bool = True) -> Dict[str, float]:
    """Two-sided two-sample t-test.

    Pooled variance by default; equal_var=False gives Welch's test. With zero
    variance the test is decided by the means: p = 1 if they agree, else 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ArgumentError(f"t-test needs at least 2 samples per group, got {na} and {nb}")
    diff = a.mean() - b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if equal_var:
        dof = float(na + nb - 2)
        pooled = ((na - 1) * va + (nb - 1) * vb) / dof
        se = np.sqrt(pooled * (1.0 / na + 1.0 / nb))
    else:
        sa, sb = va / na, vb / nb
        se = np.sqrt(sa + sb)
        dof = float((sa + sb) ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))) if se > 0 else float(na + nb - 2)
    if se == 0:
        equal = np.isclose(diff, 0.0, atol=1e-15)
        return {"t": 0.0 if equal else float(np.copysign(np.inf, diff)), "p": 1.0 if equal else 0.0, "dof": dof}
    t = float(diff / se)
    return {"t": t, "p": float(2.0 * stats.t.sf(abs(t), dof)), "dof": dof}


def symmetric_histogram(values: np.ndarray, bins: int = HISTOGRAM_BINS) -> Tuple[np.ndarray, np.ndarray]:
    """Counts over uniform bins spanning [-max|v|, max|v|]."""
    values = np.asarray(values, dtype=float).ravel()
    bound = float(np.max(np.abs(values))) if len(values) else 0.0
    if bound == 0.0:
        bound = 1.0
    counts, edges = np.histogram(values, bins=bins, range=(-bound, bound))
    return counts, edges


@dataclass
class DistortionReport:
    """Per-element distortions with their summaries and histograms."""

    d_area: np.ndarray
    d_angle: np.ndarray

    @property
    def mean_abs_d_area(self) -> float:
        return float(np.mean(np.abs(self.d_area)))

    @property
    def mean_abs_d_angle(self) -> float:
        return float(np.mean(np.abs(self.d_angle)))

    def histograms(self, bins: int = HISTOGRAM_BINS) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return {"d_area": symmetric_histogram(self.d_area, bins), "d_angle": symmetric_histogram(self.d_angle, bins)}

    def summary(self) -> Dict[str, float]:
        return {"mean_abs_d_area": self.mean_abs_d_area, "mean_abs_d_angle": self.mean_abs_d_angle}

    def write_csv(self, prefix: str, bins: int = HISTOGRAM_BINS) -> None:
        """Write <prefix>_faces.csv, <prefix>_corners.csv and <prefix>_histograms.csv."""
        with open(f"{prefix}_faces.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["face", "d_area"])
            writer.writerows([i, repr(float(v))] for i, v in enumerate(self.d_area))
        with open(f"{prefix}_corners.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["face", "corner", "d_angle"])
            for i, row in enumerate(np.atleast_2d(self.d_angle)):
                writer.writerows([i, k, repr(float(v))] for k, v in enumerate(row))
        with open(f"{prefix}_histograms.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "bin_low", "bin_high", "count"])
            for name, (counts, edges) in self.histograms(bins).items():
                writer.writerows([name, repr(float(edges[i])), repr(float(edges[i + 1])), int(counts[i])]
                                 for i in range(len(counts)))
        logger.info(f"Wrote distortion tables with prefix {prefix}")


def distortion_report(source: TriangleMesh, image) -> DistortionReport:
    return DistortionReport(d_area=area_distortion(source, image), d_angle=angle_distortion(source, image))
