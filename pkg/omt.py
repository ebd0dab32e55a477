#!/usr/bin/env python3
"""
Semi-Discrete Optimal Mass Transport on a Planar Domain

Transports the source density sigma = 4 / (1 + |x|^2)^2 on a convex
polygon Omega onto point masses tau_i sitting at the vertices of a planar
map. The transport cells are power cells: site i owns the points where
|x - y_i|^2 - h_i is smallest. Heights h minimize the convex energy

    E(h) = integral over Omega of max_i (2<x, y_i> - |y_i|^2 + h_i) sigma  -  sum_i tau_i h_i

whose gradient is w_i - tau_i, with w_i the sigma-mass of cell i. The area
preserving map places every vertex at the sigma-centroid of its converged
cell.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import shapely
from scipy.spatial import ConvexHull, QhullError
from shapely.geometry import Polygon

from capmap_errors import (
    ArgumentError,
    DegenerateGeometryError,
    EmptyCellError,
    SolverError,
)
from conformal import PlanarMap
from mesh_core import TriangleMesh, vertex_areas
from projection import sigma_density

logger = logging.getLogger(__name__)

DENSITIES = ("stereographic", "uniform")
NORMALIZATIONS = ("exact", "first-power")
MAX_BACKTRACKS = 20

# Collapsed Gauss-Legendre rule on fan triangles (5 x 5 nodes)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
_GL_U = 0.5 * (_GL_X + 1.0)
_GL_WU = 0.5 * _GL_W
# Three-point Gauss rule on segments
_SEG_X, _SEG_W = np.polynomial.legendre.leggauss(3)
_SEG_T = 0.5 * (_SEG_X + 1.0)
_SEG_WT = 0.5 * _SEG_W


def _density(points: np.ndarray, density: str) -> np.ndarray:
    if density == "uniform":
        return np.ones(points.shape[:-1])
    return sigma_density(points)


# ---------------------------------------------------------------------------
# Ring integrals: exterior rings given as flat coordinates plus owner index
# ---------------------------------------------------------------------------

def _ring_layout(index: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = np.bincount(index, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    position = np.arange(len(index)) - starts[index]
    return counts, starts, position


def _ring_edge_terms(coords: np.ndarray, index: np.ndarray, n: int, density: str) -> np.ndarray:
    """Signed sigma-mass per ring via the boundary integral of 2(x dy - y dx) / (1 + |x|^2).

    Rings are closed (last coordinate repeats the first). The uniform
    density reduces to the shoelace formula.
    """
    if len(coords) == 0:
        return np.zeros(n)
    counts, _, position = _ring_layout(index, n)
    edge = np.flatnonzero(position < counts[index] - 1)
    p, q = coords[edge], coords[edge + 1]
    cross = p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]
    if density == "uniform":
        return np.bincount(index[edge], weights=0.5 * cross, minlength=n)
    d = q - p
    a = np.sum(d * d, axis=1)
    b = 2.0 * np.sum(p * d, axis=1)
    c = np.sum(p * p, axis=1)
    disc = 4.0 * a * (c + 1.0) - b * b
    valid = disc > 0
    root = np.sqrt(np.where(valid, disc, 1.0))
    integral = (2.0 / root) * (np.arctan((2.0 * a + b) / root) - np.arctan(b / root))
    terms = np.where(valid, 2.0 * cross * integral, 0.0)
    return np.bincount(index[edge], weights=terms, minlength=n)


def _ring_quadrature(coords: np.ndarray, index: np.ndarray, n: int,
                     density: str) -> Tuple[np.ndarray, np.ndarray]:
    """Signed zeroth and first sigma-moments per ring by fan quadrature."""
    mass = np.zeros(n)
    moment = np.zeros((n, 2))
    if len(coords) == 0:
        return mass, moment
    counts, starts, position = _ring_layout(index, n)
    rows = np.flatnonzero((position >= 1) & (position <= counts[index] - 3))
    if len(rows) == 0:
        return mass, moment
    owner = index[rows]
    a = coords[starts[owner]]
    b = coords[rows]
    c = coords[rows + 1]
    twice_area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])

    u = _GL_U[:, None]
    v = _GL_U[None, :]
    weights = (_GL_WU[:, None] * _GL_WU[None, :] * u).ravel()
    s = (u * (1.0 - v)).ravel()
    t = (u * v).ravel()
    r = (1.0 - u + 0.0 * v).ravel()
    nodes = (r[None, :, None] * a[:, None, :] + s[None, :, None] * b[:, None, :]
             + t[None, :, None] * c[:, None, :])
    values = _density(nodes, density) * weights[None, :] * twice_area[:, None]
    tri_mass = values.sum(axis=1)
    tri_moment = np.einsum("tk,tkd->td", values, nodes)
    mass = np.bincount(owner, weights=tri_mass, minlength=n)
    moment[:, 0] = np.bincount(owner, weights=tri_moment[:, 0], minlength=n)
    moment[:, 1] = np.bincount(owner, weights=tri_moment[:, 1], minlength=n)
    return mass, moment


def _as_ring(poly) -> np.ndarray:
    if isinstance(poly, Polygon):
        coords = np.asarray(poly.exterior.coords, dtype=float)
    else:
        coords = np.asarray(poly, dtype=float)
        if len(coords) and not np.array_equal(coords[0], coords[-1]):
            coords = np.vstack([coords, coords[:1]])
    return coords


def sigma_mass(poly, density: str = "stereographic") -> float:
    """Exact sigma-mass of a simple polygon (vertex array or shapely Polygon).

    Equal to the spherical area of its inverse-stereographic image. The sign
    follows the orientation, so the absolute value is returned.
    """
    ring = _as_ring(poly)
    if len(ring) < 4:
        return 0.0
    return float(abs(_ring_edge_terms(ring, np.zeros(len(ring), dtype=np.int64), 1, density)[0]))


def sigma_centroid(poly, density: str = "stereographic") -> np.ndarray:
    """sigma-weighted centroid of a polygon by collapsed Gauss-Legendre quadrature."""
    ring = _as_ring(poly)
    mass, moment = _ring_quadrature(ring, np.zeros(len(ring), dtype=np.int64), 1, density)
    if len(ring) < 4 or abs(mass[0]) <= 0.0:
        raise EmptyCellError("polygon has zero sigma-mass", site=-1)
    return moment[0] / mass[0]


# ---------------------------------------------------------------------------
# Domain and target measure
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DomainPolygon:
    """Convex transport domain Omega, stored counterclockwise."""

    vertices: np.ndarray
    radius: Optional[float] = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2 or len(vertices) < 3:
            raise ArgumentError("domain polygon needs at least 3 planar vertices")
        polygon = Polygon(vertices)
        if not polygon.is_valid or polygon.area <= 0:
            raise ArgumentError("domain polygon must be simple with positive area")
        if not polygon.exterior.is_ccw:
            vertices = vertices[::-1].copy()
            polygon = Polygon(vertices)
        self.vertices = vertices
        self.polygon = polygon
        shapely.prepare(self.polygon)

    @classmethod
    def from_loop(cls, positions: np.ndarray, loop: Sequence[int], radius: Optional[float] = None) -> "DomainPolygon":
        return cls(np.asarray(positions)[np.asarray(loop)], radius=radius)

    def mass(self, density: str = "stereographic") -> float:
        return sigma_mass(self.vertices, density)

    @property
    def extent(self) -> float:
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    @property
    def max_density(self) -> float:
        """Largest sigma over the domain (at the point of Omega nearest the origin)."""
        nearest = 0.0 if self.polygon.covers(shapely.Point(0.0, 0.0)) else self.polygon.distance(shapely.Point(0.0, 0.0))
        return 4.0 / (1.0 + nearest ** 2) ** 2


def target_measure(surface: TriangleMesh, omega: DomainPolygon, normalization: str = "exact",
                   planar: Optional[PlanarMap] = None, radius: Optional[float] = None,
                   density: str = "stereographic") -> np.ndarray:
    """Per-vertex target masses proportional to surface vertex areas.

    Args:
        surface: Source surface
        omega: Transport domain; its sigma-mass is the total target mass
        normalization: 'exact' scales by M_Omega / total area; 'first-power' first
            applies the factor sum 4r A_g / (1 + r^2 |g|^2) / total area built
            from the unscaled map g and reports its ratio to the exact factor
        planar: Unscaled flattening g (needed for 'first-power')
        radius: Disk radius r (needed for 'first-power')

    Returns:
        tau with sum equal to M_Omega
    """
    if normalization not in NORMALIZATIONS:
        raise ArgumentError(f"normalization must be one of {NORMALIZATIONS}, got '{normalization}'")
    areas = vertex_areas(surface)
    zero = np.flatnonzero(areas <= 0)
    if len(zero):
        raise DegenerateGeometryError(f"vertex {int(zero[0])} has zero area")
    total_mass = omega.mass(density)
    tau = areas * (total_mass / areas.sum())
    if normalization == "first-power":
        if planar is None or radius is None:
            raise ArgumentError("first-power normalization needs the planar map and the radius")
        planar_areas = vertex_areas(TriangleMesh(np.column_stack([planar.positions, np.zeros(planar.n_vertices)]),
                                                 planar.faces))
        norms = np.sum(planar.positions ** 2, axis=1)
        factor = np.sum(4.0 * radius * planar_areas / (1.0 + radius ** 2 * norms)) / areas.sum()
        raw = areas * factor
        logger.info(f"First-power target normalization: raw mass {raw.sum():.6g} vs domain mass {total_mass:.6g} "
                    f"(ratio {raw.sum() / total_mass:.4f}), rescaled to balance")
        tau = raw * (total_mass / raw.sum())
    return tau


# ---------------------------------------------------------------------------
# Power diagram
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PowerDiagramState:
    """Omega-clipped power cells of weighted sites with their sigma-masses."""

    sites: np.ndarray
    heights: np.ndarray
    omega: DomainPolygon
    cells: List[np.ndarray]
    masses: np.ndarray
    moments: np.ndarray
    quad_masses: np.ndarray
    density: str = "stereographic"
    simplices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def empty_sites(self) -> np.ndarray:
        return np.flatnonzero(self.masses <= 0.0)

    def centroids(self) -> np.ndarray:
        """sigma-centroids of the cells (NaN for empty cells)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.moments / self.quad_masses[:, None]


def _lifted_hull(sites: np.ndarray, heights: np.ndarray, extent: float):
    """Lower hull of the lifted sites plus four far dummy sites."""
    far = 10.0 * (extent + np.sqrt(np.max(np.abs(heights))) + 1.0)
    dummies = np.array([[-far, -far], [far, -far], [far, far], [-far, far]])
    points = np.vstack([sites, dummies])
    lifted_heights = np.concatenate([heights, np.zeros(4)])
    lifted = np.column_stack([points, np.sum(points * points, axis=1) - lifted_heights])
    try:
        hull = ConvexHull(lifted, qhull_options="Qt Qbb")
    except QhullError as e:
        raise SolverError(f"regular triangulation failed: {e}")
    lower = hull.equations[:, 2] < -1e-12
    simplices = hull.simplices[lower]
    normals = hull.equations[lower]
    centers = -normals[:, :2] / (2.0 * normals[:, 2:3])
    return simplices, centers


def power_diagram(sites: np.ndarray, heights: np.ndarray, omega: DomainPolygon,
                  density: str = "stereographic") -> PowerDiagramState:
    """Clip the power diagram of (sites, heights) to Omega and measure its cells.

    Raises:
        ArgumentError: duplicate sites or mismatched sizes
    """
    sites = np.asarray(sites, dtype=float)
    heights = np.asarray(heights, dtype=float)
    n = len(sites)
    if heights.shape != (n,):
        raise ArgumentError(f"{n} sites but heights of shape {heights.shape}")
    if density not in DENSITIES:
        raise ArgumentError(f"density must be one of {DENSITIES}, got '{density}'")
    if len(np.unique(sites, axis=0)) != n:
        raise ArgumentError("power diagram sites must be distinct")

    extent = max(omega.extent, float(np.max(np.abs(sites))) if n else 0.0)
    if n == 1:
        simplices = np.zeros((0, 3), dtype=np.int64)
        centers = np.zeros((0, 2))
        clipped = np.array([omega.polygon], dtype=object)
        owners = np.array([0])
    else:
        simplices, centers = _lifted_hull(sites, heights, extent)
        incident_site = simplices.ravel()
        incident_center = np.repeat(np.arange(len(simplices)), 3)
        real = incident_site < n
        incident_site, incident_center = incident_site[real], incident_center[real]
        counts = np.bincount(incident_site, minlength=n)
        mean = np.zeros((n, 2))
        for d in range(2):
            mean[:, d] = np.bincount(incident_site, weights=centers[incident_center, d], minlength=n)
        mean /= np.maximum(counts, 1)[:, None]
        offsets = centers[incident_center] - mean[incident_site]
        angle = np.arctan2(offsets[:, 1], offsets[:, 0])
        order = np.lexsort((angle, incident_site))
        incident_site, incident_center = incident_site[order], incident_center[order]
        # coplanar lifted facets share a power center; keep one copy per cell
        ordered = centers[incident_center]
        repeat = np.zeros(len(incident_site), dtype=bool)
        repeat[1:] = (incident_site[1:] == incident_site[:-1]) & np.all(
            np.abs(ordered[1:] - ordered[:-1]) <= 1e-14 * max(extent, 1.0), axis=1)
        incident_site, incident_center = incident_site[~repeat], incident_center[~repeat]
        counts = np.bincount(incident_site, minlength=n)
        keep = counts[incident_site] >= 3
        incident_site, incident_center = incident_site[keep], incident_center[keep]
        owners = np.unique(incident_site)
        if len(owners):
            ring_index = np.searchsorted(owners, incident_site)
            rings = shapely.linearrings(centers[incident_center], indices=ring_index)
            clipped = shapely.intersection(shapely.polygons(rings), omega.polygon)
        else:
            clipped = np.array([], dtype=object)

    is_polygon = shapely.get_type_id(clipped) == 3
    clipped, owners = clipped[is_polygon], owners[is_polygon]
    non_empty = ~shapely.is_empty(clipped)
    clipped, owners = clipped[non_empty], owners[non_empty]
    coords, local = shapely.get_coordinates(shapely.get_exterior_ring(clipped), return_index=True)
    index = owners[local] if len(local) else np.zeros(0, dtype=np.int64)

    signed = _ring_edge_terms(coords, index, n, density)
    quad_mass, moments = _ring_quadrature(coords, index, n, density)
    orientation = _ring_edge_terms(coords, index, n, "uniform")
    sign = np.where(orientation < 0, -1.0, 1.0)
    masses = signed * sign
    quad_mass = quad_mass * sign
    moments = moments * sign[:, None]

    cells: List[np.ndarray] = [np.zeros((0, 2)) for _ in range(n)]
    if len(coords):
        splits = np.flatnonzero(np.diff(index)) + 1
        for group in np.split(np.arange(len(index)), splits):
            cells[int(index[group[0]])] = coords[group[:-1]]
    return PowerDiagramState(sites=sites, heights=heights, omega=omega, cells=cells, masses=masses,
                             moments=moments, quad_masses=quad_mass, density=density,
                             simplices=simplices, centers=centers)


def omt_energy(state: PowerDiagramState, tau: np.ndarray) -> float:
    """E(h) = sum_i [2 <M1_i, y_i> + (h_i - |y_i|^2) w_i] - sum_i tau_i h_i."""
    y = state.sites
    envelope = 2.0 * np.sum(state.moments * y, axis=1) + (state.heights - np.sum(y * y, axis=1)) * state.masses
    return float(envelope.sum() - np.dot(tau, state.heights))


def power_hessian(state: PowerDiagramState) -> sp.csr_matrix:
    """d w / d h: minus the sigma-length of each shared cell edge over twice the site distance."""
    n = state.n_sites
    simplices = state.simplices
    if len(simplices) == 0:
        return sp.csr_matrix((n, n))
    pairs = np.sort(simplices[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    facet = np.repeat(np.arange(len(simplices)), 3)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs, facet = pairs[order], facet[order]
    shared = np.flatnonzero(np.all(pairs[1:] == pairs[:-1], axis=1))
    edges = pairs[shared]
    real = np.all(edges < n, axis=1)
    edges = edges[real]
    f1, f2 = facet[shared][real], facet[shared + 1][real]
    if len(edges) == 0:
        return sp.csr_matrix((n, n))

    segments = shapely.linestrings(np.stack([state.centers[f1], state.centers[f2]], axis=1))
    clipped = shapely.intersection(segments, state.omega.polygon)
    coords, which = shapely.get_coordinates(clipped, return_index=True)
    coefficient = np.zeros(len(edges))
    if len(coords):
        counts = np.bincount(which, minlength=len(edges))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        has = counts >= 2
        p = coords[starts[has]]
        q = coords[starts[has] + counts[has] - 1]
        length = np.linalg.norm(q - p, axis=1)
        nodes = p[:, None, :] + _SEG_T[None, :, None] * (q - p)[:, None, :]
        line_mass = length * np.sum(_SEG_WT[None, :] * _density(nodes, state.density), axis=1)
        distance = np.linalg.norm(state.sites[edges[has, 0]] - state.sites[edges[has, 1]], axis=1)
        coefficient[has] = line_mass / (2.0 * distance)
    i, j = edges[:, 0], edges[:, 1]
    off = sp.csr_matrix((np.concatenate([-coefficient, -coefficient]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                        shape=(n, n))
    diagonal = -np.asarray(off.sum(axis=1)).ravel()
    return off + sp.diags(diagonal)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass
class OMTResult:
    """Converged transport: the area-preserving planar map and its power diagram."""

    map: PlanarMap
    state: PowerDiagramState
    tau: np.ndarray
    iterations: int
    residual: float
    energy: float
    heights: np.ndarray
    history: List[Dict[str, float]] = field(default_factory=list)
    elapsed: float = 0.0


def _relative_residual(state: PowerDiagramState, tau: np.ndarray) -> float:
    return float(np.max(np.abs(state.masses - tau) / tau))


def _write_history(path: str, history: List[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "energy", "residual", "step", "mass_error"])
        writer.writeheader()
        writer.writerows(history)


@dataclass
class _LineSearchStep:
    """Outcome of one backtracking search; state is None when every trial was rejected."""

    heights: Optional[np.ndarray] = None
    state: Optional[PowerDiagramState] = None
    energy: float = float("inf")
    step: float = 0.0
    low_site: int = -1


def _newton_direction(state: PowerDiagramState, gradient: np.ndarray) -> Optional[np.ndarray]:
    hessian = power_hessian(state)
    gauge = 1e-12 * max(float(hessian.diagonal().max()), 1e-300)
    direction = spla.spsolve((hessian + gauge * sp.identity(state.n_sites)).tocsc(), -gradient)
    if not np.all(np.isfinite(direction)):
        return None
    return direction - direction.mean()


def _line_search(sites: np.ndarray, h: np.ndarray, direction: np.ndarray, trial_step: float, energy: float,
                 omega: DomainPolygon, tau: np.ndarray, density: str, mass_floor: float) -> _LineSearchStep:
    """Halve the step until every cell keeps mass_floor and E does not increase."""
    low_site = -1
    for _ in range(MAX_BACKTRACKS + 1):
        candidate_h = h + trial_step * direction
        try:
            candidate = power_diagram(sites, candidate_h, omega, density)
        except SolverError:
            candidate = None
        if candidate is not None:
            smallest = int(np.argmin(candidate.masses))
            if candidate.masses[smallest] < mass_floor:
                low_site = smallest
            else:
                candidate_energy = omt_energy(candidate, tau)
                if candidate_energy <= energy:
                    return _LineSearchStep(candidate_h, candidate, candidate_energy, trial_step)
                low_site = -1
        trial_step *= 0.5
    return _LineSearchStep(step=trial_step, low_site=low_site)


def omt_solve(initial: PlanarMap, surface: TriangleMesh, omega: DomainPolygon, tol: float = 1e-3,
              tau: Optional[np.ndarray] = None, heights: Optional[np.ndarray] = None,
              method: str = "newton", density: str = "stereographic",
              boundary: Optional[np.ndarray] = None, pinned: Optional[np.ndarray] = None,
              max_iterations: Optional[int] = None, diagnostics_path: Optional[str] = None) -> OMTResult:
    """Area-preserving planar map by semi-discrete optimal transport.

    Args:
        initial: Planar positions of the vertices (the transport sites)
        surface: Source surface defining the target masses
        omega: Convex transport domain
        tol: Stop once max_i |w_i - tau_i| / tau_i <= tol
        tau: Target masses; computed with target_measure when omitted
        heights: Warm-start heights (zeros when omitted). A warm start that leaves
            a cell empty or stalls is retried once from zero heights
        method: 'newton' (power-diagram Hessian) or 'gradient' (damped descent)
        density: 'stereographic' or 'uniform'
        boundary: Vertices moved radially onto the circle of radius omega.radius at the end
        pinned: Vertices reset to their initial positions at the end
        max_iterations: Iteration cap (defaults: 200 Newton, 20000 gradient)
        diagnostics_path: Optional CSV for per-iteration records

    Raises:
        ArgumentError: tol <= 0 or unknown method
        EmptyCellError: neither the Newton nor the fallback gradient step keeps every
            cell above half its smallest initial or target mass within MAX_BACKTRACKS halvings
        SolverError: no convergence within the iteration cap
        FlipError: final map has flipped faces
    """
    if not tol > 0:
        raise ArgumentError(f"OMT tolerance must be positive, got {tol}")
    if method not in ("newton", "gradient"):
        raise ArgumentError(f"method must be 'newton' or 'gradient', got '{method}'")
    started = time.time()
    sites = initial.positions
    n = len(sites)
    if tau is None:
        tau = target_measure(surface, omega, density=density)
    tau = np.asarray(tau, dtype=float)
    h = np.zeros(n) if heights is None else np.asarray(heights, dtype=float).copy()
    if max_iterations is None:
        max_iterations = 200 if method == "newton" else 20000
    total_mass = omega.mass(density)

    def restart(reason: str) -> OMTResult:
        logger.debug(f"Warm-start heights {reason}, restarting from zero heights")
        return omt_solve(initial, surface, omega, tol=tol, tau=tau, heights=None, method=method,
                         density=density, boundary=boundary, pinned=pinned,
                         max_iterations=max_iterations, diagnostics_path=diagnostics_path)

    state = power_diagram(sites, h, omega, density)
    if len(state.empty_sites()):
        if heights is None:
            raise EmptyCellError(f"site {int(state.empty_sites()[0])} has an empty initial cell",
                                 site=int(state.empty_sites()[0]))
        return restart("leave empty cells")
    # accepted iterates keep every cell at or above this mass
    mass_floor = 0.5 * min(float(tau.min()), float(state.masses.min()))
    energy = omt_energy(state, tau)
    residual = _relative_residual(state, tau)
    step = 0.5 * float(tau.min()) / omega.max_density
    history = [{"iteration": 0, "energy": energy, "residual": residual, "step": 0.0,
                "mass_error": abs(state.masses.sum() - total_mass) / total_mass}]

    iteration = 0
    while residual > tol:
        iteration += 1
        if iteration > max_iterations:
            if heights is not None:
                return restart(f"hit the {max_iterations}-iteration cap")
            raise SolverError(f"OMT did not converge in {max_iterations} iterations (residual {residual:.3g})")
        gradient = state.masses - tau
        accepted = _LineSearchStep()
        used_gradient = True
        if method == "newton":
            direction = _newton_direction(state, gradient)
            if direction is not None:
                accepted = _line_search(sites, h, direction, 1.0, energy, omega, tau, density, mass_floor)
                used_gradient = False
            if accepted.state is None:
                logger.debug(f"Newton step rejected at iteration {iteration}, falling back to a gradient step")
        if accepted.state is None:
            accepted = _line_search(sites, h, -gradient, step, energy, omega, tau, density, mass_floor)
            used_gradient = True
        if accepted.state is None:
            if heights is not None:
                return restart(f"stall at iteration {iteration}")
            if accepted.low_site >= 0:
                raise EmptyCellError(f"cell of site {accepted.low_site} stays below the mass floor "
                                     f"after {MAX_BACKTRACKS} backtracks", site=accepted.low_site)
            raise SolverError(f"line search stalled at residual {residual:.3g}")

        h, state, energy = accepted.heights, accepted.state, accepted.energy
        residual = _relative_residual(state, tau)
        if used_gradient:
            step = accepted.step * 1.5
        record = {"iteration": iteration, "energy": energy, "residual": residual, "step": accepted.step,
                  "mass_error": abs(state.masses.sum() - total_mass) / total_mass}
        history.append(record)
        logger.debug(f"OMT iteration {iteration}: E={energy:.10g} residual={residual:.3g} step={accepted.step:.3g}")

    if diagnostics_path:
        _write_history(diagnostics_path, history)
    positions = state.centroids()
    if boundary is not None and len(boundary):
        if omega.radius is None:
            raise ArgumentError("radial boundary placement needs omega.radius")
        boundary = np.asarray(boundary)
        norms = np.linalg.norm(positions[boundary], axis=1)
        positions[boundary] *= (omega.radius / norms)[:, None]
    if pinned is not None and len(pinned):
        positions[np.asarray(pinned)] = sites[np.asarray(pinned)]
    result_map = PlanarMap(positions, initial.faces).check_orientation(stage="omt")
    elapsed = time.time() - started
    logger.debug(f"OMT converged in {iteration} iteration(s), residual {residual:.3g}, {elapsed:.2f}s")
    return OMTResult(map=result_map, state=state, tau=tau, iterations=iteration, residual=residual,
                     energy=energy, heights=h, history=history, elapsed=elapsed)
