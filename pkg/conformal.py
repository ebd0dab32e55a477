#!/usr/bin/env python3
"""
Conformal and Quasi-Conformal Flattening

Per-face Beltrami coefficients, the linear Beltrami solver (LBS), and the
flattening maps used by the pipelines:

- harmonic_disk_map: cotangent harmonic map onto the unit disk
- disk_conformal_flatten: harmonic map refined by quasi-conformal correction
- sem_flatten: stretch-energy minimization with pinned puncture corners
- qc_scale_compose: rebuild a map from its scaled Beltrami coefficient
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from capmap_errors import (
    ArgumentError,
    ConstraintError,
    DegenerateGeometryError,
    FlipError,
    InvalidCoefficientError,
    SingularMapError,
    SolverError,
)
from mesh_core import (
    DEGENERATE_AREA_RATIO,
    TriangleMesh,
    corner_angles,
    log_area_ratios,
    signed_areas_2d,
    triangle_areas,
    validate_topology,
)

logger = logging.getLogger(__name__)

# Above this many vertices linear systems go to conjugate gradients
DIRECT_SOLVE_LIMIT = 200_000
CG_TOLERANCE = 1e-10

# Per-face complex Beltrami coefficients
BeltramiField = np.ndarray
Constraints = Union[Mapping[int, Sequence[float]], Tuple[np.ndarray, np.ndarray]]


@dataclass(eq=False)
class PlanarMap:
    """Per-vertex planar image sharing the connectivity of a source mesh."""

    positions: np.ndarray
    faces: np.ndarray
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ArgumentError(f"planar positions must have shape (n, 2), got {self.positions.shape}")

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    def signed_areas(self) -> np.ndarray:
        return signed_areas_2d(self.positions, self.faces)

    def flipped_faces(self) -> np.ndarray:
        """Faces whose signed area is not above the degeneracy threshold."""
        extent = np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0))
        return np.flatnonzero(self.signed_areas() <= DEGENERATE_AREA_RATIO * extent ** 2)

    def check_orientation(self, stage: Optional[str] = None) -> "PlanarMap":
        flipped = self.flipped_faces()
        if len(flipped):
            raise FlipError(f"{len(flipped)} flipped or degenerate planar face(s), first {flipped[:5].tolist()}",
                            faces=flipped, stage=stage)
        return self

    def scaled(self, factor: float) -> "PlanarMap":
        return PlanarMap(self.positions * factor, self.faces)

    def as_mesh(self) -> TriangleMesh:
        """Planar image as a TriangleMesh lying in Z = 0."""
        return TriangleMesh(np.column_stack([self.positions, np.zeros(self.n_vertices)]), self.faces)


# ---------------------------------------------------------------------------
# Per-face frames and gradients
# ---------------------------------------------------------------------------

def _geometry_of(obj) -> np.ndarray:
    if isinstance(obj, PlanarMap):
        return obj.positions
    if isinstance(obj, TriangleMesh):
        return obj.vertices
    return np.asarray(obj, dtype=float)


def face_coordinates(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """2-D coordinates of each face's corners, shape (m, 3, 2).

    Planar points are used as they are. Each 3-D triangle is laid flat in its
    own frame: corner 0 at the origin, edge 0->1 along +x, corner 2 above.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[1] == 2:
        return points[faces]
    p0, p1, p2 = points[faces[:, 0]], points[faces[:, 1]], points[faces[:, 2]]
    e1, e2 = p1 - p0, p2 - p0
    len1 = np.linalg.norm(e1, axis=1)
    x_axis = e1 / np.where(len1 > 0, len1, 1.0)[:, None]
    normal = np.cross(e1, e2)
    normal /= np.maximum(np.linalg.norm(normal, axis=1), 1e-300)[:, None]
    y_axis = np.cross(normal, x_axis)
    coords = np.zeros((len(faces), 3, 2))
    coords[:, 1, 0] = len1
    coords[:, 2, 0] = np.einsum("ij,ij->i", e2, x_axis)
    coords[:, 2, 1] = np.einsum("ij,ij->i", e2, y_axis)
    return coords


def _face_gradients(coords: np.ndarray, degenerate_area: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the three barycentric hat functions per face and signed areas."""
    p0, p1, p2 = coords[:, 0], coords[:, 1], coords[:, 2]
    area = 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    degenerate = np.flatnonzero(np.abs(area) <= degenerate_area)
    if len(degenerate):
        raise DegenerateGeometryError(f"degenerate reference face {int(degenerate[0])}", faces=degenerate)
    grads = np.empty((len(coords), 3, 2))
    for k in range(3):
        edge = coords[:, (k + 2) % 3] - coords[:, (k + 1) % 3]
        grads[:, k, 0] = -edge[:, 1] / (2.0 * area)
        grads[:, k, 1] = edge[:, 0] / (2.0 * area)
    return grads, area


def _degenerate_threshold(points: np.ndarray) -> float:
    extent = np.linalg.norm(points.max(axis=0) - points.min(axis=0))
    return DEGENERATE_AREA_RATIO * extent ** 2


def face_beltrami(source, target) -> BeltramiField:
    """Beltrami coefficient mu = f_zbar / f_z of the piecewise-linear map source -> target.

    Args:
        source: TriangleMesh, PlanarMap or vertex array defining the domain
        target: PlanarMap, TriangleMesh or vertex array with the same connectivity

    Returns:
        Complex array with one coefficient per face
    """
    faces = source.faces if hasattr(source, "faces") else target.faces
    src_points = _geometry_of(source)
    tgt_points = _geometry_of(target)
    if len(src_points) != len(tgt_points):
        raise ArgumentError(f"source has {len(src_points)} vertices, target {len(tgt_points)}")

    grads, _ = _face_gradients(face_coordinates(src_points, faces), _degenerate_threshold(src_points))
    tgt = face_coordinates(tgt_points, faces)
    u_x = np.einsum("fk,fk->f", tgt[:, :, 0], grads[:, :, 0])
    u_y = np.einsum("fk,fk->f", tgt[:, :, 0], grads[:, :, 1])
    v_x = np.einsum("fk,fk->f", tgt[:, :, 1], grads[:, :, 0])
    v_y = np.einsum("fk,fk->f", tgt[:, :, 1], grads[:, :, 1])
    f_z = 0.5 * ((u_x + v_y) + 1j * (v_x - u_y))
    f_zbar = 0.5 * ((u_x - v_y) + 1j * (v_x + u_y))
    scale = np.sqrt(np.abs(u_x * v_y - u_y * v_x) + u_x ** 2 + u_y ** 2 + v_x ** 2 + v_y ** 2)
    singular = np.flatnonzero(np.abs(f_z) <= 1e-14 * np.maximum(scale, 1e-300))
    if len(singular):
        raise SingularMapError(f"f_z vanishes on face {int(singular[0])}")
    return f_zbar / f_z


# ---------------------------------------------------------------------------
# Linear systems
# ---------------------------------------------------------------------------

def _assemble_stiffness(faces: np.ndarray, local: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Scatter per-face 3x3 blocks into a sparse n x n matrix."""
    rows = np.repeat(faces, 3, axis=1).ravel()
    cols = np.tile(faces, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n_vertices, n_vertices))


def cotangent_stiffness(points: np.ndarray, faces: np.ndarray, weights: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """Cotangent Laplacian (positive semidefinite), optionally with per-face weights."""
    angles = corner_angles(points, faces)
    with np.errstate(divide="ignore"):
        cot = 1.0 / np.tan(angles)
    if weights is not None:
        cot = cot * np.asarray(weights, dtype=float)[:, None]
    local = np.zeros((len(faces), 3, 3))
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        w = 0.5 * cot[:, k]
        local[:, i, j] -= w
        local[:, j, i] -= w
        local[:, i, i] += w
        local[:, j, j] += w
    return _assemble_stiffness(faces, local, len(points))


def _normalize_constraints(constraints: Constraints, n_vertices: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(constraints, Mapping):
        indices = np.fromiter(constraints.keys(), dtype=np.int64, count=len(constraints))
        targets = np.array([constraints[int(i)] for i in indices], dtype=float).reshape(-1, 2)
    else:
        indices, targets = constraints
        indices = np.asarray(indices, dtype=np.int64).ravel()
        targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(indices) != len(targets):
        raise ArgumentError(f"{len(indices)} constrained vertices but {len(targets)} targets")
    if len(indices) and (indices.min() < 0 or indices.max() >= n_vertices):
        raise ArgumentError("constrained vertex index out of range")
    if len(np.unique(indices)) != len(indices):
        raise ConstraintError("a vertex is constrained twice")
    return indices, targets


def solve_dirichlet(matrix: sp.spmatrix, indices: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Solve matrix @ x = 0 on free rows with x fixed to targets at `indices`.

    Direct sparse LU up to DIRECT_SOLVE_LIMIT vertices, conjugate gradients beyond.
    """
    n = matrix.shape[0]
    free = np.ones(n, dtype=bool)
    free[indices] = False
    solution = np.zeros((n, targets.shape[1]))
    solution[indices] = targets
    if not free.any():
        return solution
    matrix = sp.csr_matrix(matrix)
    a_ff = matrix[free][:, free].tocsc()
    rhs = -(matrix[free][:, indices] @ targets)
    if n <= DIRECT_SOLVE_LIMIT:
        try:
            lu = spla.splu(a_ff)
        except RuntimeError as e:
            raise SolverError(f"singular linear system: {e}")
        x = lu.solve(rhs)
    else:
        x = np.empty_like(rhs)
        for col in range(rhs.shape[1]):
            x[:, col], info = spla.cg(a_ff, rhs[:, col], rtol=CG_TOLERANCE, maxiter=20 * n)
            if info != 0:
                raise SolverError(f"conjugate gradients did not converge (info={info})")
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    solution[free] = x
    return solution


def _boundary_vertices(faces: np.ndarray) -> np.ndarray:
    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    keys, counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    return np.unique(keys[counts == 1])


def lbs_reconstruct(reference, mu: BeltramiField, constraints: Constraints) -> PlanarMap:
    """Linear Beltrami solver: the planar map with Beltrami coefficient mu.

    Args:
        reference: Domain geometry the coefficients refer to (TriangleMesh, whose
            faces are laid out in their own frames, or PlanarMap)
        mu: One complex coefficient per face, all with modulus below 1
        constraints: {vertex: (x, y)} or (indices, targets)

    Returns:
        PlanarMap solving div(A grad u) = div(A grad v) = 0 under the constraints
    """
    faces = reference.faces
    points = _geometry_of(reference)
    n = len(points)
    mu = np.asarray(mu, dtype=complex).ravel()
    if len(mu) != len(faces):
        raise ArgumentError(f"{len(mu)} coefficients for {len(faces)} faces")
    modulus = np.abs(mu)
    if np.any(~np.isfinite(modulus)) or np.any(modulus >= 1.0):
        bad = np.flatnonzero(~(modulus < 1.0))
        raise InvalidCoefficientError(f"|mu| >= 1 on {len(bad)} face(s), first {int(bad[0])}")

    indices, targets = _normalize_constraints(constraints, n)
    boundary = _boundary_vertices(faces)
    if len(indices) < 3:
        raise ConstraintError(f"need at least 3 constrained vertices, got {len(indices)}")
    if len(boundary) == 0 or not np.isin(indices, boundary).any():
        raise ConstraintError("no constrained vertex lies on the mesh boundary")

    grads, area = _face_gradients(face_coordinates(points, faces), _degenerate_threshold(points))
    a, b = mu.real, mu.imag
    denom = 1.0 - modulus ** 2
    alpha1 = (1.0 - 2.0 * a + modulus ** 2) / denom
    alpha2 = -2.0 * b / denom
    alpha3 = (1.0 + 2.0 * a + modulus ** 2) / denom
    tensor = np.empty((len(faces), 2, 2))
    tensor[:, 0, 0] = alpha1
    tensor[:, 0, 1] = alpha2
    tensor[:, 1, 0] = alpha2
    tensor[:, 1, 1] = alpha3
    local = np.abs(area)[:, None, None] * np.einsum("fkx,fxy,fly->fkl", grads, tensor, grads)
    matrix = _assemble_stiffness(faces, local, n)
    positions = solve_dirichlet(matrix, indices, targets)
    return PlanarMap(positions, faces)


# ---------------------------------------------------------------------------
# Flattening maps
# ---------------------------------------------------------------------------

def arc_length_angles(points: np.ndarray, loop: np.ndarray) -> np.ndarray:
    """Angles in [0, 2pi) proportional to cumulative edge length along a closed loop."""
    closed = np.append(loop, loop[0])
    lengths = np.linalg.norm(np.diff(points[closed], axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    return 2.0 * np.pi * cumulative / lengths.sum()


def _circle(angles: np.ndarray) -> np.ndarray:
    return np.column_stack([np.cos(angles), np.sin(angles)])


def harmonic_disk_map(mesh: TriangleMesh, boundary: Optional[np.ndarray] = None) -> PlanarMap:
    """Cotangent harmonic map of an open mesh onto the unit disk.

    The boundary loop goes to the unit circle by arc length; interior
    positions solve the cotangent Laplace equation.
    """
    if boundary is None:
        info = validate_topology(mesh)
        if info.kind != "open":
            raise ArgumentError("harmonic_disk_map needs an open mesh")
        boundary = info.boundary
    targets = _circle(arc_length_angles(mesh.vertices, boundary))
    stiffness = cotangent_stiffness(mesh.vertices, mesh.faces)
    positions = solve_dirichlet(stiffness, boundary, targets)
    return PlanarMap(positions, mesh.faces)


def _mean_abs_mu(surface: TriangleMesh, planar: PlanarMap) -> float:
    return float(np.mean(np.abs(face_beltrami(surface, planar))))


def _scaled_boundary_angles(surface: TriangleMesh, planar: PlanarMap, loop: np.ndarray) -> np.ndarray:
    """Boundary angles from surface edge lengths stretched by the local conformal factor."""
    faces = surface.faces
    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    owner = {(int(u), int(v)): f for f, (u, v) in zip(np.repeat(np.arange(len(faces)), 3), directed)}
    img_areas = triangle_areas(planar.positions, faces)
    share = (img_areas / img_areas.sum()) / (surface.face_areas / surface.face_areas.sum())

    closed = np.append(loop, loop[0])
    lengths = np.linalg.norm(np.diff(surface.vertices[closed], axis=0), axis=1)
    edge_faces = np.array([owner[(int(u), int(v))] for u, v in zip(closed[:-1], closed[1:])])
    stretched = lengths * np.sqrt(share[edge_faces])
    cumulative = np.concatenate([[0.0], np.cumsum(stretched)[:-1]])
    start = np.arctan2(planar.positions[loop[0], 1], planar.positions[loop[0], 0])
    return start + 2.0 * np.pi * cumulative / stretched.sum()


def disk_conformal_flatten(mesh: TriangleMesh, max_rounds: int = 5, min_improvement: float = 1e-3) -> PlanarMap:
    """Near-conformal bijection of an open mesh onto the unit disk.

    Starts from the harmonic disk map. Each round moves the boundary by the
    conformal factor seen on the boundary faces, then solves the Beltrami
    equation on the current disk image with the coefficient of the inverse
    map so the composition with the surface is conformal. The best
    flip-free iterate by mean |mu| is returned.
    """
    info = validate_topology(mesh)
    if info.kind != "open":
        raise ArgumentError("disk_conformal_flatten needs an open mesh")
    loop = info.boundary

    current = harmonic_disk_map(mesh, loop).check_orientation(stage="flatten")
    best, best_mu = current, _mean_abs_mu(mesh, current)
    harmonic_mu = best_mu
    history = [best_mu]
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        try:
            mu_inverse = face_beltrami(current, mesh)
            angles = _scaled_boundary_angles(mesh, current, loop)
            candidate = lbs_reconstruct(current, mu_inverse, (loop, _circle(angles)))
        except (SolverError, DegenerateGeometryError) as e:
            logger.debug(f"Conformal correction round {rounds} failed: {e}")
            break
        if len(candidate.flipped_faces()):
            logger.debug(f"Conformal correction round {rounds} flipped faces, keeping previous iterate")
            break
        candidate_mu = _mean_abs_mu(mesh, candidate)
        improvement = best_mu - candidate_mu
        logger.debug(f"Conformal correction round {rounds}: mean |mu| {candidate_mu:.6f}")
        if candidate_mu < best_mu:
            best, best_mu = candidate, candidate_mu
        history.append(best_mu)
        current = candidate
        if improvement < min_improvement:
            break

    best.diagnostics.update({"mean_abs_mu": best_mu, "harmonic_mean_abs_mu": harmonic_mu, "rounds": rounds,
                             "history": history})
    logger.info(f"Disk conformal map: mean |mu| {harmonic_mu:.4f} -> {best_mu:.4f} after {rounds} round(s)")
    return best


def _mean_abs_log_area(surface: TriangleMesh, positions: np.ndarray) -> float:
    return float(np.mean(np.abs(log_area_ratios(surface.face_areas, triangle_areas(positions, surface.faces)))))


def _corner_boundary_targets(mesh: TriangleMesh, loop: np.ndarray,
                             corners: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Pin corners on the unit circle by arc length; other boundary vertices go on the chords."""
    corner_set = [int(c) for c in corners]
    start = int(np.flatnonzero(loop == corner_set[0])[0])
    loop = np.roll(loop, -start)
    angles = arc_length_angles(mesh.vertices, loop)
    is_corner = np.isin(loop, corner_set)
    targets = np.empty((len(loop), 2))
    corner_pos = np.flatnonzero(is_corner)
    corner_xy = _circle(angles[corner_pos])
    closed_pos = np.append(corner_pos, len(loop))
    closed_angles = np.append(angles[corner_pos], 2.0 * np.pi)
    closed_xy = np.vstack([corner_xy, corner_xy[:1]])
    for k in range(len(corner_pos)):
        lo, hi = closed_pos[k], closed_pos[k + 1]
        span = closed_angles[k + 1] - closed_angles[k]
        t = (angles[lo:hi] - closed_angles[k]) / span
        targets[lo:hi] = (1.0 - t)[:, None] * closed_xy[k] + t[:, None] * closed_xy[k + 1]
    return loop, targets


def sem_flatten(mesh: TriangleMesh, corners: Sequence[int], max_iterations: int = 50,
                rel_tol: float = 1e-3) -> PlanarMap:
    """Stretch-energy minimization of a punctured mesh with pinned corners.

    The four corners go on the unit circle at angles proportional to
    cumulative boundary length, starting at angle 0 for corners[0]. Each
    iteration solves a reweighted Laplacian whose face weights are the
    cotangents of the current image divided by the face stretch
    |T| / |f(T)| (normalized areas). An iterate is accepted only when it is
    flip-free and lowers the mean |d_area|.
    """
    corners = [int(c) for c in corners]
    if len(corners) != 4 or len(set(corners)) != 4:
        raise ArgumentError(f"sem_flatten needs 4 distinct corners, got {corners}")
    info = validate_topology(mesh)
    if info.kind != "open":
        raise ArgumentError("sem_flatten needs an open (punctured) mesh")
    if not np.isin(corners, info.boundary).all():
        raise ArgumentError("every corner must lie on the boundary loop")

    loop, targets = _corner_boundary_targets(mesh, info.boundary, corners)
    positions = solve_dirichlet(cotangent_stiffness(mesh.vertices, mesh.faces), loop, targets)
    current = PlanarMap(positions, mesh.faces)
    diagnostics: Dict[str, object] = {"iterations": 0, "rolled_back": False, "history": []}
    if len(current.flipped_faces()):
        raise FlipError("initial stretch-energy iterate has flipped faces", faces=current.flipped_faces(),
                        stage="flatten")
    distortion = _mean_abs_log_area(mesh, current.positions)
    diagnostics["history"].append(distortion)
    diagnostics["initial_mean_abs_d_area"] = distortion

    surface_share = mesh.face_areas / mesh.face_areas.sum()
    for iteration in range(1, max_iterations + 1):
        image_areas = triangle_areas(current.positions, mesh.faces)
        stretch = surface_share / (image_areas / image_areas.sum())
        try:
            stiffness = cotangent_stiffness(current.positions, mesh.faces, weights=1.0 / stretch)
            candidate = PlanarMap(solve_dirichlet(stiffness, loop, targets), mesh.faces)
        except SolverError as e:
            logger.warning(f"⚠️ Stretch-energy iteration {iteration} failed ({e}), keeping previous iterate")
            diagnostics["rolled_back"] = True
            break
        if len(candidate.flipped_faces()):
            logger.warning(f"⚠️ Stretch-energy iteration {iteration} flipped faces, rolled back")
            diagnostics["rolled_back"] = True
            break
        new_distortion = _mean_abs_log_area(mesh, candidate.positions)
        logger.debug(f"SEM iteration {iteration}: mean |d_area| {new_distortion:.6f}")
        if new_distortion > distortion:
            break
        change = (distortion - new_distortion) / max(distortion, 1e-300)
        current, distortion = candidate, new_distortion
        diagnostics["iterations"] = iteration
        diagnostics["history"].append(distortion)
        if change < rel_tol:
            break

    diagnostics["mean_abs_d_area"] = distortion
    current.diagnostics.update(diagnostics)
    logger.info(f"Stretch-energy flattening: mean |d_area| {diagnostics['initial_mean_abs_d_area']:.4f} -> "
                f"{distortion:.4f} in {diagnostics['iterations']} iteration(s)")
    return current


def qc_scale_compose(surface: TriangleMesh, planar: PlanarMap, lam: float,
                     constraints: Optional[Constraints] = None) -> PlanarMap:
    """Rebuild `planar` from lam times its Beltrami coefficient.

    Args:
        surface: Source mesh the map starts from
        planar: Current map of the surface
        lam: Scaling in [0, 1]; 1 reproduces the map, 0 gives the conformal one
        constraints: Pinned vertices; defaults to the boundary of `planar` held in place
    """
    if not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"lambda must lie in [0, 1], got {lam}")
    if constraints is None:
        boundary = _boundary_vertices(surface.faces)
        constraints = (boundary, planar.positions[boundary])
    mu = face_beltrami(surface, planar)
    result = lbs_reconstruct(surface, lam * mu, constraints)
    result.diagnostics.update({
        "lambda": lam,
        "mean_abs_mu_input": float(np.mean(np.abs(mu))),
        "mean_abs_mu_output": float(np.mean(np.abs(face_beltrami(surface, result)))),
    })
    return result
