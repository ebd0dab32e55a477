#!/usr/bin/env python3
"""
Adaptive Spherical-Cap Parameterization

End-to-end pipelines that map a disk-type surface (open) or a genus-0
surface (closed) onto a spherical cap Z >= Z* whose size is chosen
automatically. For every trial disk radius r the initial flattening is
scaled by r and made area-preserving by optimal transport; the radius with
the most conformal result wins, and the planar map is lifted onto the cap.
"""

import logging
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from capmap_errors import (
    ArgumentError,
    CapMapError,
    FlipError,
    PipelineError,
    TopologyError,
)
from conformal import (
    PlanarMap,
    disk_conformal_flatten,
    face_beltrami,
    qc_scale_compose,
    sem_flatten,
)
from mesh_core import (
    TriangleMesh,
    align_to_axis,
    face_adjacency,
    triangle_areas,
    validate_topology,
)
from metrics import distortion_report, spherical_triangle_areas
from omt import DomainPolygon, OMTResult, omt_solve, target_measure
from projection import CapSpec, cap_embed, cap_flatten, cap_from_radius

logger = logging.getLogger(__name__)

DOMAIN_MODES = ("adaptive", "hemisphere", "sphere")
SPHERE_RADIUS = 40.0
FAILED_EVALUATION_PENALTY = 2.0


@dataclass
class PipelineOptions:
    """Tunable settings shared by both pipelines."""

    lam: float = 0.2
    r_bounds: Tuple[float, float] = (0.25, 4.0)
    rtol: float = 0.01
    omt_tol_search: float = 1e-3
    omt_tol_final: float = 1e-4
    omt_method: str = "newton"
    rho_side: float = 1.5
    rho_diag: float = 1.5
    axis: Optional[Tuple[float, float, float]] = None
    domain_mode: str = "adaptive"
    fixed_radius: Optional[float] = None
    energy_measure: str = "planar"
    normalization: str = "exact"
    omt_diagnostics: Optional[str] = None

    def validate(self) -> "PipelineOptions":
        if not 0.0 <= self.lam <= 1.0:
            raise ArgumentError(f"lambda must lie in [0, 1], got {self.lam}")
        lo, hi = self.r_bounds
        if not 0.0 < lo < hi:
            raise ArgumentError(f"radius bounds need 0 < r_lo < r_hi, got ({lo}, {hi})")
        for name in ("rtol", "omt_tol_search", "omt_tol_final"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rho_side < 1.0 or self.rho_diag < 1.0:
            raise ArgumentError("puncture ratio thresholds must be >= 1")
        if self.domain_mode not in DOMAIN_MODES:
            raise ArgumentError(f"domain mode must be one of {DOMAIN_MODES}, got '{self.domain_mode}'")
        if self.fixed_radius is not None and not self.fixed_radius > 0:
            raise ArgumentError(f"fixed radius must be positive, got {self.fixed_radius}")
        if self.energy_measure not in ("planar", "cap"):
            raise ArgumentError(f"energy measure must be 'planar' or 'cap', got '{self.energy_measure}'")
        if self.omt_method not in ("newton", "gradient"):
            raise ArgumentError(f"OMT method must be 'newton' or 'gradient', got '{self.omt_method}'")
        if self.axis is not None and np.linalg.norm(self.axis) == 0:
            raise ArgumentError("alignment axis must be nonzero")
        return self

    def resolved_radius(self) -> Optional[float]:
        """Radius forced by the domain mode, or None for the adaptive search."""
        if self.fixed_radius is not None:
            return float(self.fixed_radius)
        if self.domain_mode == "hemisphere":
            return 1.0
        if self.domain_mode == "sphere":
            return SPHERE_RADIUS
        return None


@dataclass
class PipelineReport:
    """What a pipeline run found and how long each stage took."""

    provenance: str
    r_star: float = float("nan")
    z_star: float = float("nan")
    trace: List[Tuple[float, float]] = field(default_factory=list)
    failures: List[Tuple[float, str]] = field(default_factory=list)
    polished_energy: float = float("nan")
    omt_residual: float = float("nan")
    omt_iterations: int = 0
    distortion: Dict[str, float] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    domain_mode: str = "adaptive"
    lam: Optional[float] = None
    corners: List[int] = field(default_factory=list)
    refilled_faces: List[List[int]] = field(default_factory=list)
    puncture: Dict[str, object] = field(default_factory=dict)
    flatten: Dict[str, object] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["trace"] = [[float(r), float(f)] for r, f in self.trace]
        data["failures"] = [[float(r), reason] for r, reason in self.failures]
        data["flatten"] = {k: v for k, v in self.flatten.items() if isinstance(v, (int, float, bool, str))}
        return data


@dataclass(eq=False)
class CapMap:
    """Final parameterization: unit-sphere positions on the cap Z >= Z*."""

    positions: np.ndarray
    faces: np.ndarray
    spec: CapSpec
    provenance: str
    planar: Optional[PlanarMap] = None
    corners: List[int] = field(default_factory=list)
    refilled_faces: List[int] = field(default_factory=list)

    # area and angle metrics treat this image as spherical
    spherical = True

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    def as_mesh(self) -> TriangleMesh:
        return TriangleMesh(self.positions, self.faces)

    def planar_positions(self) -> np.ndarray:
        return cap_flatten(self.positions)

    def flipped_faces(self) -> np.ndarray:
        """Faces whose normal points into the cap solid."""
        a, b, c = (self.positions[self.faces[:, k]] for k in range(3))
        normals = np.cross(b - a, c - a)
        outward = np.einsum("ij,ij->i", normals, a + b + c)
        if len(self.refilled_faces):
            outward[self.refilled_faces] = -normals[self.refilled_faces, 2]
        return np.flatnonzero(outward <= 0)

    def check(self, stage: str = "project") -> "CapMap":
        """Raise if a cap invariant is violated."""
        norms = np.linalg.norm(self.positions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise FlipError(f"cap positions leave the unit sphere (max error {np.max(np.abs(norms - 1)):.3g})",
                            stage=stage)
        low = np.flatnonzero(self.positions[:, 2] < self.spec.zstar - 1e-9)
        if len(low):
            raise FlipError(f"{len(low)} vertices fall below Z* = {self.spec.zstar:.6g}", stage=stage)
        flipped = self.flipped_faces()
        if len(flipped):
            raise FlipError(f"{len(flipped)} flipped spherical face(s), first {flipped[:5].tolist()}",
                            faces=flipped, stage=stage)
        return self

    @classmethod
    def from_report(cls, cap_mesh: TriangleMesh, report: Dict[str, object]) -> "CapMap":
        """Rebuild a CapMap from a saved cap mesh and its JSON report."""
        try:
            spec = cap_from_radius(float(report["r_star"]))
        except (KeyError, TypeError, ValueError):
            raise ArgumentError("report lacks a valid r_star")
        refilled = report.get("refilled_faces") or []
        face_ids = []
        if refilled:
            lookup = {tuple(f): i for i, f in enumerate(cap_mesh.faces.tolist())}
            face_ids = [lookup[tuple(f)] for f in refilled if tuple(f) in lookup]
        positions = np.asarray(cap_mesh.vertices, dtype=float)
        positions = positions / np.linalg.norm(positions, axis=1)[:, None]
        return cls(positions=positions, faces=np.asarray(cap_mesh.faces), spec=spec,
                   provenance=str(report.get("provenance", "open")),
                   corners=[int(c) for c in report.get("corners", [])], refilled_faces=face_ids)


@contextmanager
def _stage(name: str, timings: Dict[str, float]):
    """Tag escaping errors with the stage name and time the stage."""
    started = time.time()
    try:
        yield
    except CapMapError as e:
        raise e.with_stage(name)
    finally:
        timings[name] = timings.get(name, 0.0) + time.time() - started


# ---------------------------------------------------------------------------
# Objective and radius search
# ---------------------------------------------------------------------------

def conformal_energy(surface: TriangleMesh, planar: PlanarMap, measure: str = "planar") -> float:
    """Area-weighted mean of |mu|^2 for the map from the planar image back to the surface.

    Args:
        surface: Original mesh
        planar: Candidate planar map (already scaled and transported)
        measure: 'planar' weights faces by planar image area, 'cap' by the
            spherical area of their cap image

    Returns:
        Value in [0, 1)
    """
    planar.check_orientation(stage="radius-search")
    mu = face_beltrami(planar, surface)
    if measure == "cap":
        weights = spherical_triangle_areas(cap_embed(planar.positions), planar.faces)
    elif measure == "planar":
        weights = triangle_areas(planar.positions, planar.faces)
    else:
        raise ArgumentError(f"measure must be 'planar' or 'cap', got '{measure}'")
    return float(np.sum(np.abs(mu) ** 2 * weights) / np.sum(weights))


@dataclass
class RadiusSearchResult:
    r_star: float
    omt: OMTResult
    energy: float
    polished_energy: float
    trace: List[Tuple[float, float]]
    failures: List[Tuple[float, str]]


class _RadiusProblem:
    """Everything needed to evaluate the objective at one radius."""

    def __init__(self, surface: TriangleMesh, g: PlanarMap, loop: np.ndarray, closed: bool,
                 opts: PipelineOptions):
        self.surface = surface
        self.g = g
        self.loop = np.asarray(loop)
        self.closed = closed
        self.opts = opts
        self.heights: Dict[float, np.ndarray] = {}
        self.results: Dict[float, OMTResult] = {}

    def _warm_start(self, r: float) -> Optional[np.ndarray]:
        if not self.heights:
            return None
        nearest = min(self.heights, key=lambda prev: abs(prev - r))
        return self.heights[nearest] * (r / nearest) ** 2

    def solve(self, r: float, tol: float, diagnostics_path: Optional[str] = None) -> OMTResult:
        scaled = self.g.scaled(r)
        omega = DomainPolygon.from_loop(scaled.positions, self.loop, radius=r)
        tau = target_measure(self.surface, omega, normalization=self.opts.normalization, planar=self.g, radius=r)
        result = omt_solve(
            scaled, self.surface, omega, tol=tol, tau=tau, heights=self._warm_start(r),
            method=self.opts.omt_method,
            boundary=None if self.closed else self.loop,
            pinned=self.loop if self.closed else None,
            diagnostics_path=diagnostics_path,
        )
        self.heights[r] = result.heights
        self.results[r] = result
        return result

    def energy(self, result: OMTResult) -> float:
        return conformal_energy(self.surface, result.map, self.opts.energy_measure)


def optimize_radius(surface: TriangleMesh, g: PlanarMap, bounds: Tuple[float, float], rtol: float,
                    loop: np.ndarray, closed: bool = False,
                    opts: Optional[PipelineOptions] = None) -> RadiusSearchResult:
    """Bounded 1-D search for the disk radius whose transported map is most conformal.

    Args:
        surface: Original mesh (punctured for closed inputs)
        g: Initial flattening with boundary on the unit circle
        bounds: (r_lo, r_hi)
        rtol: Absolute tolerance in r
        loop: Boundary loop (open) or the 4 corners (closed) spanning Omega
        closed: Pin the loop vertices instead of moving them radially

    Raises:
        PipelineError: every evaluation failed
    """
    opts = opts or PipelineOptions()
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0.0 < lo < hi:
        raise ArgumentError(f"radius bounds need 0 < r_lo < r_hi, got ({lo}, {hi})")
    if not rtol > 0:
        raise ArgumentError(f"rtol must be positive, got {rtol}")

    problem = _RadiusProblem(surface, g, loop, closed, opts)
    trace: List[Tuple[float, float]] = []
    failures: List[Tuple[float, str]] = []

    def objective(r: float) -> float:
        try:
            value = problem.energy(problem.solve(r, opts.omt_tol_search))
        except CapMapError as e:
            logger.warning(f"⚠️ Radius r={r:.4f} failed: {e}")
            failures.append((float(r), str(e)))
            return FAILED_EVALUATION_PENALTY
        trace.append((float(r), value))
        logger.debug(f"F(r={r:.5f}) = {value:.6g}")
        return value

    fixed = opts.resolved_radius()
    if fixed is not None:
        objective(fixed)
    else:
        minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": rtol})

    if not trace:
        raise PipelineError(f"all {len(failures)} radius evaluations failed", failures=failures,
                            stage="radius-search")
    r_star, energy = min(trace, key=lambda item: item[1])
    polished = problem.solve(r_star, opts.omt_tol_final, diagnostics_path=opts.omt_diagnostics)
    polished_energy = problem.energy(polished)
    logger.info(f"Radius search: r* = {r_star:.4f} (Z* = {cap_from_radius(r_star).zstar:.4f}), "
                f"F = {energy:.5f} over {len(trace)} evaluation(s)")
    return RadiusSearchResult(r_star=r_star, omt=polished, energy=energy, polished_energy=polished_energy,
                              trace=trace, failures=failures)


# ---------------------------------------------------------------------------
# Closed-surface puncture
# ---------------------------------------------------------------------------

@dataclass
class PunctureQuad:
    """Adjacent face pair removed to open a closed surface."""

    faces: Tuple[int, int]
    corners: List[int]  # in boundary-loop order of the punctured mesh
    side_ratio: float
    diagonal_ratio: float
    fallback: bool = False

    @property
    def score(self) -> float:
        return max(self.side_ratio, self.diagonal_ratio)

    def to_dict(self) -> Dict[str, object]:
        return {"faces": list(self.faces), "corners": list(self.corners), "side_ratio": self.side_ratio,
                "diagonal_ratio": self.diagonal_ratio, "fallback": self.fallback}


def _quad_from_pair(mesh: TriangleMesh, f1: int, f2: int) -> PunctureQuad:
    t1 = [int(v) for v in mesh.faces[f1]]
    t2 = [int(v) for v in mesh.faces[f2]]
    for k in range(3):
        a, b, c = t1[k], t1[(k + 1) % 3], t1[(k + 2) % 3]
        if b in t2 and a in t2:
            break
    d = next(v for v in t2 if v not in (a, b))
    p = mesh.vertices
    sides = [np.linalg.norm(p[a] - p[d]), np.linalg.norm(p[d] - p[b]),
             np.linalg.norm(p[b] - p[c]), np.linalg.norm(p[c] - p[a])]
    diagonals = [np.linalg.norm(p[a] - p[b]), np.linalg.norm(p[c] - p[d])]
    return PunctureQuad(faces=(int(f1), int(f2)), corners=[a, c, b, d],
                        side_ratio=float(max(sides) / min(sides)),
                        diagonal_ratio=float(max(diagonals) / min(diagonals)))


def find_puncture_quad(mesh: TriangleMesh, rho_side: float = 1.5, rho_diag: float = 1.5) -> PunctureQuad:
    """Pick two adjacent faces near the bottom forming a near-regular quadrilateral.

    Faces are visited breadth-first from those touching the lowest vertex,
    ties broken by distance to it. The first pair passing both ratio
    thresholds is returned; otherwise the best-scoring pair, flagged.
    """
    if mesh.n_faces < 2:
        raise ArgumentError("puncturing needs at least 2 faces")
    adjacency = face_adjacency(mesh)
    if len(adjacency) == 0:
        raise ArgumentError("mesh has no adjacent face pair")
    neighbours: Dict[int, List[int]] = {}
    for fa, fb, _, _ in adjacency:
        neighbours.setdefault(int(fa), []).append(int(fb))
        neighbours.setdefault(int(fb), []).append(int(fa))

    bottom = int(np.argmin(mesh.vertices[:, 2]))
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    distance = np.linalg.norm(centers - mesh.vertices[bottom], axis=1)
    seeds = sorted(np.flatnonzero(np.any(mesh.faces == bottom, axis=1)).tolist(), key=lambda f: distance[f])

    visited = set(seeds)
    queue = deque(seeds)
    best: Optional[PunctureQuad] = None
    seen_pairs = set()
    while queue:
        level = list(queue)
        queue.clear()
        for face in sorted(level, key=lambda f: distance[f]):
            for other in sorted(neighbours.get(face, []), key=lambda f: distance[f]):
                pair = (min(face, other), max(face, other))
                if pair in seen_pairs:
                    continue
                seen_pairs.add(pair)
                quad = _quad_from_pair(mesh, face, other)
                if quad.side_ratio <= rho_side and quad.diagonal_ratio <= rho_diag:
                    logger.debug(f"Puncture quad {quad.corners}: ratios {quad.side_ratio:.3f}/{quad.diagonal_ratio:.3f}")
                    return quad
                if best is None or quad.score < best.score:
                    best = quad
            for other in neighbours.get(face, []):
                if other not in visited:
                    visited.add(other)
                    queue.append(other)

    best.fallback = True
    logger.warning(f"⚠️ No face pair meets ratio thresholds {rho_side}/{rho_diag}; using best pair "
                   f"{list(best.faces)} (side {best.side_ratio:.3f}, diagonal {best.diagonal_ratio:.3f})")
    return best


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def _finish(mesh: TriangleMesh, search: RadiusSearchResult, report: PipelineReport, provenance: str,
            corners: Sequence[int] = (), refilled: Sequence[int] = ()) -> CapMap:
    spec = cap_from_radius(search.r_star)
    positions = cap_embed(search.omt.map.positions)
    cap = CapMap(positions=positions, faces=np.asarray(mesh.faces), spec=spec, provenance=provenance,
                 planar=search.omt.map, corners=list(corners), refilled_faces=list(refilled))
    if provenance == "open":
        loop = validate_topology(mesh).boundary
        positions[loop, 2] = spec.zstar
        positions[loop, :2] *= (np.sqrt(1.0 - spec.zstar ** 2) / np.linalg.norm(positions[loop, :2], axis=1))[:, None]
    else:
        ring = np.asarray(corners)
        others = np.setdiff1d(np.arange(len(positions)), ring)
        if np.any(positions[others, 2] <= spec.zstar + 1e-12):
            report.warnings.append("non-corner vertices touch the boundary circle")
    cap.check(stage="project")

    report.r_star = float(search.r_star)
    report.z_star = float(spec.zstar)
    report.trace = list(search.trace)
    report.failures = list(search.failures)
    report.polished_energy = float(search.polished_energy)
    report.omt_residual = float(search.omt.residual)
    report.omt_iterations = int(search.omt.iterations)
    return cap


def _distortion(mesh: TriangleMesh, cap: CapMap) -> Dict[str, float]:
    summary = distortion_report(mesh, cap)
    return {"mean_abs_d_area": summary.mean_abs_d_area, "mean_abs_d_angle": summary.mean_abs_d_angle}


def parameterize_open(mesh: TriangleMesh, opts: Optional[PipelineOptions] = None) -> Tuple[CapMap, PipelineReport]:
    """Disk conformal map, radius search with optimal transport, lift to the cap."""
    opts = (opts or PipelineOptions()).validate()
    report = PipelineReport(provenance="open", domain_mode=opts.domain_mode)
    timings = report.timings
    with _stage("validate", timings):
        info = validate_topology(mesh)
        if info.kind != "open":
            raise TopologyError("open pipeline needs a mesh with one boundary loop, got a closed mesh")
    with _stage("flatten", timings):
        g = disk_conformal_flatten(mesh)
        report.flatten = dict(g.diagnostics)
    with _stage("radius-search", timings):
        search = optimize_radius(mesh, g, opts.r_bounds, opts.rtol, info.boundary, closed=False, opts=opts)
    with _stage("project", timings):
        cap = _finish(mesh, search, report, "open")
    with _stage("metrics", timings):
        report.distortion = _distortion(mesh, cap)
    logger.info(f"✅ Open parameterization: Z* = {report.z_star:.4f}, "
                f"mean |d_area| = {report.distortion['mean_abs_d_area']:.4f}")
    return cap, report


def parameterize_closed(mesh: TriangleMesh, opts: Optional[PipelineOptions] = None) -> Tuple[CapMap, PipelineReport]:
    """Puncture, stretch-energy flattening, quasi-conformal blend, radius search, lift and refill."""
    opts = (opts or PipelineOptions()).validate()
    report = PipelineReport(provenance="closed", domain_mode=opts.domain_mode, lam=opts.lam)
    timings = report.timings
    with _stage("validate", timings):
        info = validate_topology(mesh)
        if info.kind != "closed":
            raise TopologyError("closed pipeline needs a genus-0 mesh without boundary")
    with _stage("align", timings):
        aligned = align_to_axis(mesh, None if opts.axis is None else np.asarray(opts.axis, dtype=float))
    with _stage("puncture", timings):
        quad = find_puncture_quad(aligned, opts.rho_side, opts.rho_diag)
        punctured = aligned.without_faces(quad.faces)
        report.puncture = quad.to_dict()
        report.corners = list(quad.corners)
        report.refilled_faces = [mesh.faces[f].tolist() for f in quad.faces]
        if quad.fallback:
            report.warnings.append("puncture quad exceeds ratio thresholds")
    with _stage("flatten", timings):
        sem = sem_flatten(punctured, quad.corners)
        g = qc_scale_compose(punctured, sem, opts.lam, (np.asarray(quad.corners), sem.positions[quad.corners]))
        g.check_orientation(stage="flatten")
        report.flatten = {**{f"sem_{k}": v for k, v in sem.diagnostics.items()}, **g.diagnostics,
                          "boundary_policy": "corner-pinned"}
    with _stage("radius-search", timings):
        loop = [c for c in validate_topology(punctured).boundary if c in quad.corners]
        search = optimize_radius(punctured, g, opts.r_bounds, opts.rtol, np.asarray(loop), closed=True, opts=opts)
    with _stage("project", timings):
        cap = _finish(mesh, search, report, "closed", corners=quad.corners, refilled=quad.faces)
    with _stage("metrics", timings):
        report.distortion = _distortion(mesh, cap)
    logger.info(f"✅ Closed parameterization: Z* = {report.z_star:.4f}, lambda = {opts.lam}, "
                f"mean |d_area| = {report.distortion['mean_abs_d_area']:.4f}")
    return cap, report


def parameterize_disk_omt(mesh: TriangleMesh, tol: float = 1e-4, method: str = "newton") -> Tuple[PlanarMap, Dict[str, float]]:
    """Area-preserving map onto the unit disk (uniform density), the planar baseline."""
    info = validate_topology(mesh)
    if info.kind != "open":
        raise TopologyError("disk baseline needs an open mesh")
    g = disk_conformal_flatten(mesh)
    omega = DomainPolygon.from_loop(g.positions, info.boundary, radius=1.0)
    tau = target_measure(mesh, omega, density="uniform")
    result = omt_solve(g, mesh, omega, tol=tol, tau=tau, method=method, density="uniform",
                       boundary=info.boundary)
    summary = distortion_report(mesh, result.map)
    return result.map, {"mean_abs_d_area": summary.mean_abs_d_area,
                        "mean_abs_d_angle": summary.mean_abs_d_angle,
                        "omt_residual": result.residual}


def sweep_lambda(mesh: TriangleMesh, lambdas: Sequence[float],
                 opts: Optional[PipelineOptions] = None) -> List[Dict[str, float]]:
    """Run the closed pipeline for each lambda; failed runs are kept as NaN rows."""
    base = opts or PipelineOptions()
    rows = []
    for lam in lambdas:
        run_opts = PipelineOptions(**{**asdict(base), "lam": float(lam)})
        row = {"lambda": float(lam), "r_star": float("nan"), "z_star": float("nan"),
               "mean_abs_d_area": float("nan"), "mean_abs_d_angle": float("nan")}
        try:
            _, report = parameterize_closed(mesh, run_opts)
            row.update({"r_star": report.r_star, "z_star": report.z_star, **report.distortion})
        except CapMapError as e:
            logger.warning(f"⚠️ lambda={lam}: {e}")
        rows.append(row)
    return rows
