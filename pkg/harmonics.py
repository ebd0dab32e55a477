#!/usr/bin/env python3
"""
Adaptive Harmonics on a Spherical Cap

Real-valued basis functions orthonormal over the cap Z >= Z*, built from
associated Legendre polynomials whose argument is stretched so that
[Z*, 1] covers [-1, 1]. At Z* = -1 the basis is the ordinary real
spherical harmonics; at Z* = 0 it is the hemispherical one.

Column order of every design matrix and coefficient table is
(0,0), (1,-1), (1,0), (1,1), (2,-2), ..., i.e. column n^2 + n + m.
"""

import json
import logging
from dataclasses import dataclass, field
from math import lgamma
from typing import Dict, Optional, Tuple

import numpy as np

from capmap_errors import ArgumentError, DegenerateShapeError, IllPosedFitError
from projection import spherical_angles

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
DOMAIN_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ShiftParams:
    """Affine map x -> q1*x + q2 sending [Z*, 1] onto [-1, 1]."""

    zstar: float
    q1: float
    q2: float

    @classmethod
    def from_zstar(cls, zstar: float) -> "ShiftParams":
        zstar = float(zstar)
        if not -1.0 <= zstar < 1.0:
            raise ArgumentError(f"Z* must lie in [-1, 1), got {zstar}")
        q1 = 2.0 / (1.0 - zstar)
        q2 = -(1.0 + zstar) / (1.0 - zstar)
        return cls(zstar=zstar, q1=q1, q2=q2)

    @property
    def theta_star(self) -> float:
        return float(np.arccos(self.zstar))

    def shift(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.q1 * np.asarray(x, dtype=float) + self.q2, -1.0, 1.0)


def basis_index(n: int, m: int) -> int:
    return n * n + n + m


def basis_size(order: int) -> int:
    return (order + 1) ** 2


def _alp_table(order: int, x: np.ndarray) -> np.ndarray:
    """All P_n^m(x) for 0 <= m <= n <= order, shape (order+1, order+1, len(x)), indexed [n, m]."""
    x = np.asarray(x, dtype=float)
    table = np.zeros((order + 1, order + 1) + x.shape)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    diagonal = np.ones_like(x)
    for m in range(order + 1):
        if m > 0:
            # P_m^m = -(2m-1) sqrt(1-x^2) P_{m-1}^{m-1}
            diagonal = -(2 * m - 1) * s * diagonal
        table[m, m] = diagonal
        if m + 1 <= order:
            table[m + 1, m] = x * (2 * m + 1) * diagonal
        for n in range(m + 2, order + 1):
            table[n, m] = (x * (2 * n - 1) * table[n - 1, m] - (n + m - 1) * table[n - 2, m]) / (n - m)
    return table


def _check_degree(n: int, m: int) -> None:
    if n < 0 or m < 0 or m > n:
        raise ArgumentError(f"need 0 <= m <= n, got n={n}, m={m}")


def alp(n: int, m: int, x) -> np.ndarray:
    """Associated Legendre polynomial with the Condon-Shortley phase.

    Args:
        n: Degree >= 0
        m: Order in [0, n]
        x: Scalar or array in [-1, 1]

    Returns:
        P_n^m(x), same shape as x
    """
    _check_degree(n, m)
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ArgumentError("ALP argument must lie in [-1, 1]")
    value = _alp_table(n, np.clip(x, -1.0, 1.0))[n, m]
    return value if value.ndim else float(value)


def shifted_alp(params: ShiftParams, n: int, m: int, x) -> np.ndarray:
    """P_n^m(q1*x + q2) for x in [Z*, 1]."""
    x = np.asarray(x, dtype=float)
    if np.any(x < params.zstar - DOMAIN_TOLERANCE) or np.any(x > 1.0 + DOMAIN_TOLERANCE):
        raise ArgumentError(f"shifted ALP argument must lie in [{params.zstar:.6g}, 1]")
    return alp(n, m, params.shift(x))


def normalization(params: ShiftParams, n: int, m: int) -> float:
    """Constant making each basis function unit-norm over the cap."""
    m = abs(m)
    return float(np.sqrt(params.q1 * (2 * n + 1) / (4.0 * np.pi) * np.exp(lgamma(n - m + 1) - lgamma(n + m + 1))))


def _check_cap_angles(params: ShiftParams, theta: np.ndarray) -> None:
    if np.any(theta < -DOMAIN_TOLERANCE) or np.any(theta > params.theta_star + DOMAIN_TOLERANCE):
        raise ArgumentError(f"theta must lie in [0, {params.theta_star:.6g}] for Z* = {params.zstar:.6g}")


def _basis_columns(params: ShiftParams, order: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    table = _alp_table(order, params.shift(np.cos(theta)))
    columns = np.empty((len(theta), basis_size(order)))
    root2 = np.sqrt(2.0)
    for n in range(order + 1):
        columns[:, basis_index(n, 0)] = normalization(params, n, 0) * table[n, 0]
        for m in range(1, n + 1):
            scale = (-1) ** m * root2 * normalization(params, n, m) * table[n, m]
            columns[:, basis_index(n, m)] = scale * np.cos(m * phi)
            columns[:, basis_index(n, -m)] = scale * np.sin(m * phi)
    return columns


def ah_eval(zstar: float, n: int, m: int, theta, phi) -> np.ndarray:
    """Evaluate the real basis function A_n^m at cap angles (theta, phi)."""
    if n < 0 or abs(m) > n:
        raise ArgumentError(f"need |m| <= n, got n={n}, m={m}")
    params = ShiftParams.from_zstar(zstar)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.broadcast_to(np.asarray(phi, dtype=float), theta.shape)
    _check_cap_angles(params, theta)
    value = _basis_columns(params, n, theta.ravel(), phi.ravel())[:, basis_index(n, m)].reshape(theta.shape)
    return value if value.size > 1 else float(value[0])


def ah_design_matrix(theta: np.ndarray, phi: np.ndarray, order: int, zstar: float) -> np.ndarray:
    """Design matrix of shape (k, (order+1)^2)."""
    if order < 0:
        raise ArgumentError(f"order must be >= 0, got {order}")
    params = ShiftParams.from_zstar(zstar)
    theta = np.asarray(theta, dtype=float).ravel()
    phi = np.asarray(phi, dtype=float).ravel()
    if theta.shape != phi.shape:
        raise ArgumentError("theta and phi must have the same length")
    _check_cap_angles(params, theta)
    return _basis_columns(params, order, theta, phi)


@dataclass
class AHModel:
    """Fitted coefficients: one column per coordinate."""

    zstar: float
    order: int
    coefficients: np.ndarray
    residual_rms: float = float("nan")
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.order < 0:
            raise ArgumentError(f"order must be >= 0, got {self.order}")
        if self.coefficients.shape != (basis_size(self.order), 3):
            raise ArgumentError(f"coefficient table must be {basis_size(self.order)} x 3, "
                                f"got {self.coefficients.shape}")

    def to_dict(self) -> Dict[str, object]:
        return {
            "zstar": self.zstar,
            "order": self.order,
            "column_order": "row n*n + n + m holds (n, m); m runs -n..n",
            "coefficients": self.coefficients.tolist(),
            "residual_rms": self.residual_rms,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "AHModel":
        try:
            return cls(zstar=float(data["zstar"]), order=int(data["order"]),
                       coefficients=np.asarray(data["coefficients"], dtype=float),
                       residual_rms=float(data.get("residual_rms", float("nan"))),
                       metadata=dict(data.get("metadata", {})))
        except KeyError as e:
            raise ArgumentError(f"AH model is missing field {e}")

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "AHModel":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise ArgumentError(f"AH model file not found: {path}")
        except json.JSONDecodeError as e:
            raise ArgumentError(f"AH model file {path} is not valid JSON: {e}")


def ah_fit(values: np.ndarray, theta: np.ndarray, phi: np.ndarray, order: int, zstar: float) -> AHModel:
    """Least-squares coefficients for per-sample coordinates.

    Args:
        values: (k, 3) coordinates to represent
        theta, phi: Cap angles of the k samples
        order: Maximum degree N
        zstar: Cap bound

    Raises:
        ArgumentError: fewer than (N+1)^2 samples
        IllPosedFitError: design matrix condition number above 1e12
    """
    values = np.asarray(values, dtype=float)
    k = len(values)
    if values.ndim != 2 or values.shape[1] != 3:
        raise ArgumentError(f"values must be k x 3, got {values.shape}")
    if order < 0:
        raise ArgumentError(f"order must be >= 0, got {order}")
    if k < basis_size(order):
        raise ArgumentError(f"order {order} needs at least {basis_size(order)} samples, got {k}")
    design = ah_design_matrix(theta, phi, order, zstar)
    coefficients, _, rank, singular = np.linalg.lstsq(design, values, rcond=None)
    condition = singular[0] / singular[-1] if singular[-1] > 0 else np.inf
    if rank < design.shape[1] or condition > CONDITION_LIMIT:
        raise IllPosedFitError(f"design matrix condition {condition:.3g} exceeds {CONDITION_LIMIT:.0e}; "
                               f"try an order below {order}")
    residual = design @ coefficients - values
    rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    logger.debug(f"AH fit order {order}: {k} samples, condition {condition:.3g}, RMS {rms:.3g}")
    return AHModel(zstar=float(zstar), order=order, coefficients=coefficients, residual_rms=rms)


def ah_reconstruct(model: AHModel, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return ah_design_matrix(theta, phi, model.order, model.zstar) @ model.coefficients


def aspect_ratio(y: np.ndarray, x: np.ndarray) -> Dict[str, float]:
    """Best linear transform y ~ A x and the ratio of its extreme singular values."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ArgumentError("x and y must both be k x 3")
    if len(x) < 3:
        raise ArgumentError("aspect ratio needs at least 3 samples")
    if np.any(np.abs(np.linalg.norm(x, axis=1) - 1.0) > 1e-6):
        raise ArgumentError("x must hold unit directions")
    transform_t, *_ = np.linalg.lstsq(x, y, rcond=None)
    singular = np.linalg.svd(transform_t.T, compute_uv=False)
    if singular[2] < 1e-12 * singular[0]:
        raise DegenerateShapeError(f"linear fit is rank deficient (sigma3/sigma1 = {singular[2] / singular[0]:.3g})")
    return {"sigma1": float(singular[0]), "sigma2": float(singular[1]), "sigma3": float(singular[2]),
            "ratio": float(singular[0] / singular[2])}


def cap_angles(positions: np.ndarray, zstar: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Sample angles from cap positions, clamped into the cap when zstar is given."""
    theta, phi = spherical_angles(np.asarray(positions, dtype=float))
    if zstar is not None:
        theta = np.minimum(theta, np.arccos(zstar))
    return theta, phi


def fit_surface(vertices: np.ndarray, cap_positions: np.ndarray, order: int, zstar: float) -> AHModel:
    """Fit a surface's vertex coordinates against its cap parameterization."""
    theta, phi = cap_angles(cap_positions, zstar)
    model = ah_fit(vertices, theta, phi, order, zstar)
    model.metadata["samples"] = len(theta)
    return model


def surface_aspect_ratio(vertices: np.ndarray, cap_positions: np.ndarray, zstar: float) -> Dict[str, object]:
    """Order-1 reconstruction paired with the cap directions themselves."""
    theta, phi = cap_angles(cap_positions, zstar)
    model = ah_fit(vertices, theta, phi, 1, zstar)
    y = ah_reconstruct(model, theta, phi)
    y = y - y.mean(axis=0)
    result = aspect_ratio(y, np.asarray(cap_positions, dtype=float))
    result["directions"] = "cap positions"
    return result
