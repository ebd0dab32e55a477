#!/usr/bin/env python3
"""
Stereographic Projection and Spherical Caps

Projection pair between the unit sphere and the plane, plus the cap geometry
shared by the parameterization pipeline and the harmonics basis. A planar
disk of radius r corresponds to the cap Z >= Z* with Z* = (1 - r^2)/(1 + r^2).

The raw pair projects from the north pole, which sends the r-disk to the
lower cap Z <= -Z*. The pipeline works on the upper cap, so cap_embed and
cap_flatten compose the pair with the mirror Z -> -Z. That composition keeps
counterclockwise planar faces counterclockwise when seen from outside.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from capmap_errors import ArgumentError, PoleError

logger = logging.getLogger(__name__)

# Points with Z above 1 - POLE_GUARD are treated as the projection pole
POLE_GUARD = 1e-12
UNIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CapSpec:
    """Spherical cap Z >= zstar with its planar radius and polar angle."""

    zstar: float
    radius: float
    theta_star: float

    def __post_init__(self):
        if not (self.radius > 0 and np.isfinite(self.radius)):
            raise ArgumentError(f"cap radius must be positive, got {self.radius}")
        if not -1.0 < self.zstar < 1.0:
            raise ArgumentError(f"zstar must lie in (-1, 1), got {self.zstar}")
        expected = (1.0 - self.radius ** 2) / (1.0 + self.radius ** 2)
        if abs(expected - self.zstar) > 1e-12 or abs(np.cos(self.theta_star) - self.zstar) > 1e-12:
            raise ArgumentError(
                f"inconsistent cap: zstar={self.zstar}, radius={self.radius}, theta_star={self.theta_star}")

    @classmethod
    def from_zstar(cls, zstar: float) -> "CapSpec":
        if not -1.0 < zstar < 1.0:
            raise ArgumentError(f"zstar must lie in (-1, 1), got {zstar}")
        radius = float(np.sqrt((1.0 - zstar) / (1.0 + zstar)))
        return cap_from_radius(radius)

    @property
    def area(self) -> float:
        return cap_area(self)

    def to_dict(self) -> dict:
        return {"zstar": self.zstar, "radius": self.radius, "theta_star": self.theta_star}


def cap_from_radius(r: float) -> CapSpec:
    """Cap whose boundary circle is the image of the planar circle of radius r."""
    r = float(r)
    if not (r > 0 and np.isfinite(r)):
        raise ArgumentError(f"cap radius must be positive, got {r}")
    zstar = (1.0 - r * r) / (1.0 + r * r)
    return CapSpec(zstar=zstar, radius=r, theta_star=float(np.arccos(zstar)))


def cap_area(spec: CapSpec) -> float:
    """Spherical area 2*pi*(1 - Z*), equal to the sigma-mass of the r-disk."""
    return 4.0 * np.pi * spec.radius ** 2 / (1.0 + spec.radius ** 2)


def sigma_density(q: np.ndarray) -> np.ndarray:
    """Pull-back of the spherical area element: 4 / (1 + |q|^2)^2."""
    q = np.asarray(q, dtype=float)
    return 4.0 / (1.0 + np.sum(q * q, axis=-1)) ** 2


def stereographic_project(p: np.ndarray) -> np.ndarray:
    """Project unit vectors from the north pole onto the plane Z = 0.

    Args:
        p: A unit 3-vector or an (n, 3) array of them

    Returns:
        Planar points (X, Y) / (1 - Z), same leading shape as p

    Raises:
        PoleError: a point lies within POLE_GUARD of the north pole
        ArgumentError: a point is not on the unit sphere
    """
    p = np.asarray(p, dtype=float)
    norms = np.linalg.norm(p, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ArgumentError(f"points must be unit vectors (max norm error {np.max(np.abs(norms - 1.0)):.3g})")
    denom = 1.0 - p[..., 2]
    if np.any(denom < POLE_GUARD):
        raise PoleError("cannot project the north pole")
    return p[..., :2] / denom[..., None]


def inverse_stereographic(q: np.ndarray) -> np.ndarray:
    """Map planar points onto the unit sphere minus the north pole."""
    q = np.asarray(q, dtype=float)
    s = np.sum(q * q, axis=-1)
    out = np.empty(q.shape[:-1] + (3,))
    out[..., 0] = 2.0 * q[..., 0]
    out[..., 1] = 2.0 * q[..., 1]
    out[..., 2] = s - 1.0
    out /= (1.0 + s)[..., None]
    return out


def mirror_z(p: np.ndarray) -> np.ndarray:
    """Reflect points through the plane Z = 0."""
    out = np.array(p, dtype=float)
    out[..., 2] = -out[..., 2]
    return out


def cap_embed(q: np.ndarray) -> np.ndarray:
    """Planar points to the upper cap: the r-circle lands on Z = Z*(r)."""
    return mirror_z(inverse_stereographic(q))


def cap_flatten(p: np.ndarray) -> np.ndarray:
    """Inverse of cap_embed: projects from the south pole."""
    return stereographic_project(mirror_z(p))


def spherical_angles(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Polar angle theta = arccos(Z) and azimuth phi = atan2(Y, X)."""
    p = np.asarray(p, dtype=float)
    theta = np.arccos(np.clip(p[..., 2], -1.0, 1.0))
    phi = np.arctan2(p[..., 1], p[..., 0])
    return theta, phi


def from_spherical_angles(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    s = np.sin(theta)
    return np.stack([s * np.cos(phi), s * np.sin(phi), np.cos(theta)], axis=-1)
