#!/usr/bin/env python3
"""
Tests for projection: stereographic maps, cap radius / Z* conversion, cap area
"""

import numpy as np
import pytest

from capmap_errors import ArgumentError, PoleError
from projection import (
    CapSpec,
    cap_area,
    cap_embed,
    cap_flatten,
    cap_from_radius,
    from_spherical_angles,
    inverse_stereographic,
    sigma_density,
    spherical_angles,
    stereographic_project,
)


@pytest.mark.parametrize("point, expected", [
    ((0.0, 0.0, -1.0), (0.0, 0.0)),
    ((1.0, 0.0, 0.0), (1.0, 0.0)),
    ((0.6, 0.0, 0.8), (3.0, 0.0)),
])
def test_stereographic_project(point, expected):
    np.testing.assert_allclose(stereographic_project(np.array(point)), expected, atol=1e-12)


@pytest.mark.parametrize("planar, expected", [
    ((0.0, 0.0), (0.0, 0.0, -1.0)),
    ((1.0, 0.0), (1.0, 0.0, 0.0)),
    ((3.0, 0.0), (0.6, 0.0, 0.8)),
])
def test_inverse_stereographic(planar, expected):
    np.testing.assert_allclose(inverse_stereographic(np.array(planar)), expected, atol=1e-12)


def test_north_pole_is_rejected():
    with pytest.raises(PoleError):
        stereographic_project(np.array([0.0, 0.0, 1.0]))


def test_non_unit_point_is_rejected():
    with pytest.raises(ArgumentError):
        stereographic_project(np.array([0.0, 0.0, 0.5]))


def test_inverse_undoes_projection(rng):
    q = rng.normal(size=(200, 2)) * 3.0
    np.testing.assert_allclose(stereographic_project(inverse_stereographic(q)), q, atol=1e-9)


def test_cap_embed_maps_disk_onto_upper_cap(rng):
    spec = cap_from_radius(1.5)
    radius = 1.5 * np.sqrt(rng.uniform(size=300))
    angle = rng.uniform(0, 2 * np.pi, size=300)
    q = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    p = cap_embed(q)
    assert np.all(p[:, 2] >= spec.zstar - 1e-12)
    np.testing.assert_allclose(cap_embed(np.array([0.0, 0.0])), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(cap_flatten(p), q, atol=1e-9)


def test_boundary_circle_lands_on_zstar():
    phi = np.linspace(0, 2 * np.pi, 17)
    p = cap_embed(2.0 * np.column_stack([np.cos(phi), np.sin(phi)]))
    np.testing.assert_allclose(p[:, 2], cap_from_radius(2.0).zstar, atol=1e-12)


@pytest.mark.parametrize("r, zstar", [(1.0, 0.0), (np.sqrt(3.0), -0.5), (1.0 / np.sqrt(3.0), 0.5)])
def test_cap_from_radius(r, zstar):
    spec = cap_from_radius(r)
    assert spec.zstar == pytest.approx(zstar, abs=1e-12)
    assert spec.theta_star == pytest.approx(np.arccos(zstar))


def test_cap_spec_round_trip():
    spec = CapSpec.from_zstar(0.3)
    assert spec.zstar == pytest.approx(0.3, abs=1e-12)
    assert cap_from_radius(spec.radius).zstar == pytest.approx(0.3, abs=1e-12)


@pytest.mark.parametrize("r", [0.0, -1.0, np.inf])
def test_invalid_radius(r):
    with pytest.raises(ArgumentError):
        cap_from_radius(r)


def test_inconsistent_spec_is_rejected():
    with pytest.raises(ArgumentError):
        CapSpec(zstar=0.0, radius=2.0, theta_star=np.pi / 2)


def test_cap_area():
    assert cap_area(cap_from_radius(1.0)) == pytest.approx(2 * np.pi)
    assert cap_area(cap_from_radius(2.0)) == pytest.approx(16 * np.pi / 5)
    assert cap_area(cap_from_radius(1e6)) == pytest.approx(4 * np.pi, rel=1e-9)
    spec = CapSpec.from_zstar(-0.25)
    assert spec.area == pytest.approx(2 * np.pi * (1 - spec.zstar))


def test_sigma_density_at_origin():
    assert sigma_density(np.zeros(2)) == pytest.approx(4.0)
    assert sigma_density(np.array([1.0, 0.0])) == pytest.approx(1.0)


def test_spherical_angles_round_trip(rng):
    p = rng.normal(size=(100, 3))
    p /= np.linalg.norm(p, axis=1)[:, None]
    theta, phi = spherical_angles(p)
    np.testing.assert_allclose(from_spherical_angles(theta, phi), p, atol=1e-12)
