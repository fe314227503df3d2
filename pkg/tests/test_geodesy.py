"""Frame conversions, map projection, and orbit polynomial invariants."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from sargcp.errors import OrbitValidityError, ValidationError
from sargcp.geodesy import (
    WGS84_A,
    WGS84_B,
    WGS84_E2,
    Ecef,
    Geodetic,
    MapGrid,
    OrbitModel,
    ecef_to_geodetic,
    enu_basis,
    enu_rotation,
    fit_orbit,
    geodetic_to_ecef,
    geodetic_to_map,
    make_local_enu,
    map_to_geodetic,
    utm_zone,
)


class TestEcefGeodetic:
    def test_equator_prime_meridian_anchor(self):
        g = ecef_to_geodetic(Ecef(WGS84_A, 0.0, 0.0))
        assert abs(g.lat_deg) < 1e-12
        assert abs(g.lon_deg) < 1e-12
        assert abs(g.height_m) < 1e-7

    def test_pole_anchor(self):
        g = ecef_to_geodetic(Ecef(0.0, 0.0, WGS84_B))
        assert abs(g.lat_deg - 90.0) < 1e-9
        assert abs(g.height_m) < 1e-7

    @pytest.mark.parametrize("lat", [-89.9, -60.0, -30.0, 0.0, 23.5, 45.0, 65.0, 84.9, 89.99])
    @pytest.mark.parametrize("lon", [-179.0, -91.3, 0.0, 25.47, 121.9])
    @pytest.mark.parametrize("h", [-100.0, 0.0, 514000.0])
    def test_round_trip(self, lat, lon, h):
        g0 = Geodetic(lat, lon, h)
        p = geodetic_to_ecef(g0)
        g1 = ecef_to_geodetic(p)
        p1 = geodetic_to_ecef(g1)
        assert p.distance_to(p1) < 1e-6, f"round trip moved {p.distance_to(p1)} m"

    def test_height_is_along_normal(self):
        # lifting a surface point by h must move it exactly h along the normal
        g = Geodetic(60.2, 25.5, 0.0)
        p0 = geodetic_to_ecef(g)
        p1 = geodetic_to_ecef(Geodetic(g.lat_deg, g.lon_deg, 250.0))
        assert abs(p0.distance_to(p1) - 250.0) < 1e-9


class TestEnu:
    def test_equator_anchor(self):
        basis = enu_rotation(0.0, 0.0)
        expected = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        assert np.allclose(basis, expected, atol=1e-15)

    def test_orthonormal_right_handed(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            lat = rng.uniform(-89.0, 89.0)
            lon = rng.uniform(-180.0, 180.0)
            basis = enu_rotation(lat, lon)
            assert np.allclose(basis @ basis.T, np.eye(3), atol=1e-14)
            assert abs(np.linalg.det(basis) - 1.0) < 1e-14

    def test_up_matches_ellipsoid_normal(self):
        # independent normal: gradient of the ellipsoid implicit function
        rng = np.random.default_rng(11)
        for _ in range(20):
            g = Geodetic(rng.uniform(-85, 85), rng.uniform(-180, 180), 0.0)
            p = geodetic_to_ecef(g)
            grad = np.array([
                2 * p.x / WGS84_A**2,
                2 * p.y / WGS84_A**2,
                2 * p.z / WGS84_B**2,
            ])
            grad /= np.linalg.norm(grad)
            up = enu_basis(p)[2]
            assert np.allclose(up, grad, atol=1e-9)

    def test_local_frame_round_trip(self):
        origin = geodetic_to_ecef(Geodetic(52.5, 13.3, 40.0))
        frame = make_local_enu(origin)
        p = geodetic_to_ecef(Geodetic(52.51, 13.32, 95.0))
        back = frame.to_ecef(frame.to_local(p))
        assert p.distance_to(back) < 1e-8


def _meridian_arc(lat_deg):
    # numeric meridian distance as an independent oracle for the projection
    def integrand(phi):
        s = math.sin(phi)
        return WGS84_A * (1 - WGS84_E2) / (1 - WGS84_E2 * s * s) ** 1.5

    val, _ = quad(integrand, 0.0, math.radians(lat_deg), epsabs=1e-10, epsrel=1e-12)
    return val


class TestMapProjection:
    def test_zone_selection(self):
        assert utm_zone(Geodetic(52.5, 13.3, 0.0)) == "33N"
        assert utm_zone(Geodetic(65.0, 25.5, 0.0)) == "35N"
        assert utm_zone(Geodetic(-33.9, 18.4, 0.0)) == "34S"
        assert utm_zone(Geodetic(10.0, 180.0, 0.0)) == "1N"

    @pytest.mark.parametrize("lat", [-72.0, -34.5, -5.0, 0.0, 14.2, 52.52, 65.01, 79.0])
    @pytest.mark.parametrize("dlon", [-2.9, -0.8, 0.0, 1.4, 2.9])
    def test_round_trip_inside_zone(self, lat, dlon):
        zone = "33N" if lat >= 0 else "33S"
        g0 = Geodetic(lat, 15.0 + dlon, 0.0)  # zone 33 central meridian is 15 E
        m = geodetic_to_map(g0, zone)
        g1 = map_to_geodetic(m)
        p0 = geodetic_to_ecef(g0)
        p1 = geodetic_to_ecef(g1)
        assert p0.distance_to(p1) < 1e-3

    @pytest.mark.parametrize("lat", [10.0, 45.0, 60.5])
    def test_central_meridian_northing_is_scaled_arc(self, lat):
        m = geodetic_to_map(Geodetic(lat, 15.0, 0.0), "33N")
        assert abs(m.easting_m - 500000.0) < 1e-6
        expected = 0.9996 * _meridian_arc(lat)
        assert abs(m.northing_m - expected) < 1e-5

    def test_central_meridian_scale(self):
        # ground distance along the meridian maps to 0.9996 of itself
        d = 0.001  # degrees
        m1 = geodetic_to_map(Geodetic(52.0, 15.0, 0.0), "33N")
        m2 = geodetic_to_map(Geodetic(52.0 + d, 15.0, 0.0), "33N")
        arc = _meridian_arc(52.0 + d) - _meridian_arc(52.0)
        assert abs((m2.northing_m - m1.northing_m) / arc - 0.9996) < 1e-9

    def test_southern_hemisphere_false_northing(self):
        m = geodetic_to_map(Geodetic(-0.001, 15.0, 0.0), "33S")
        assert m.northing_m < 10000000.0
        assert m.northing_m > 9999000.0

    def test_bad_zone_rejected(self):
        with pytest.raises(ValidationError):
            map_to_geodetic(MapGrid(500000.0, 0.0, "99X"))


class TestOrbitModel:
    def _cubic(self):
        # hand-picked cubic: position and derivatives known in closed form
        coeffs = np.array([
            [7000e3, 10.0, 100.0],
            [10.0, 7500.0, -20.0],
            [-4.4, 0.5, 3.3],
            [0.01, -0.02, 0.005],
        ])
        return OrbitModel(100.0, coeffs, 90.0, 110.0), coeffs

    def test_matches_manual_evaluation(self):
        orbit, c = self._cubic()
        dt = 3.7
        expected = c[0] + c[1] * dt + c[2] * dt**2 + c[3] * dt**3
        assert np.allclose(orbit.position(100.0 + dt), expected, rtol=0, atol=1e-9)
        vel = c[1] + 2 * c[2] * dt + 3 * c[3] * dt**2
        assert np.allclose(orbit.velocity(100.0 + dt), vel, rtol=0, atol=1e-12)
        acc = 2 * c[2] + 6 * c[3] * dt
        assert np.allclose(orbit.acceleration(100.0 + dt), acc, rtol=0, atol=1e-12)

    def test_velocity_matches_central_difference(self):
        orbit, _ = self._cubic()
        t, eps = 104.0, 1e-3
        fd = (orbit.position(t + eps) - orbit.position(t - eps)) / (2 * eps)
        v = orbit.velocity(t)
        assert np.linalg.norm(fd - v) < 1e-6 * max(1.0, np.linalg.norm(v))

    def test_vectorized_evaluation(self):
        orbit, _ = self._cubic()
        ts = np.linspace(92.0, 108.0, 17)
        pos = orbit.position(ts)
        assert pos.shape == (17, 3)
        assert np.allclose(pos[4], orbit.position(ts[4]))

    def test_validity_enforced(self):
        orbit, _ = self._cubic()
        with pytest.raises(OrbitValidityError):
            orbit.position(89.0)
        with pytest.raises(OrbitValidityError):
            orbit.velocity(np.array([100.0, 111.0]))

    def test_degree_below_two_rejected(self):
        with pytest.raises(ValidationError):
            OrbitModel(0.0, np.zeros((2, 3)), -1.0, 1.0)

    def test_fit_recovers_polynomial(self):
        orbit, _ = self._cubic()
        ts = np.linspace(90.0, 110.0, 40)
        fitted = fit_orbit(ts, orbit.position(ts), degree=3)
        probe = np.linspace(91.0, 109.0, 7)
        assert np.allclose(fitted.position(probe), orbit.position(probe), atol=1e-6)
