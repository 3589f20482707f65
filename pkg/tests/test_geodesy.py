import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wrivinder.errors import WrivinderError
from wrivinder.geodesy import (CRS, EARTH_RADIUS_M, GeoPoint, GeoTransform, enu_to_geo, enu_to_geo_array,
                               geo_to_enu, geo_to_enu_array, geographic_centroid, haversine, haversine_array,
                               local_gsd, wrap_lon)


def chord_distance(lat1, lon1, lat2, lon2, R=EARTH_RADIUS_M):
    """Great-circle distance via the 3D chord between unit vectors (independent of the haversine form)."""
    def unit(lat, lon):
        la, lo = math.radians(lat), math.radians(lon)
        return np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])
    c = np.linalg.norm(unit(lat1, lon1) - unit(lat2, lon2))
    return 2 * R * math.asin(c / 2)


def test_geopoint_validates_ranges():
    GeoPoint(90.0, -180.0)
    with pytest.raises(ValueError):
        GeoPoint(90.5, 0.0)
    with pytest.raises(ValueError):
        GeoPoint(0.0, 180.0)
    with pytest.raises(ValueError):
        GeoPoint(float("nan"), 0.0)


def test_wrap_lon_half_open_interval():
    assert wrap_lon(180.0) == -180.0
    assert wrap_lon(-180.0) == -180.0
    assert wrap_lon(190.0) == pytest.approx(-170.0)


def test_enu_of_anchor_is_origin():
    a = GeoPoint(38.9, -77.0, 12.0)
    assert np.allclose(geo_to_enu([a], a), 0.0)


def test_one_degree_north_at_equator():
    # R * pi / 180 written out independently
    expected = 6371000.0 * 3.141592653589793 / 180.0
    enu = geo_to_enu([GeoPoint(1.0, 0.0)], GeoPoint(0.0, 0.0))[0]
    assert enu[1] == pytest.approx(expected, abs=1e-6)
    assert enu[1] == pytest.approx(111194.93, abs=0.01)
    assert enu[0] == 0.0


def test_east_scaled_by_cos_latitude():
    anchor = GeoPoint(60.0, 10.0)
    enu = geo_to_enu([GeoPoint(60.0, 10.001)], anchor)[0]
    assert enu[0] == pytest.approx(0.001 * 0.5 * 6371000.0 * math.pi / 180.0, rel=1e-9)


def test_anchor_near_pole_rejected():
    with pytest.raises(WrivinderError):
        geo_to_enu([GeoPoint(89.95, 0.0)], GeoPoint(89.95, 0.0))


@settings(max_examples=200, deadline=None)
@given(st.floats(-80, 80), st.floats(-179, 179), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9),
       st.floats(-100, 100))
def test_geo_enu_round_trip(lat0, lon0, dlat, dlon, alt):
    anchor = GeoPoint(lat0, lon0)
    lat, lon = lat0 + dlat, float(wrap_lon(lon0 + dlon))
    enu = geo_to_enu_array(lat, lon, alt, anchor)
    la, lo, al = enu_to_geo_array(enu, anchor)
    assert abs(la - lat) < 1e-9
    assert abs(float(wrap_lon(lo - lon))) < 1e-9
    assert al == pytest.approx(alt, abs=1e-9)


def test_enu_to_geo_returns_geopoints():
    anchor = GeoPoint(10.0, 20.0)
    pts = enu_to_geo(np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 5.0]]), anchor)
    assert pts[0].lat == 10.0 and pts[0].lon == 20.0
    assert pts[1].alt == 5.0 and pts[1].lon > 20.0


@pytest.mark.parametrize("p,q", [((0, 0), (0, 1)), ((38.9, -77.0), (38.901, -77.002)),
                                 ((-33.9, 151.2), (51.5, -0.1)), ((10, 179.9), (10, -179.9))])
def test_haversine_matches_chord_oracle(p, q):
    assert haversine(GeoPoint(*p), GeoPoint(*q)) == pytest.approx(chord_distance(*p, *q), rel=1e-9, abs=1e-6)


def test_haversine_array_vectorized_and_zero():
    d = haversine_array(np.array([0.0, 5.0]), np.array([0.0, 5.0]), np.array([0.0, 5.0]), np.array([0.0, 5.0]))
    assert np.all(d == 0.0)


def test_haversine_of_small_enu_offset():
    # 3 m east at the equator: ENU and great-circle distance agree at the mm level
    anchor = GeoPoint(0.0, 0.0)
    p = enu_to_geo(np.array([3.0, 0.0, 0.0]), anchor)[0]
    assert haversine(anchor, p) == pytest.approx(3.0, abs=1e-3)


def test_geographic_centroid_componentwise():
    c = geographic_centroid([GeoPoint(1.0, 2.0), GeoPoint(3.0, 6.0)])
    assert (c.lat, c.lon) == (2.0, 4.0)
    with pytest.raises(ValueError):
        geographic_centroid([])


def test_geotransform_pixel_round_trip_and_gsd():
    gt = GeoTransform(0.6, 0.0, 0.0, -0.6, 500000.0, 4000000.0, CRS.LOCAL_METERS)
    x, y = gt.apply(10, 20)
    assert (x, y) == (500006.0, 3999988.0)
    col, row = gt.invert(x, y)
    assert (col, row) == pytest.approx((10.0, 20.0))
    assert local_gsd(gt, 0, 0) == pytest.approx(0.6)


def test_lonlat_gsd_at_equator():
    deg = 8.983e-6
    gt = GeoTransform(deg, 0.0, 0.0, -deg, 0.0, 0.0, CRS.LONLAT_DEGREES)
    expected = deg * math.pi / 180.0 * 6371000.0
    assert local_gsd(gt, 0, 0) == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(1.0, abs=2e-3)


def test_local_meters_needs_origin_for_latlon():
    gt = GeoTransform(1.0, 0.0, 0.0, -1.0, 0.0, 0.0, CRS.LOCAL_METERS)
    with pytest.raises(WrivinderError):
        gt.pixel_to_geo(0, 0)
    gt2 = GeoTransform(1.0, 0.0, 0.0, -1.0, 0.0, 0.0, CRS.LOCAL_METERS, 1.0, GeoPoint(10.0, 10.0))
    p = gt2.pixel_to_geo(0, 0)
    assert (p.lat, p.lon) == pytest.approx((10.0, 10.0))
    col, row = gt2.geo_to_pixel_array(p.lat, p.lon)
    assert (float(col), float(row)) == pytest.approx((0.0, 0.0), abs=1e-6)
