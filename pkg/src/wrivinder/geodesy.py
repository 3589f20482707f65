"""Spherical-earth geographic primitives shared by every stage.

One radius constant backs both the haversine metric and the local
East-North-Up (ENU) tangent frame, so distances measured by the evaluator
and offsets produced by the geolocator agree to float precision.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import WrivinderError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    alt: Optional[float] = None

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not math.isfinite(self.lat):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon < 180.0) or not math.isfinite(self.lon):
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")

    def to_dict(self) -> dict:
        d = {"lat": self.lat, "lon": self.lon}
        if self.alt is not None:
            d["alt"] = self.alt
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeoPoint":
        return cls(float(d["lat"]), float(d["lon"]), None if d.get("alt") is None else float(d["alt"]))


def wrap_lon(lon):
    """Wrap longitude(s) into [-180, 180)."""
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


def haversine(a: GeoPoint, b: GeoPoint, radius: float = EARTH_RADIUS_M) -> float:
    """Great-circle distance in meters between two points."""
    return float(haversine_array(a.lat, a.lon, b.lat, b.lon, radius))


def haversine_array(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_M):
    if radius <= 0:
        raise ValueError("earth radius must be positive")
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    h = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _check_anchor(anchor: GeoPoint):
    if abs(anchor.lat) > 89.9:
        raise WrivinderError(f"ENU anchor latitude {anchor.lat} too close to a pole")


def geo_to_enu_array(lat, lon, alt, anchor: GeoPoint, radius: float = EARTH_RADIUS_M) -> np.ndarray:
    """Vectorized lat/lon/alt -> local (east, north, up) meters about ``anchor``."""
    _check_anchor(anchor)
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    alt = np.zeros_like(lat) if alt is None else np.asarray(alt, dtype=float)
    dlat = lat - anchor.lat
    dlon = wrap_lon(lon - anchor.lon)
    if np.any(np.abs(dlat) > 1.0) or np.any(np.abs(dlon) * math.cos(math.radians(anchor.lat)) > 1.0):
        logger.warning("points more than 1 degree from ENU anchor; tangent-plane error grows")
    k = radius * math.pi / 180.0
    east = dlon * math.cos(math.radians(anchor.lat)) * k
    north = dlat * k
    up = alt - (anchor.alt or 0.0)
    return np.stack([east, north, up], axis=-1)


def enu_to_geo_array(enu, anchor: GeoPoint, radius: float = EARTH_RADIUS_M):
    """Inverse of :func:`geo_to_enu_array`; returns (lat, lon, alt) arrays."""
    _check_anchor(anchor)
    enu = np.asarray(enu, dtype=float)
    k = radius * math.pi / 180.0
    lat = anchor.lat + enu[..., 1] / k
    lon = wrap_lon(anchor.lon + enu[..., 0] / (k * math.cos(math.radians(anchor.lat))))
    alt = (anchor.alt or 0.0) + enu[..., 2]
    return lat, lon, alt


def geo_to_enu(points: Iterable[GeoPoint], anchor: GeoPoint, radius: float = EARTH_RADIUS_M) -> np.ndarray:
    pts = list(points)
    lat = [p.lat for p in pts]
    lon = [p.lon for p in pts]
    alt = [p.alt or 0.0 for p in pts]
    return geo_to_enu_array(lat, lon, alt, anchor, radius).reshape(len(pts), 3)


def enu_to_geo(enu, anchor: GeoPoint, radius: float = EARTH_RADIUS_M) -> list:
    enu = np.atleast_2d(np.asarray(enu, dtype=float))
    lat, lon, alt = enu_to_geo_array(enu, anchor, radius)
    return [GeoPoint(float(a), float(o), float(h)) for a, o, h in zip(lat, lon, alt)]


def geographic_centroid(points: Sequence[GeoPoint]) -> GeoPoint:
    """Component-wise mean of lat and lon (valid at scene scale)."""
    if not points:
        raise ValueError("centroid of empty point set")
    lat = float(np.mean([p.lat for p in points]))
    lon = float(np.mean([p.lon for p in points]))
    return GeoPoint(lat, lon)


class CRS(str, enum.Enum):
    LONLAT_DEGREES = "LONLAT_DEGREES"
    LOCAL_METERS = "LOCAL_METERS"


@dataclass(frozen=True)
class GeoTransform:
    """World-file affine: pixel-center (col, row) -> (x, y) geographic coordinates.

    ``x = a*col + b*row + c`` and ``y = d*col + e*row + f``. For
    LONLAT_DEGREES x is longitude and y latitude; for LOCAL_METERS they are
    easting/northing in meters relative to ``origin`` (when supplied).
    """

    a: float
    d: float
    b: float
    e: float
    c: float
    f: float
    crs: CRS = CRS.LOCAL_METERS
    gsd: float = 0.0
    origin: Optional[GeoPoint] = None

    @property
    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    def apply(self, col, row) -> Tuple[np.ndarray, np.ndarray]:
        col = np.asarray(col, dtype=float)
        row = np.asarray(row, dtype=float)
        return self.a * col + self.b * row + self.c, self.d * col + self.e * row + self.f

    def invert(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float) - self.c
        y = np.asarray(y, dtype=float) - self.f
        det = self.det
        col = (self.e * x - self.b * y) / det
        row = (-self.d * x + self.a * y) / det
        return col, row

    def pixel_to_geo_array(self, col, row):
        """Pixel centers -> (lat, lon) arrays."""
        x, y = self.apply(col, row)
        if self.crs == CRS.LONLAT_DEGREES:
            return y, wrap_lon(x)
        if self.origin is None:
            raise WrivinderError("LOCAL_METERS geotransform needs an origin GeoPoint to produce lat/lon")
        enu = np.stack([x, y, np.zeros_like(x)], axis=-1)
        lat, lon, _ = enu_to_geo_array(enu, self.origin)
        return lat, lon

    def geo_to_pixel_array(self, lat, lon):
        if self.crs == CRS.LONLAT_DEGREES:
            return self.invert(lon, lat)
        if self.origin is None:
            raise WrivinderError("LOCAL_METERS geotransform needs an origin GeoPoint")
        enu = geo_to_enu_array(lat, lon, None, self.origin)
        return self.invert(enu[..., 0], enu[..., 1])

    def pixel_to_geo(self, col: float, row: float) -> GeoPoint:
        lat, lon = self.pixel_to_geo_array(col, row)
        return GeoPoint(float(lat), float(lon))

    def to_dict(self) -> dict:
        d = {"affine": [self.a, self.d, self.b, self.e, self.c, self.f],
             "crs": self.crs.value, "gsd": self.gsd}
        if self.origin is not None:
            d["origin"] = self.origin.to_dict()
        return d


def geotransform_apply(gt: GeoTransform, col, row):
    return gt.apply(col, row)


def geotransform_invert(gt: GeoTransform, x, y):
    return gt.invert(x, y)


def local_gsd(gt: GeoTransform, col: float, row: float, radius: float = EARTH_RADIUS_M) -> float:
    """Meters per pixel at a pixel position (square root of the metric Jacobian determinant)."""
    if gt.crs == CRS.LOCAL_METERS:
        return math.sqrt(abs(gt.det))
    _, lat = gt.apply(col, row)
    k = radius * math.pi / 180.0
    # columns of the pixel Jacobian, converted from degrees to local meters
    cl = math.cos(math.radians(float(lat)))
    jac = np.array([[gt.a * cl * k, gt.b * cl * k], [gt.d * k, gt.e * k]])
    return math.sqrt(abs(np.linalg.det(jac)))
