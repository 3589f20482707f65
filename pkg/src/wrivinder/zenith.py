"""Vertical-direction estimation and the orthographic zenith camera."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AmbiguousVerticalError, DegenerateGeometryError

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 3.0
DEFAULT_RESOLUTION = 1024


def trim_outliers(points: np.ndarray, k: float = 3.0) -> np.ndarray:
    """Mask of points whose distance to the centroid is within median + k*MAD."""
    pts = np.asarray(points, dtype=float)
    finite = np.all(np.isfinite(pts), axis=1)
    keep = finite.copy()
    if finite.sum() < 3:
        return keep
    p = pts[finite]
    r = np.linalg.norm(p - p.mean(axis=0), axis=1)
    med = np.median(r)
    mad = np.median(np.abs(r - med))
    cutoff = med + k * mad + 1e-9 * max(med, 1e-300)
    keep[finite] = r <= cutoff
    return keep


@dataclass(frozen=True)
class PrincipalFrame:
    centroid: np.ndarray
    axes: np.ndarray         # rows v1, v2, v3
    eigenvalues: np.ndarray  # descending

    @property
    def v1(self):
        return self.axes[0]

    @property
    def v2(self):
        return self.axes[1]

    @property
    def v3(self):
        return self.axes[2]

    @property
    def radius(self) -> float:
        return float(np.sqrt(max(self.eigenvalues.sum(), 0.0)))


def _pca(p: np.ndarray):
    c = p.mean(axis=0)
    d = p - c
    cov = d.T @ d / len(p)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    axes = v[:, order].T.copy()
    # deterministic sign: largest-magnitude component of each axis positive
    for i in range(3):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    if np.linalg.det(axes) < 0:
        axes[1] = -axes[1]
    return c, axes, w


def principal_axes(points: np.ndarray) -> PrincipalFrame:
    """Centroid and covariance eigensystem of a cloud after one round of outlier trimming."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < 3:
        raise DegenerateGeometryError(f"PCA needs at least 3 points, got {len(pts)}")
    keep = trim_outliers(pts)
    if keep.sum() >= 3:
        pts = pts[keep]
    c, axes, w = _pca(pts)
    if w[0] <= 0 or w[1] <= 1e-12 * w[0]:
        raise DegenerateGeometryError("point cloud covariance has rank < 2")
    return PrincipalFrame(c, axes, w)


def resolve_vertical(frame: PrincipalFrame, camera_centers: Optional[np.ndarray],
                     ground_points: Optional[np.ndarray] = None) -> np.ndarray:
    """Choose the sign of v3 so that the mean camera center lies on its positive side.

    When the cameras sit (numerically) in the PCA plane, the sign is taken so
    that ground-labelled points lie below the cameras instead.
    """
    v3 = frame.v3
    tol = 1e-9 * max(frame.radius, 1e-300)
    cams = None if camera_centers is None else np.asarray(camera_centers, dtype=float).reshape(-1, 3)
    if cams is not None and len(cams):
        s = float((cams.mean(axis=0) - frame.centroid) @ v3)
        if abs(s) >= tol:
            return v3 * np.sign(s)
        if ground_points is not None and len(ground_points):
            g = np.asarray(ground_points, dtype=float).reshape(-1, 3)
            gap = float((cams.mean(axis=0) - g.mean(axis=0)) @ v3)
            if abs(gap) >= tol:
                return v3 * np.sign(gap)
    raise AmbiguousVerticalError("cannot resolve the sign of the vertical axis")


@dataclass(frozen=True)
class ZenithCamera:
    rotation: np.ndarray   # rows x_hat, y_hat, z_hat
    position: np.ndarray   # p = c + delta * z_hat
    centroid: np.ndarray
    half_extent_u: float
    half_extent_v: float
    delta: float
    pixels_per_unit: float

    @property
    def x_hat(self):
        return self.rotation[0]

    @property
    def y_hat(self):
        return self.rotation[1]

    @property
    def z_hat(self):
        return self.rotation[2]

    def to_zenith_frame(self, points: np.ndarray) -> np.ndarray:
        """Model points -> (along x_hat, along y_hat, height along z_hat) relative to the centroid."""
        return (np.asarray(points, dtype=float) - self.centroid) @ self.rotation.T

    def from_zenith_frame(self, q: np.ndarray) -> np.ndarray:
        return np.asarray(q, dtype=float) @ self.rotation + self.centroid

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "position": [float(v) for v in self.position],
            "centroid": [float(v) for v in self.centroid],
            "delta": float(self.delta),
            "half_extent_u": float(self.half_extent_u),
            "half_extent_v": float(self.half_extent_v),
            "pixels_per_unit": float(self.pixels_per_unit),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ZenithCamera":
        return cls(np.array(d["rotation"], dtype=float).reshape(3, 3), np.array(d["position"], dtype=float),
                   np.array(d["centroid"], dtype=float), float(d["half_extent_u"]),
                   float(d["half_extent_v"]), float(d["delta"]), float(d["pixels_per_unit"]))


def zenith_camera(frame: PrincipalFrame, z_hat: np.ndarray, points: np.ndarray,
                  margin: float = DEFAULT_MARGIN, resolution: int = DEFAULT_RESOLUTION) -> ZenithCamera:
    z = np.asarray(z_hat, dtype=float)
    z = z / np.linalg.norm(z)
    x = frame.v1 - (frame.v1 @ z) * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pts = pts[trim_outliers(pts)]
    if len(pts) < 3:
        raise DegenerateGeometryError("zenith camera needs at least 3 points")
    q = (pts - frame.centroid) @ R[:2].T
    r98 = float(np.percentile(np.linalg.norm(q, axis=1), 98))
    if not r98 > 0:
        raise DegenerateGeometryError("98th-percentile in-plane radius is zero")
    delta = margin * r98
    return ZenithCamera(R, frame.centroid + delta * z, frame.centroid.copy(), r98, r98, delta,
                        resolution / (2.0 * r98))


def vertical_disagreement_deg(z_hat: np.ndarray, plane_normal: np.ndarray) -> float:
    c = abs(float(np.dot(z_hat, plane_normal)) / (np.linalg.norm(z_hat) * np.linalg.norm(plane_normal)))
    return float(np.degrees(np.arccos(min(1.0, c))))
