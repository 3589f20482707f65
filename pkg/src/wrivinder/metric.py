"""Metric scale from monocular depth, and the metric/pixel footprint of the zenith crop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientDataError, NoConsensusError
from .ingest.colmap import RegisteredImage, SparseCloud
from .ingest.rasters import DepthMap
from .zenith import ZenithCamera, trim_outliers

logger = logging.getLogger(__name__)

DEFAULT_REL_THRESHOLD = 0.15
DEFAULT_MAX_ITERATIONS = 200


@dataclass(frozen=True)
class DepthPair:
    z_sfm: float
    d_pred: float
    image_id: int
    point3d_id: int


@dataclass(frozen=True)
class ScaleEstimate:
    s: float
    inlier_count: int
    residual_p50: float
    image_id: Optional[int] = None

    def to_dict(self) -> dict:
        return {"s": self.s, "inlier_count": self.inlier_count, "residual_p50": self.residual_p50,
                "image_id": self.image_id}


@dataclass(frozen=True)
class Footprint:
    W_m: float
    H_m: float
    W_px: int
    H_px: int
    bbox: tuple  # (xmin, ymin, xmax, ymax) in zenith-frame model units

    @property
    def center(self) -> np.ndarray:
        x0, y0, x1, y1 = self.bbox
        return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])

    def to_dict(self) -> dict:
        return {"W_m": self.W_m, "H_m": self.H_m, "W_px": self.W_px, "H_px": self.H_px,
                "bbox": [float(v) for v in self.bbox]}

    @classmethod
    def from_dict(cls, d: dict) -> "Footprint":
        return cls(float(d["W_m"]), float(d["H_m"]), int(d["W_px"]), int(d["H_px"]), tuple(d["bbox"]))


def _as_arrays(pairs):
    z = np.array([p.z_sfm for p in pairs], dtype=float)
    d = np.array([p.d_pred for p in pairs], dtype=float)
    return z, d


def collect_depth_pairs(image: RegisteredImage, cloud: SparseCloud, depth: DepthMap) -> List[DepthPair]:
    """One pair per observation of a known point with positive SfM depth and a valid predicted depth."""
    if len(image.point3d_ids) == 0:
        return []
    obs = np.flatnonzero(image.point3d_ids >= 0)
    known = np.array([cloud.has_point(p) for p in image.point3d_ids[obs]], dtype=bool)
    obs = obs[known]
    if obs.size == 0:
        return []
    pids = image.point3d_ids[obs]
    idx = np.array([cloud.index_of(p) for p in pids], dtype=np.int64)
    z = image.world_to_camera(cloud.xyz[idx])[:, 2]
    xy = image.xys[obs]
    col = np.floor(xy[:, 0]).astype(np.int64)
    row = np.floor(xy[:, 1]).astype(np.int64)
    inb = (col >= 0) & (row >= 0) & (col < depth.width) & (row < depth.height)
    d = np.full(len(obs), np.nan)
    ok = np.zeros(len(obs), dtype=bool)
    d[inb] = depth.depth[row[inb], col[inb]]
    ok[inb] = depth.valid[row[inb], col[inb]]
    keep = ok & (z > 0) & np.isfinite(z) & (d > 0)
    return [DepthPair(float(z[k]), float(d[k]), image.image_id, int(pids[k])) for k in np.flatnonzero(keep)]


def scale_lsq(pairs: Sequence[DepthPair]) -> float:
    """Closed-form least-squares scale s = sum(z d) / sum(z^2)."""
    if len(pairs) == 0:
        raise InsufficientDataError("scale_lsq needs at least one depth pair")
    z, d = _as_arrays(pairs)
    zz = float(np.dot(z, z))
    if zz == 0.0:
        raise DegenerateGeometryError("all SfM depths are zero")
    return float(np.dot(z, d)) / zz


def _residual_p50(s: float, z: np.ndarray, d: np.ndarray) -> float:
    return float(np.median(np.abs(d - s * z)))


def scale_ransac(pairs: Sequence[DepthPair], rel_threshold: float = DEFAULT_REL_THRESHOLD,
                 iterations: Optional[int] = None, seed: int = 0) -> ScaleEstimate:
    """Single-pair scale hypotheses; best support refined by least squares on its inliers.

    Hypotheses are drawn without replacement, so with ``iterations >= len(pairs)``
    every pair is tried exactly once.
    """
    n = len(pairs)
    if n < 2:
        raise InsufficientDataError(f"scale_ransac needs at least 2 pairs, got {n}")
    z, d = _as_arrays(pairs)
    iters = min(DEFAULT_MAX_ITERATIONS, n) if iterations is None else int(iterations)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    if iters > n:
        order = np.concatenate([order, rng.integers(0, n, iters - n)])
    tol = rel_threshold * d
    best = None  # (count, -resid, s, mask)
    for k in order[:iters]:
        s_h = d[k] / z[k]
        mask = np.abs(d - s_h * z) <= tol
        cnt = int(mask.sum())
        if cnt < 2:
            continue
        zi, di = z[mask], d[mask]
        s_ref = float(np.dot(zi, di) / np.dot(zi, zi))
        resid = float(np.sqrt(np.mean((di - s_ref * zi) ** 2)))
        if best is None or cnt > best[0] or (cnt == best[0] and resid < best[1]):
            best = (cnt, resid, s_ref)
    if best is None:
        raise NoConsensusError("no scale hypothesis has at least 2 inliers")
    cnt, _, s = best
    return ScaleEstimate(s, cnt, _residual_p50(s, z, d))


def global_scale(estimates: Sequence[ScaleEstimate], all_pairs: Sequence[DepthPair]) -> ScaleEstimate:
    """Pick the per-image scale with the lowest scene-wide median absolute residual."""
    if not estimates:
        raise InsufficientDataError("no per-image scale estimates")
    if not all_pairs:
        raise InsufficientDataError("no depth pairs to score scale candidates")
    z, d = _as_arrays(all_pairs)

    def key(e: ScaleEstimate):
        return (_residual_p50(e.s, z, d), -e.inlier_count,
                e.image_id if e.image_id is not None else math.inf)

    scored = sorted(estimates, key=key)
    win = scored[0]
    return ScaleEstimate(win.s, win.inlier_count, _residual_p50(win.s, z, d), win.image_id)


def estimate_scene_scale(images: Sequence[RegisteredImage], cloud: SparseCloud,
                         depth_maps: Mapping[int, DepthMap], rel_threshold: float = DEFAULT_REL_THRESHOLD,
                         iterations: Optional[int] = None, seed: int = 0):
    """Collect pairs for every image, fit per-image RANSAC scales, and pick the global one.

    Returns (global estimate, per-image estimates, all pairs). Images without
    enough pairs or consensus are skipped with a log message.
    """
    all_pairs: List[DepthPair] = []
    per_image: List[ScaleEstimate] = []
    for im in sorted(images, key=lambda i: i.image_id):
        dm = depth_maps.get(im.image_id)
        if dm is None:
            continue
        pairs = collect_depth_pairs(im, cloud, dm)
        all_pairs.extend(pairs)
        if len(pairs) < 2:
            continue
        try:
            est = scale_ransac(pairs, rel_threshold, iterations, seed + im.image_id)
        except NoConsensusError:
            logger.info("image %d: no scale consensus", im.image_id)
            continue
        per_image.append(ScaleEstimate(est.s, est.inlier_count, est.residual_p50, im.image_id))
    return global_scale(per_image, all_pairs), per_image, all_pairs


def footprint_from_extent(xmin: float, xmax: float, ymin: float, ymax: float, scale: float,
                          gsd: float) -> Footprint:
    """Footprint from a zenith-frame bbox in model units; pixel sizes round half up."""
    if scale <= 0 or gsd <= 0:
        raise ValueError("scale and gsd must be positive")
    W_m = scale * (xmax - xmin)
    H_m = scale * (ymax - ymin)
    if not (W_m > 0 and H_m > 0):
        raise DegenerateGeometryError("metric footprint has zero extent")
    W_px = int(math.floor(W_m / gsd + 0.5))
    H_px = int(math.floor(H_m / gsd + 0.5))
    if W_px < 1 or H_px < 1:
        raise DegenerateGeometryError("metric footprint is smaller than one satellite pixel")
    return Footprint(W_m, H_m, W_px, H_px, (xmin, ymin, xmax, ymax))


def metric_footprint(points: np.ndarray, cam: ZenithCamera, scale: float, gsd: float,
                     trim: bool = True) -> Footprint:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if trim and len(pts) >= 3:
        pts = pts[trim_outliers(pts)]
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < 2:
        raise DegenerateGeometryError("footprint needs at least two points")
    q = cam.to_zenith_frame(pts)[:, :2]
    return footprint_from_extent(float(q[:, 0].min()), float(q[:, 0].max()), float(q[:, 1].min()),
                                 float(q[:, 1].max()), scale, gsd)
