"""Placement -> geographic correspondences -> similarity transform -> camera GPS."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .dtm import Placement, gray_of
from .errors import DegenerateGeometryError, InsufficientDataError, NoConsensusError
from .geodesy import GeoPoint, GeoTransform, enu_to_geo_array, geo_to_enu_array
from .ingest.colmap import RegisteredImage
from .raster import Template
from .zenith import ZenithCamera

logger = logging.getLogger(__name__)

DEFAULT_GRID = 7
PATCH_PX = 21
SEARCH_PX = 8
MIN_ZNCC = 0.5
RECT_MARGIN = 0.25


class CorrespondenceSource(str, enum.Enum):
    PLACEMENT_GRID = "PLACEMENT_GRID"
    ZNCC_REFINED = "ZNCC_REFINED"


@dataclass(frozen=True)
class Correspondence:
    model_xyz: np.ndarray
    geo: GeoPoint
    source: CorrespondenceSource
    sat_xy: Tuple[float, float] = (math.nan, math.nan)   # continuous satellite coordinates
    template_px: Tuple[int, int] = (-1, -1)
    splat_index: int = -1

    def to_dict(self) -> dict:
        return {"model_xyz": [float(v) for v in self.model_xyz], "geo": self.geo.to_dict(),
                "source": self.source.value, "sat_xy": [float(v) for v in self.sat_xy],
                "template_px": list(self.template_px), "splat_index": int(self.splat_index)}


@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    inlier_count: int = 0
    rms_residual: float = 0.0

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(X, dtype=float) @ self.rotation.T + self.translation

    def inverse_apply(self, Y: np.ndarray) -> np.ndarray:
        return (np.asarray(Y, dtype=float) - self.translation) @ self.rotation / self.scale

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "rotation": [float(v) for v in self.rotation.ravel()],
                "translation": [float(v) for v in self.translation], "inlier_count": int(self.inlier_count),
                "rms_residual": float(self.rms_residual)}

    @classmethod
    def from_dict(cls, d: dict) -> "Similarity":
        k = int(round(math.sqrt(len(d["rotation"]))))
        return cls(float(d["scale"]), np.array(d["rotation"], dtype=float).reshape(k, k),
                   np.array(d["translation"], dtype=float), int(d.get("inlier_count", 0)),
                   float(d.get("rms_residual", 0.0)))


# --------------------------------------------------------------------------- similarity fitting

def umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity dst ~ s R src + t without reflection (any dimension >= 2)."""
    X = np.asarray(src, dtype=float)
    Y = np.asarray(dst, dtype=float)
    if X.shape != Y.shape or X.ndim != 2:
        raise ValueError("src and dst must be matching (N, d) arrays")
    n, d = X.shape
    if n < d:
        raise InsufficientDataError(f"similarity fit needs at least {d} pairs, got {n}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if len(sx) < 2 or sx[1] <= 1e-10 * max(sx[0], 1e-300):
        raise DegenerateGeometryError("source points are collinear or coincident")
    var_x = float((Xc * Xc).sum()) / n
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(d)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[-1] = -1.0
    R = U @ np.diag(S) @ Vt
    scale = float((D * S).sum() / var_x)
    t = my - scale * R @ mx
    res = np.linalg.norm(scale * X @ R.T + t - Y, axis=1)
    return Similarity(scale, R, t, n, float(np.sqrt(np.mean(res ** 2))))


def ransac_similarity(src: np.ndarray, dst: np.ndarray, threshold: float, iterations: int = 1000,
                      seed: int = 0, min_inliers: int = 3) -> Tuple[Similarity, np.ndarray]:
    """Minimal-sample RANSAC over Umeyama fits; returns the refit on the best inlier set and its mask."""
    X = np.asarray(src, dtype=float)
    Y = np.asarray(dst, dtype=float)
    n, d = X.shape
    k = max(3, d)
    if n < k:
        raise InsufficientDataError(f"RANSAC similarity needs at least {k} correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_cnt, best_mask, best_rms = -1, None, math.inf
    for _ in range(iterations):
        idx = rng.choice(n, k, replace=False)
        try:
            sim = umeyama_similarity(X[idx], Y[idx])
        except DegenerateGeometryError:
            continue
        if not (sim.scale > 0 and np.isfinite(sim.scale)):
            continue
        res = np.linalg.norm(sim.apply(X) - Y, axis=1)
        mask = res <= threshold
        cnt = int(mask.sum())
        rms = float(np.sqrt(np.mean(res[mask] ** 2))) if cnt else math.inf
        if cnt > best_cnt or (cnt == best_cnt and rms < best_rms):
            best_cnt, best_mask, best_rms = cnt, mask, rms
    if best_mask is None or best_cnt < min_inliers:
        raise NoConsensusError(f"no similarity hypothesis reached {min_inliers} inliers")
    # refit and re-collect inliers until the set stops growing
    mask = best_mask
    for _ in range(5):
        sim = umeyama_similarity(X[mask], Y[mask])
        new = np.linalg.norm(sim.apply(X) - Y, axis=1) <= threshold
        if new.sum() < min_inliers or np.array_equal(new, mask):
            break
        mask = new
    sim = umeyama_similarity(X[mask], Y[mask])
    res = np.linalg.norm(sim.apply(X[mask]) - Y[mask], axis=1)
    return (Similarity(sim.scale, sim.rotation, sim.translation, int(mask.sum()),
                       float(np.sqrt(np.mean(res ** 2)))), mask)


# --------------------------------------------------------------------------- correspondences

def _grid_pixels(coverage: np.ndarray, n: int) -> List[Tuple[int, int]]:
    """Covered template pixel nearest each of the n x n cell centers (cells lacking coverage skipped)."""
    H, W = coverage.shape
    out = []
    for j in range(n):
        r0, r1 = int(round(j * H / n)), int(round((j + 1) * H / n))
        for i in range(n):
            c0, c1 = int(round(i * W / n)), int(round((i + 1) * W / n))
            cell = coverage[r0:r1, c0:c1]
            if not cell.any():
                continue
            cy, cx = (r0 + r1) / 2.0, (c0 + c1) / 2.0
            rr, cc = np.nonzero(cell)
            d = (rr + r0 + 0.5 - cy) ** 2 + (cc + c0 + 0.5 - cx) ** 2
            k = int(np.argmin(d))
            out.append((int(cc[k] + c0), int(rr[k] + r0)))
    return out


def lift_template_pixel(template: Template, cam: ZenithCamera, col: int, row: int) -> np.ndarray:
    """Model-frame 3D point under a template pixel, using the rendered depth."""
    a, b = template.pixel_center_to_model(col, row)
    depth = float(template.depth[row, col])
    h = cam.delta - depth
    return cam.centroid + float(a) * cam.x_hat + float(b) * cam.y_hat + h * cam.z_hat


def _masked_zncc_surface(tpl: np.ndarray, mask: np.ndarray, region: np.ndarray) -> np.ndarray:
    """ZNCC of a masked template over every placement in ``region`` (valid mode)."""
    m = mask.astype(np.float64)
    cnt = m.sum()
    t = (tpl - (tpl * m).sum() / cnt) * m
    tn = math.sqrt(float((t * t).sum()))
    win = sliding_window_view(region, tpl.shape)
    s_sum = np.einsum("ijkl,kl->ij", win, m)
    s_sq = np.einsum("ijkl,kl->ij", win * win, m)
    cross = np.einsum("ijkl,kl->ij", win, t)
    var = np.maximum(s_sq - s_sum ** 2 / cnt, 0.0)
    den = tn * np.sqrt(var)
    return np.where(den > 1e-12, cross / np.maximum(den, 1e-300), 0.0)


@dataclass
class _Mapping:
    """Template continuous coords <-> satellite continuous coords (placement then 2D similarity)."""

    placement: Placement
    sim2: Optional[Similarity] = None

    def forward(self, u, v):
        X, Y = self.placement.template_to_satellite(u, v)
        if self.sim2 is None:
            return X, Y
        P = self.sim2.apply(np.stack([np.atleast_1d(X), np.atleast_1d(Y)], axis=-1))
        return P[:, 0].reshape(np.shape(X)), P[:, 1].reshape(np.shape(Y))

    def inverse(self, X, Y):
        if self.sim2 is not None:
            P = self.sim2.inverse_apply(np.stack([np.ravel(X), np.ravel(Y)], axis=-1))
            X, Y = P[:, 0].reshape(np.shape(X)), P[:, 1].reshape(np.shape(Y))
        return self.placement.satellite_to_template(X, Y)


def _refine_points(mapping: _Mapping, tpl_g: np.ndarray, tpl_a: np.ndarray, sat_g: np.ndarray,
                   pred: np.ndarray, hull: Tuple[float, float, float, float], patch: int, search: int):
    """ZNCC-refine predicted satellite positions; returns (refined positions, success mask)."""
    half = patch // 2
    R = half + search
    offs = np.arange(-R, R + 1, dtype=float)
    out = pred.copy()
    ok = np.zeros(len(pred), dtype=bool)
    x0, y0, x1, y1 = hull
    for i, (X, Y) in enumerate(pred):
        gx, gy = np.meshgrid(X + offs, Y + offs, indexing="xy")
        region = ndimage.map_coordinates(sat_g, [gy - 0.5, gx - 0.5], order=1, mode="nearest")
        px, py = np.meshgrid(X + offs[search:search + patch], Y + offs[search:search + patch], indexing="xy")
        u, v = mapping.inverse(px, py)
        tg = ndimage.map_coordinates(tpl_g, [v - 0.5, u - 0.5], order=1, mode="constant", cval=0.0)
        ta = ndimage.map_coordinates(tpl_a, [v - 0.5, u - 0.5], order=1, mode="constant", cval=0.0)
        mask = ta >= 0.5
        if mask.sum() < 0.25 * patch * patch:
            continue
        gray = np.where(mask, tg / np.where(ta > 0, ta, 1.0), 0.0)
        surf = _masked_zncc_surface(gray, mask, region)
        k = int(np.argmax(surf))
        jy, jx = np.unravel_index(k, surf.shape)
        peak = surf[jy, jx]
        if peak < MIN_ZNCC or jy in (0, surf.shape[0] - 1) or jx in (0, surf.shape[1] - 1):
            continue

        def parabola(l, c, r):
            den = l - 2 * c + r
            return 0.0 if den >= 0 else float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))

        dx = jx - search + parabola(surf[jy, jx - 1], peak, surf[jy, jx + 1])
        dy = jy - search + parabola(surf[jy - 1, jx], peak, surf[jy + 1, jx])
        nx, ny = X + dx, Y + dy
        if not (x0 <= nx <= x1 and y0 <= ny <= y1):
            continue
        out[i] = (nx, ny)
        ok[i] = True
    return out, ok


def placement_correspondences(placement: Placement, template: Template, cam: ZenithCamera, sat: np.ndarray,
                              geo: GeoTransform, anchor: GeoPoint, refine: bool = True,
                              grid: int = DEFAULT_GRID, patch: int = PATCH_PX, search: int = SEARCH_PX,
                              iterations: int = 2, seed: int = 0) -> List[Correspondence]:
    """Grid correspondences between the template (lifted to 3D) and satellite geo positions.

    With ``refine`` each grid point's satellite position is corrected by a
    local ZNCC search. Refinement runs ``iterations`` times; between passes a
    2D similarity fitted to the refined points updates the template-to-satellite
    mapping so residual rotation left by the discrete rotation sweep is removed.
    """
    if grid < 3:
        raise ValueError("grid must be at least 3")
    pix = _grid_pixels(template.coverage & np.isfinite(template.depth), grid)
    if len(pix) < 4:
        raise InsufficientDataError(f"only {len(pix)} covered grid points in the template")
    uv = np.array([(c + 0.5, r + 0.5) for c, r in pix])
    mapping = _Mapping(placement)
    X, Y = mapping.forward(uv[:, 0], uv[:, 1])
    pred = np.stack([X, Y], axis=1)
    refined_ok = np.zeros(len(pix), dtype=bool)
    final = pred.copy()
    if refine:
        f = max(1.0, template.width / max(placement.footprint_px[0], 1))
        alpha = template.rgba[..., 3].astype(np.float64)
        tpl_g = ndimage.gaussian_filter(gray_of(template.rgba) * alpha, 0.5 * f)
        tpl_a = ndimage.gaussian_filter(alpha, 0.5 * f)
        sat_g = gray_of(np.asarray(sat, dtype=np.float64))
        hx0, hy0, hx1, hy1 = placement.rect.hull()
        mx, my = RECT_MARGIN * (hx1 - hx0) / 2.0, RECT_MARGIN * (hy1 - hy0) / 2.0
        hull = (hx0 - mx, hy0 - my, hx1 + mx, hy1 + my)
        for it in range(max(1, iterations)):
            X, Y = mapping.forward(uv[:, 0], uv[:, 1])
            pred = np.stack([X, Y], axis=1)
            final, refined_ok = _refine_points(mapping, tpl_g, tpl_a, sat_g, pred, hull, patch, search)
            if it + 1 >= iterations or refined_ok.sum() < 3:
                break
            base = np.stack(placement.template_to_satellite(uv[refined_ok, 0], uv[refined_ok, 1]), axis=1)
            try:
                sim2, _ = ransac_similarity(base, final[refined_ok], threshold=1.5, iterations=200,
                                            seed=seed + it)
            except (NoConsensusError, DegenerateGeometryError, InsufficientDataError):
                break
            mapping = _Mapping(placement, sim2)
        logger.info("ZNCC refinement succeeded for %d of %d grid points", int(refined_ok.sum()), len(pix))
    lat, lon = geo.pixel_to_geo_array(final[:, 0] - 0.5, final[:, 1] - 0.5)
    out = []
    for k, (c, r) in enumerate(pix):
        src = CorrespondenceSource.ZNCC_REFINED if refined_ok[k] else CorrespondenceSource.PLACEMENT_GRID
        out.append(Correspondence(lift_template_pixel(template, cam, c, r),
                                  GeoPoint(float(lat[k]), float(lon[k]), 0.0), src,
                                  (float(final[k, 0]), float(final[k, 1])), (c, r), int(template.index[r, c])))
    return out


# --------------------------------------------------------------------------- inheritance and output

def splat_to_sfm_geo_inheritance(sfm_xyz: np.ndarray, splat_xyz: np.ndarray, tagged: Dict[int, np.ndarray],
                                 radius: float) -> Dict[int, np.ndarray]:
    """Each SfM point takes the tag of its nearest tagged splat within ``radius``.

    ``tagged`` maps splat index -> tag (e.g. an ENU vector); equidistant
    splats resolve to the lower index. Returns SfM index -> tag.
    """
    if not tagged:
        return {}
    keys = np.array(sorted(tagged), dtype=np.int64)
    pos = np.asarray(splat_xyz, dtype=float)[keys]
    tree = cKDTree(pos)
    pts = np.asarray(sfm_xyz, dtype=float)
    kq = min(4, len(keys))
    d, j = tree.query(pts, k=kq, distance_upper_bound=radius)
    if kq == 1:
        d, j = d[:, None], j[:, None]
    out = {}
    for i in range(len(pts)):
        if not np.isfinite(d[i, 0]):
            continue
        tie = np.isfinite(d[i]) & (d[i] == d[i, 0])
        best = int(keys[j[i, tie]].min())
        out[i] = tagged[best]
    return out


def dominant_cluster(images: Sequence[RegisteredImage], min_shared: int = 10) -> np.ndarray:
    """Mask of images in the largest co-visibility component (edges need ``min_shared`` common points)."""
    n = len(images)
    if n == 0:
        return np.zeros(0, dtype=bool)
    obs_img, obs_pt = [], []
    for i, im in enumerate(images):
        p = np.unique(im.point3d_ids[im.point3d_ids >= 0])
        obs_img.append(np.full(len(p), i))
        obs_pt.append(p)
    rows = np.concatenate(obs_img)
    pts = np.concatenate(obs_pt)
    _, col = np.unique(pts, return_inverse=True)
    inc = sparse.csr_matrix((np.ones(len(rows)), (rows, col)), shape=(n, int(col.max(initial=-1)) + 1))
    shared = (inc @ inc.T).toarray()
    adj = sparse.csr_matrix(shared >= min_shared)
    _, comp = connected_components(adj, directed=False)
    sizes = np.bincount(comp)
    best = int(np.argmax(sizes))         # lowest component label among the largest
    return comp == best


def camera_gps(similarity: Similarity, images: Sequence[RegisteredImage], anchor: GeoPoint,
               registered: Optional[Sequence[bool]] = None, all_names: Optional[Sequence[str]] = None):
    """(name, GeoPoint or None) per image; unregistered images get None."""
    results = []
    names_seen = set()
    reg = [True] * len(images) if registered is None else list(registered)
    for im, ok in zip(images, reg):
        names_seen.add(im.name)
        if not ok:
            results.append((im.name, None))
            continue
        enu = similarity.apply(im.center[None])[0]
        lat, lon, alt = enu_to_geo_array(enu, anchor)
        results.append((im.name, GeoPoint(float(lat), float(lon), float(alt))))
    for name in all_names or []:
        if name not in names_seen:
            results.append((name, None))
    return results


def correspondences_to_enu(corrs: Sequence[Correspondence], anchor: GeoPoint) -> np.ndarray:
    lat = np.array([c.geo.lat for c in corrs])
    lon = np.array([c.geo.lon for c in corrs])
    alt = np.array([c.geo.alt or 0.0 for c in corrs])
    return geo_to_enu_array(lat, lon, alt, anchor).reshape(-1, 3)


@dataclass
class GeoAlignment:
    similarity: Similarity
    used_inheritance: bool
    n_correspondences: int
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def align_to_world(corrs: Sequence[Correspondence], anchor: GeoPoint, threshold: float,
                   iterations: int = 1000, seed: int = 0, sfm_xyz: Optional[np.ndarray] = None,
                   splat_xyz: Optional[np.ndarray] = None, inherit_radius: Optional[float] = None) -> GeoAlignment:
    """Fit the model->ENU similarity.

    When SfM/splat positions are supplied, geo tags on splats are inherited by
    nearby SfM points which then drive the fit; fewer than 3 inherited tags
    falls back to the lifted correspondences directly.
    """
    enu = correspondences_to_enu(corrs, anchor)
    src, dst, inherited = None, None, False
    if sfm_xyz is not None and splat_xyz is not None and inherit_radius is not None:
        tagged = {}
        for c, e in zip(corrs, enu):
            if c.splat_index >= 0:
                tagged.setdefault(int(c.splat_index), e)
        tags = splat_to_sfm_geo_inheritance(sfm_xyz, splat_xyz, tagged, inherit_radius)
        if len(tags) >= 3:
            idx = np.array(sorted(tags), dtype=np.int64)
            src = np.asarray(sfm_xyz, dtype=float)[idx]
            dst = np.array([tags[i] for i in idx])
            inherited = True
        else:
            logger.info("only %d SfM points inherited geo tags; using correspondences directly", len(tags))
    if src is None:
        src = np.array([c.model_xyz for c in corrs])
        dst = enu
    sim, mask = ransac_similarity(src, dst, threshold, iterations, seed)
    return GeoAlignment(sim, inherited, len(src), mask)
