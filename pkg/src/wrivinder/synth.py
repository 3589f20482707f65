"""Deterministic synthetic scenes with exact ground truth for end-to-end tests.

The world is a flat textured ground patch (grass, dirt, pavement, two roads
with sidewalks) carrying a few box buildings, observed by a ring of ground
cameras. Everything is built in a local ENU frame in meters and then moved
into a random model frame ``X_m = Q X_enu / s_true + tau`` so downstream
stages must recover scale, rotation and translation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .geodesy import CRS, EARTH_RADIUS_M, GeoPoint, GeoTransform, enu_to_geo
from .ingest.colmap import CameraIntrinsics, RegisteredImage, SparseCloud, rotmat_to_qvec, write_colmap_model
from .ingest.ply import SplatCloud, SH_C0, write_ply_splats
from .ingest.rasters import DepthMap, LabelMap, write_label_png, write_pfm, write_png
from .ingest.worldfile import format_world_file
from .semantics import load_class_table

logger = logging.getLogger(__name__)

TEXTURE_RES_M = 0.25


@dataclass(frozen=True)
class SynthParams:
    extent_m: float = 100.0
    aspect: float = 0.6
    n_cameras: int = 20
    n_points: int = 5000
    n_splat_candidates: int = 40000
    building_count: int = 4
    depth_noise: float = 0.05
    outlier_frac: float = 0.2
    anchor_lat: float = 38.8895
    anchor_lon: float = -77.0353
    gsd: float = 0.5
    margin_m: float = 40.0
    image_width: int = 640
    image_height: int = 480
    focal_px: float = 400.0
    camera_height_m: float = 1.7
    ground_jitter_m: float = 0.02

    @property
    def anchor(self) -> GeoPoint:
        return GeoPoint(self.anchor_lat, self.anchor_lon)

    def validate(self):
        if self.extent_m < 20:
            raise ValueError("extent_m must be at least 20")
        if self.n_points < 1000:
            raise ValueError("n_points must be at least 1000")
        if self.n_cameras < 3:
            raise ValueError("need at least 3 cameras")


@dataclass
class Building:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float
    facade_rgb: Tuple[float, float, float]
    roof_rgb: Tuple[float, float, float]

    @property
    def lo(self):
        return np.array([self.x0, self.y0, 0.0])

    @property
    def hi(self):
        return np.array([self.x1, self.y1, self.height])


@dataclass
class SynthScene:
    params: SynthParams
    seed: int
    s_true: float
    Q: np.ndarray            # ENU -> model rotation
    tau: np.ndarray          # model translation
    camera: CameraIntrinsics
    images: List[RegisteredImage]
    cloud: SparseCloud
    splats: SplatCloud
    satellite: np.ndarray    # (H, W, 3) uint8
    geotransform: GeoTransform
    depth_maps: Dict[int, DepthMap]
    label_maps: Dict[int, LabelMap]
    camera_enu: np.ndarray
    gt_cameras: List[GeoPoint]
    buildings: List[Building] = field(default_factory=list)

    @property
    def similarity(self):
        """(sigma, R, t) with enu = sigma * R @ model + t."""
        R = self.Q.T
        return self.s_true, R, -self.s_true * R @ self.tau

    def model_to_enu(self, X: np.ndarray) -> np.ndarray:
        sigma, R, t = self.similarity
        return sigma * np.asarray(X, dtype=float) @ R.T + t

    def enu_to_model(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.Q.T / self.s_true + self.tau

    def image_stem(self, im: RegisteredImage) -> str:
        return Path(im.name).stem


# --------------------------------------------------------------------------- texture

def _value_noise(rng, shape, cell_px):
    gh = max(2, int(math.ceil(shape[0] / cell_px)) + 2)
    gw = max(2, int(math.ceil(shape[1] / cell_px)) + 2)
    grid = rng.random((gh, gw))
    out = ndimage.zoom(grid, (shape[0] / (gh - 2) * 1.0, shape[1] / (gw - 2) * 1.0), order=3, mode="nearest")
    return out[:shape[0], :shape[1]]


def _ground_texture(rng, W, H, res, x_min, y_max, classes):
    """Fine ground raster (rgb float, label uint8) with row 0 at the north edge."""
    xs = x_min + (np.arange(W) + 0.5) * res
    ys = y_max - (np.arange(H) + 0.5) * res
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    noise = sum(_value_noise(rng, (H, W), c / res) * w for c, w in ((24.0, 0.5), (8.0, 0.3), (2.0, 0.2)))
    rgb = np.empty((H, W, 3))
    rgb[..., 0] = 0.22 + 0.18 * noise
    rgb[..., 1] = 0.42 + 0.22 * noise
    rgb[..., 2] = 0.16 + 0.10 * noise
    lab = np.full((H, W), classes["grass"], dtype=np.uint8)
    extent_x = xs[-1] - xs[0]
    extent_y = ys[0] - ys[-1]
    for _ in range(14):
        cx, cy = rng.uniform(xs[0], xs[-1]), rng.uniform(ys[-1], ys[0])
        ax, ay = rng.uniform(3, 10), rng.uniform(3, 10)
        th = rng.uniform(0, math.pi)
        u = ((X - cx) * math.cos(th) + (Y - cy) * math.sin(th)) / ax
        v = (-(X - cx) * math.sin(th) + (Y - cy) * math.cos(th)) / ay
        m = u * u + v * v <= 1.0 + 0.3 * (noise - 0.5)
        rgb[m] = np.stack([0.48 + 0.15 * noise[m], 0.36 + 0.1 * noise[m], 0.22 + 0.06 * noise[m]], -1)
        lab[m] = classes["dirt"]
    for _ in range(6):
        w, h = rng.uniform(8, 20), rng.uniform(6, 16)
        px, py = rng.uniform(xs[0], xs[-1] - w), rng.uniform(ys[-1], ys[0] - h)
        m = (X >= px) & (X <= px + w) & (Y >= py) & (Y <= py + h)
        shade = rng.uniform(0.55, 0.7)
        rgb[m] = (shade + 0.08 * noise[m])[:, None] * np.array([1.0, 0.98, 0.95])
        lab[m] = classes["pavement"]
    # two roads with sidewalks and dashed center lines
    roads = [(rng.uniform(-0.25, 0.25) * extent_y, rng.uniform(-0.15, 0.15)),
             (rng.uniform(-0.3, 0.3) * extent_x, rng.uniform(0.9, 1.3))]
    for k, (off, ang) in enumerate(roads):
        if k == 0:   # roughly east-west through y = off
            n = np.array([-math.sin(ang), math.cos(ang)])
            d = (X * n[0] + (Y - off) * n[1])
            along = X * math.cos(ang) + (Y - off) * math.sin(ang)
        else:        # steeper road through x = off
            n = np.array([math.sin(ang), -math.cos(ang)])
            d = ((X - off) * n[0] + Y * n[1])
            along = (X - off) * math.cos(ang) + Y * math.sin(ang)
        sw = (np.abs(d) > 3.5) & (np.abs(d) <= 5.5)
        rgb[sw] = (0.74 + 0.05 * noise[sw])[:, None] * np.array([1.0, 1.0, 0.97])
        lab[sw] = classes["sidewalk"]
        rd = np.abs(d) <= 3.5
        rgb[rd] = (0.24 + 0.06 * noise[rd])[:, None] * np.array([1.0, 1.0, 1.05])
        lab[rd] = classes["road"]
        dash = rd & (np.abs(d) <= 0.2) & ((along % 6.0) < 3.0)
        rgb[dash] = np.array([0.92, 0.9, 0.78])
    return np.clip(rgb, 0, 1), lab


def _sample_raster(raster, x, y, res, x_min, y_max):
    H, W = raster.shape[:2]
    col = np.clip(np.floor((x - x_min) / res).astype(np.int64), 0, W - 1)
    row = np.clip(np.floor((y_max - y) / res).astype(np.int64), 0, H - 1)
    return raster[row, col]


# --------------------------------------------------------------------------- geometry helpers

def _look_at(center, target):
    """World-to-camera rotation for a camera at ``center`` looking at ``target`` (image y down)."""
    f = target - center
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f])


def _ray_boxes(origin, dirs, buildings, t_max=None):
    """Nearest entry parameter t per ray over all boxes (inf where no hit), and hit box index."""
    n = dirs.shape[0]
    best = np.full(n, np.inf) if t_max is None else np.asarray(t_max, dtype=float).copy()
    which = np.full(n, -1, dtype=np.int64)
    orig = np.broadcast_to(origin, dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b, bd in enumerate(buildings):
        t1 = (bd.lo - orig) * inv
        t2 = (bd.hi - orig) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= np.maximum(tmin, 0.0)) & (tmin > 1e-9) & (tmin < best)
        best[hit] = tmin[hit]
        which[hit] = b
    return best, which


def _place_buildings(rng, p: SynthParams, lab_fine, classes, cams_xy, x_min, y_max):
    hx, hy = p.extent_m / 2.0, p.aspect * p.extent_m / 2.0
    out: List[Building] = []
    road_ids = {classes["road"], classes["sidewalk"]}
    for _ in range(400):
        if len(out) >= p.building_count:
            break
        w, h = rng.uniform(8, 15), rng.uniform(8, 15)
        x0 = rng.uniform(-hx + 2, hx - 2 - w)
        y0 = rng.uniform(-hy + 2, hy - 2 - h)
        x1, y1 = x0 + w, y0 + h
        gx = np.arange(x0 - 1, x1 + 1, TEXTURE_RES_M)
        gy = np.arange(y0 - 1, y1 + 1, TEXTURE_RES_M)
        GX, GY = np.meshgrid(gx, gy)
        labs = _sample_raster(lab_fine, GX.ravel(), GY.ravel(), TEXTURE_RES_M, x_min, y_max)
        if np.isin(labs, list(road_ids)).any():
            continue
        dx = np.maximum(np.maximum(x0 - cams_xy[:, 0], cams_xy[:, 0] - x1), 0)
        dy = np.maximum(np.maximum(y0 - cams_xy[:, 1], cams_xy[:, 1] - y1), 0)
        if np.min(np.hypot(dx, dy)) < 4.0:
            continue
        if any(not (x1 + 3 < b.x0 or b.x1 + 3 < x0 or y1 + 3 < b.y0 or b.y1 + 3 < y0) for b in out):
            continue
        facade = tuple(float(v) for v in rng.uniform([0.45, 0.3, 0.25], [0.8, 0.6, 0.5]))
        roof = tuple(float(v) for v in rng.uniform([0.35, 0.3, 0.3], [0.7, 0.5, 0.5]))
        out.append(Building(x0, y0, x1, y1, float(rng.uniform(6, 12)), facade, roof))
    return out


# --------------------------------------------------------------------------- generator

def generate_scene(seed: int = 0, params: Optional[SynthParams] = None) -> SynthScene:
    p = params or SynthParams()
    p.validate()
    rng = np.random.default_rng(seed)
    classes = load_class_table()
    hx, hy = p.extent_m / 2.0, p.aspect * p.extent_m / 2.0
    sat_hx, sat_hy = hx + p.margin_m, hy + p.margin_m
    sat_W = int(round(2 * sat_hx / p.gsd))
    sat_H = int(round(2 * sat_hy / p.gsd))
    sat_hx, sat_hy = sat_W * p.gsd / 2.0, sat_H * p.gsd / 2.0
    k = int(round(p.gsd / TEXTURE_RES_M))
    tex_res = p.gsd / k
    x_min, y_max = -sat_hx, sat_hy
    tex, lab_fine = _ground_texture(rng, sat_W * k, sat_H * k, tex_res, x_min, y_max, classes)

    # cameras on an ellipse looking inward at a point below the ground
    n = p.n_cameras
    phase = rng.uniform(0, 2 * math.pi)
    ang = phase + 2 * math.pi * np.arange(n) / n + rng.uniform(-0.05, 0.05, n)
    cam_xy = np.stack([0.42 * hx * np.cos(ang), 0.42 * hy * np.sin(ang)], axis=1)
    buildings = _place_buildings(rng, p, lab_fine, classes, cam_xy, x_min, y_max)
    cam_enu = np.concatenate([cam_xy, np.full((n, 1), p.camera_height_m)], axis=1)
    target = np.array([0.0, 0.0, -6.0])
    R_enu = [_look_at(c, target + np.append(rng.uniform(-3, 3, 2), 0.0)) for c in cam_enu]

    # candidate surface samples: ground outside buildings plus building facades
    n_cand = p.n_splat_candidates
    facade_area = sum(2 * ((b.x1 - b.x0) + (b.y1 - b.y0)) * b.height for b in buildings)
    ground_area = 4 * hx * hy
    n_fac = int(n_cand * facade_area / (facade_area + ground_area))
    n_gnd = n_cand - n_fac
    # small height jitter stands in for reconstruction noise on a flat ground
    g = np.stack([rng.uniform(-hx, hx, n_gnd), rng.uniform(-hy, hy, n_gnd),
                  rng.normal(0.0, p.ground_jitter_m, n_gnd)], axis=1)
    inside = np.zeros(n_gnd, dtype=bool)
    for b in buildings:
        inside |= (g[:, 0] >= b.x0) & (g[:, 0] <= b.x1) & (g[:, 1] >= b.y0) & (g[:, 1] <= b.y1)
    g = g[~inside]
    g_rgb = _sample_raster(tex, g[:, 0], g[:, 1], tex_res, x_min, y_max)
    g_lab = _sample_raster(lab_fine, g[:, 0], g[:, 1], tex_res, x_min, y_max)
    fac_pts, fac_rgb = [], []
    for b in buildings:
        per = 2 * ((b.x1 - b.x0) + (b.y1 - b.y0))
        m = int(round(n_fac * per * b.height / max(facade_area, 1e-9)))
        t = rng.uniform(0, per, m)
        z = rng.uniform(0.05, b.height, m)
        w_, h_ = b.x1 - b.x0, b.y1 - b.y0
        x = np.where(t < w_, b.x0 + t, np.where(t < w_ + h_, b.x1, np.where(t < 2 * w_ + h_, b.x1 - (t - w_ - h_),
                                                                             b.x0)))
        y = np.where(t < w_, b.y0, np.where(t < w_ + h_, b.y0 + (t - w_), np.where(t < 2 * w_ + h_, b.y1,
                                                                                   b.y1 - (t - 2 * w_ - h_))))
        fac_pts.append(np.stack([x, y, z], axis=1))
        shade = 0.85 + 0.15 * ((np.floor(z / 3.0) % 2))
        fac_rgb.append(np.clip(np.array(b.facade_rgb)[None, :] * shade[:, None], 0, 1))
    if fac_pts:
        fpts = np.concatenate(fac_pts)
        pts = np.concatenate([g, fpts])
        rgb = np.concatenate([g_rgb, np.concatenate(fac_rgb)])
        labs = np.concatenate([g_lab, np.full(len(fpts), classes["building-other"], dtype=np.uint8)])
    else:
        pts, rgb, labs = g, g_rgb, g_lab

    # visibility and projections
    W, H, f = p.image_width, p.image_height, p.focal_px
    cx, cy = W / 2.0, H / 2.0
    proj = np.full((n, len(pts), 2), np.nan)
    zc = np.full((n, len(pts)), np.nan)
    vis = np.zeros((n, len(pts)), dtype=bool)
    for i in range(n):
        Xc = (pts - cam_enu[i]) @ R_enu[i].T
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = f * Xc[:, 0] / z + cx
            v = f * Xc[:, 1] / z + cy
        ok = (z > 0.5) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        d = pts - cam_enu[i]
        tb, _ = _ray_boxes(cam_enu[i], d, buildings)
        ok &= ~(tb < 1.0 - 1e-6)
        vis[i] = ok
        proj[i, :, 0], proj[i, :, 1] = u, v
        zc[i] = z
    seen = vis.sum(axis=0)
    keep = np.flatnonzero(seen >= 2)
    if len(keep) < p.n_points:
        raise RuntimeError(f"only {len(keep)} points visible from two cameras; raise n_splat_candidates")

    # splats: every multiply-seen sample; SfM points: a random subset
    spl_pos_enu = pts[keep]
    spl_rgb = rgb[keep]
    sfm_sel = np.sort(rng.choice(len(keep), p.n_points, replace=False))
    sfm_idx = keep[sfm_sel]

    # model frame
    s_true = float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))
    Q = Rotation.random(random_state=int(rng.integers(0, 2**31 - 1))).as_matrix()
    tau = rng.normal(0, 10.0, 3)

    def to_model(X):
        return X @ Q.T / s_true + tau

    spacing_m = math.sqrt(ground_area / max(len(keep), 1))
    spl_pos = to_model(spl_pos_enu).astype(np.float32).astype(np.float64)
    dc = ((spl_rgb - 0.5) / SH_C0).astype(np.float32).astype(np.float64)
    n_spl = len(spl_pos)
    splats = SplatCloud(spl_pos, dc, np.full(n_spl, 4.0), np.full((n_spl, 3), math.log(0.5 * spacing_m / s_true)),
                        np.tile([1.0, 0.0, 0.0, 0.0], (n_spl, 1)))
    splats = SplatCloud(*(np.asarray(a, dtype=np.float32).astype(np.float64)
                          for a in (splats.positions, splats.dc_color, splats.opacity_logit, splats.log_scales,
                                    splats.rotations)))

    # observations, dropping later points that land on an already-used pixel
    sfm_xyz = to_model(pts[sfm_idx])
    obs_lists = [[] for _ in range(n)]
    used = [set() for _ in range(n)]
    tracks = [[] for _ in range(len(sfm_idx))]
    for k_pt, src in enumerate(sfm_idx):
        for i in np.flatnonzero(vis[:, src]):
            u, v = proj[i, src]
            key = (int(math.floor(u)), int(math.floor(v)))
            if key in used[i]:
                continue
            used[i].add(key)
            tracks[k_pt].append((i + 1, len(obs_lists[i])))
            obs_lists[i].append((u, v, k_pt + 1))
    single = [k_pt for k_pt, t in enumerate(tracks) if len(t) < 2]
    if single:
        # keep the track structure simple: a point must be observed twice to be triangulated
        drop = set(single)
        remap = {}
        nid = 1
        for k_pt in range(len(sfm_idx)):
            if k_pt not in drop:
                remap[k_pt + 1] = nid
                nid += 1
        obs_lists = [[(u, v, remap.get(pid, -1)) for (u, v, pid) in ol] for ol in obs_lists]
        keep_pts = [k_pt for k_pt in range(len(sfm_idx)) if k_pt not in drop]
        sfm_idx = sfm_idx[keep_pts]
        sfm_xyz = sfm_xyz[keep_pts]
        tracks = [tracks[k_pt] for k_pt in keep_pts]

    camera = CameraIntrinsics(1, "PINHOLE", W, H, (f, f, cx, cy))
    images = []
    for i in range(n):
        R_m = R_enu[i] @ Q.T
        t_e = -R_enu[i] @ cam_enu[i]
        t_m = t_e / s_true - R_m @ tau
        ol = obs_lists[i]
        xys = np.array([[u, v] for u, v, _ in ol]).reshape(-1, 2)
        pids = np.array([pid for _, _, pid in ol], dtype=np.int64)
        images.append(RegisteredImage(i + 1, f"img_{i:03d}.jpg", rotmat_to_qvec(R_m), t_m, 1, xys, pids))
    # tracks reference (image_id, obs index); -1 observations stay in the image lists only
    cloud = SparseCloud(np.arange(1, len(sfm_idx) + 1), sfm_xyz, np.clip(np.round(rgb[sfm_idx] * 255), 0, 255),
                        np.full(len(sfm_idx), 0.5), [np.array(t) for t in tracks])

    # per-image depth and label rasters by ray casting
    depth_maps, label_maps = {}, {}
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5, indexing="xy")
    dcam = np.stack([(uu - cx) / f, (vv - cy) / f, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    sky = classes["sky-other"]
    bld = classes["building-other"]
    for i in range(n):
        dw = dcam @ R_enu[i]                       # world directions with unit camera-z component
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dw[:, 2] < -1e-12, -cam_enu[i, 2] / dw[:, 2], np.inf)
        tb, which = _ray_boxes(cam_enu[i], dw, buildings, tg)
        hit_b = which >= 0
        t = np.where(hit_b, tb, tg)
        hx_ = cam_enu[i, 0] + t * dw[:, 0]
        hy_ = cam_enu[i, 1] + t * dw[:, 1]
        lab = np.full(W * H, sky, dtype=np.uint8)
        gnd = np.isfinite(t) & ~hit_b
        lab[gnd] = _sample_raster(lab_fine, hx_[gnd], hy_[gnd], tex_res, x_min, y_max)
        lab[hit_b] = bld
        depth = np.where(np.isfinite(t), t, 0.0).reshape(H, W)
        lab = lab.reshape(H, W)
        im = images[i]
        valid_obs = im.point3d_ids > 0
        if valid_obs.any():
            ocol = np.floor(im.xys[valid_obs, 0]).astype(np.int64)
            orow = np.floor(im.xys[valid_obs, 1]).astype(np.int64)
            src = sfm_idx[im.point3d_ids[valid_obs] - 1]
            depth[orow, ocol] = zc[i, src]
            lab[orow, ocol] = labs[src]
        if p.depth_noise > 0:
            depth = depth * (1.0 + rng.normal(0.0, p.depth_noise, depth.shape))
        if p.outlier_frac > 0:
            out = rng.random(depth.shape) < p.outlier_frac
            lowhigh = rng.random(depth.shape) < 0.5
            factor = np.where(lowhigh, rng.uniform(0.3, 0.7, depth.shape), rng.uniform(1.5, 3.0, depth.shape))
            depth = np.where(out, depth * factor, depth)
        depth_maps[im.image_id] = DepthMap.from_array(depth.astype(np.float32))
        label_maps[im.image_id] = LabelMap(lab)

    # satellite: box-filtered texture with roofs painted on top
    sat = tex.reshape(sat_H, k, sat_W, k, 3).mean(axis=(1, 3))
    for b in buildings:
        c0 = (b.x0 - x_min) / p.gsd
        c1 = (b.x1 - x_min) / p.gsd
        r0 = (y_max - b.y1) / p.gsd
        r1 = (y_max - b.y0) / p.gsd
        cols = np.arange(sat_W) + 0.5
        rows = np.arange(sat_H) + 0.5
        m = ((rows >= r0) & (rows < r1))[:, None] & ((cols >= c0) & (cols < c1))[None, :]
        sat[m] = np.array(b.roof_rgb)
    sat_u8 = np.clip(np.floor(sat * 255 + 0.5), 0, 255).astype(np.uint8)
    deg = 180.0 / (math.pi * EARTH_RADIUS_M)
    cl = math.cos(math.radians(p.anchor_lat))
    a_ = p.gsd * deg / cl
    e_ = -p.gsd * deg
    c_ = p.anchor_lon + (x_min + 0.5 * p.gsd) * deg / cl
    f_ = p.anchor_lat + (y_max - 0.5 * p.gsd) * deg
    gt = GeoTransform(a_, 0.0, 0.0, e_, c_, f_, CRS.LONLAT_DEGREES, p.gsd)
    gt_cams = enu_to_geo(cam_enu, p.anchor)
    return SynthScene(p, seed, s_true, Q, tau, camera, images, cloud, splats, sat_u8, gt, depth_maps,
                      label_maps, cam_enu, gt_cams, buildings)


# --------------------------------------------------------------------------- on-disk layout

def cameras_geojson(names, points: List[Optional[GeoPoint]], extra: Optional[List[dict]] = None) -> dict:
    feats = []
    for i, (name, gp) in enumerate(zip(names, points)):
        props = {"image": name, "registered": gp is not None}
        if extra is not None:
            props.update(extra[i])
        geom = None
        if gp is not None:
            coords = [gp.lon, gp.lat] + ([gp.alt] if gp.alt is not None else [])
            geom = {"type": "Point", "coordinates": coords}
        feats.append({"type": "Feature", "geometry": geom, "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def write_scene(scene: SynthScene, out_dir) -> Path:
    out = Path(out_dir)
    (out / "depths").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    write_colmap_model(out / "colmap", [scene.camera], scene.images, scene.cloud)
    (out / "splats.ply").write_bytes(write_ply_splats(scene.splats))
    write_png(out / "satellite.png", scene.satellite)
    (out / "satellite.pgw").write_text(format_world_file(scene.geotransform))
    for im in scene.images:
        stem = scene.image_stem(im)
        (out / "depths" / f"{stem}.pfm").write_bytes(write_pfm(scene.depth_maps[im.image_id].depth))
        (out / "labels" / f"{stem}.png").write_bytes(write_label_png(scene.label_maps[im.image_id].labels))
    gj = cameras_geojson([im.name for im in scene.images], scene.gt_cameras)
    (out / "gt.geojson").write_text(json.dumps(gj, indent=2, sort_keys=True))
    sigma, R, t = scene.similarity
    meta = {"schema_version": 1, "seed": scene.seed, "params": asdict(scene.params), "s_true": scene.s_true,
            "similarity": {"scale": sigma, "rotation": [float(v) for v in R.ravel()],
                           "translation": [float(v) for v in t]},
            "anchor": scene.params.anchor.to_dict(), "crs": CRS.LONLAT_DEGREES.value,
            "satellite_size": [int(scene.satellite.shape[1]), int(scene.satellite.shape[0])]}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out
