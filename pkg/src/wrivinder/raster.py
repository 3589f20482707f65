"""Orthographic zenith rendering of point and splat clouds, and oriented template crops.

Pixel conventions: integer pixel (col, row) covers the continuous square
[col, col+1) x [row, row+1), so its center sits at (col+0.5, row+0.5). Image
right is +x_hat and image up is +y_hat.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DegenerateGeometryError
from .ingest.colmap import SparseCloud
from .ingest.ply import SplatCloud
from .metric import Footprint
from .zenith import ZenithCamera

logger = logging.getLogger(__name__)

POINT_RADIUS_FRACTION = 0.003
SPLAT_RADIUS_K = 2.0
MAX_ALPHA = 1.0 - 1e-12
_FRAGMENT_BUDGET = 2_000_000


class TemplateSource(str, enum.Enum):
    PCD_RENDER = "PCD_RENDER"
    SPLAT_RENDER = "SPLAT_RENDER"


def _affine_inverse(A: np.ndarray) -> np.ndarray:
    M = np.linalg.inv(A[:, :2])
    return np.concatenate([M, -(M @ A[:, 2])[:, None]], axis=1)


def apply_affine(A: np.ndarray, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return A[0, 0] * x + A[0, 1] * y + A[0, 2], A[1, 0] * x + A[1, 1] * y + A[1, 2]


@dataclass
class ZenithImage:
    rgba: np.ndarray       # (H, W, 4) float32 straight (non-premultiplied) color
    depth: np.ndarray      # (H, W) float64 distance below the camera, NaN where uncovered
    index: np.ndarray      # (H, W) int64 index of the front-most input, -1 where uncovered
    pixels_per_unit: float
    n_rendered: int = 0

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def coverage(self) -> np.ndarray:
        return self.index >= 0

    @property
    def pix2model(self) -> np.ndarray:
        """2x3 affine: integer pixel (col, row) -> zenith-frame (a, b) of the pixel center."""
        p = self.pixels_per_unit
        return np.array([[1.0 / p, 0.0, (0.5 - self.width / 2.0) / p],
                         [0.0, -1.0 / p, (self.height / 2.0 - 0.5) / p]])

    @property
    def model2pix(self) -> np.ndarray:
        return _affine_inverse(self.pix2model)

    def to_meta(self) -> dict:
        return {"width": self.width, "height": self.height, "pixels_per_unit": self.pixels_per_unit,
                "pix2model": [float(v) for v in self.pix2model.ravel()], "n_rendered": self.n_rendered}


def _image_size(cam: ZenithCamera, resolution: int):
    ppu = resolution / (2.0 * max(cam.half_extent_u, cam.half_extent_v))
    W = max(1, int(round(2.0 * cam.half_extent_u * ppu)))
    H = max(1, int(round(2.0 * cam.half_extent_v * ppu)))
    return W, H, ppu


def _project(positions: np.ndarray, cam: ZenithCamera, W: int, H: int, ppu: float):
    q = cam.to_zenith_frame(positions)
    cx = q[:, 0] * ppu + W / 2.0
    cy = -q[:, 1] * ppu + H / 2.0
    depth = cam.delta - q[:, 2]
    return cx, cy, depth


def _fragments(cx, cy, radius, W, H, order):
    """Yield (pixel_flat, input_index) fragment batches for discs processed in ``order``.

    A pixel belongs to a disc when its center lies within ``radius`` of the
    disc center; the pixel containing the center always belongs.
    """
    pos = 0
    n = len(order)
    while pos < n:
        R = int(math.ceil(float(radius[order[pos:pos + 65536]].max()))) + 1
        side = 2 * R + 1
        chunk = order[pos:pos + max(1, _FRAGMENT_BUDGET // (side * side))]
        off = np.arange(-R, R + 1)
        ox, oy = np.meshgrid(off, off, indexing="xy")
        ox = ox.ravel()
        oy = oy.ravel()
        bx = np.floor(cx[chunk]).astype(np.int64)
        by = np.floor(cy[chunk]).astype(np.int64)
        px = bx[:, None] + ox[None, :]
        py = by[:, None] + oy[None, :]
        dx = px + 0.5 - cx[chunk][:, None]
        dy = py + 0.5 - cy[chunk][:, None]
        inside = (dx * dx + dy * dy <= (radius[chunk] ** 2)[:, None]) | ((ox == 0) & (oy == 0))[None, :]
        inside &= (px >= 0) & (px < W) & (py >= 0) & (py < H)
        rows, cols = np.nonzero(inside)
        yield (py[rows, cols] * W + px[rows, cols]), chunk[rows]
        pos += len(chunk)


def _valid_inputs(positions: np.ndarray, depth: np.ndarray):
    finite = np.all(np.isfinite(positions), axis=1)
    bad = int((~finite).sum())
    if bad:
        logger.warning("skipping %d inputs with non-finite positions", bad)
    return finite & (depth > 0)


def _render_points(cloud: SparseCloud, cam: ZenithCamera, W: int, H: int, ppu: float) -> ZenithImage:
    cx, cy, depth = _project(cloud.xyz, cam, W, H, ppu)
    ok = _valid_inputs(cloud.xyz, depth)
    radius = np.full(len(cloud), max(1.0, POINT_RADIUS_FRACTION * W))
    best_d = np.full(W * H, np.inf)
    best_i = np.full(W * H, -1, dtype=np.int64)
    drawn = np.zeros(len(cloud), dtype=bool)
    for pix, idx in _fragments(cx, cy, radius, W, H, np.flatnonzero(ok)):
        drawn[idx] = True
        d = depth[idx]
        srt = np.lexsort((idx, d, pix))
        pix, idx, d = pix[srt], idx[srt], d[srt]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, idx, d = pix[first], idx[first], d[first]
        cur_d, cur_i = best_d[pix], best_i[pix]
        win = (d < cur_d) | ((d == cur_d) & ((cur_i < 0) | (idx < cur_i)))
        best_d[pix[win]] = d[win]
        best_i[pix[win]] = idx[win]
    covered = best_i >= 0
    rgba = np.zeros((W * H, 4), dtype=np.float32)
    rgba[covered, :3] = cloud.rgb[best_i[covered]].astype(np.float32) / 255.0
    rgba[covered, 3] = 1.0
    dbuf = np.where(covered, best_d, np.nan)
    return ZenithImage(rgba.reshape(H, W, 4), dbuf.reshape(H, W), best_i.reshape(H, W), ppu, int(drawn.sum()))


def _render_splats(cloud: SplatCloud, cam: ZenithCamera, W: int, H: int, ppu: float,
                   k: float = SPLAT_RADIUS_K) -> ZenithImage:
    cx, cy, depth = _project(cloud.positions, cam, W, H, ppu)
    ok = _valid_inputs(cloud.positions, depth)
    with np.errstate(over="ignore", invalid="ignore"):
        radius = k * np.exp(np.max(cloud.log_scales, axis=1)) * ppu
    radius = np.where(np.isfinite(radius), radius, 0.0)
    cap = max(W, H) / 4.0
    if np.any(radius[ok] > cap):
        logger.warning("clamping %d oversized splat discs to %.1f px", int(np.sum(radius[ok] > cap)), cap)
        radius = np.minimum(radius, cap)
    alpha = np.clip(cloud.alpha, 0.0, MAX_ALPHA)
    color = cloud.base_color
    # front-to-back: nearer first, ties by input index
    order = np.flatnonzero(ok)
    order = order[np.lexsort((order, depth[order]))]
    log_t = np.zeros(W * H)             # log transmittance accumulated so far
    acc = np.zeros((W * H, 3))
    front = np.full(W * H, -1, dtype=np.int64)
    drawn = np.zeros(len(cloud), dtype=bool)
    rank = np.empty(len(cloud), dtype=np.int64)
    rank[order] = np.arange(len(order))
    pos = 0
    while pos < len(order):
        # bound chunk size by fragment budget using the largest radius in a trial window
        trial = order[pos:pos + 65536]
        rmax = int(math.ceil(float(radius[trial].max()))) + 1
        step = max(1, _FRAGMENT_BUDGET // ((2 * rmax + 1) ** 2))
        chunk = order[pos:pos + step]
        pos += len(chunk)
        pix_parts, idx_parts = [], []
        for pix, idx in _fragments(cx, cy, radius, W, H, chunk):
            pix_parts.append(pix)
            idx_parts.append(idx)
        if not pix_parts:
            continue
        pix = np.concatenate(pix_parts)
        idx = np.concatenate(idx_parts)
        drawn[idx] = True
        srt = np.lexsort((rank[idx], pix))
        pix, idx = pix[srt], idx[srt]
        la = np.log1p(-alpha[idx])
        csum = np.cumsum(la)
        start = np.ones(len(pix), dtype=bool)
        start[1:] = pix[1:] != pix[:-1]
        seg = np.cumsum(start) - 1
        seg_base = (csum - la)[start]              # cumulative sum before each segment
        excl = csum - la - seg_base[seg]           # exclusive within-segment log transmittance
        w = np.exp(log_t[pix] + excl) * alpha[idx]
        np.add.at(acc, pix, w[:, None] * color[idx])
        upix = pix[start]
        seg_total = np.add.reduceat(la, np.flatnonzero(start))
        newly = front[upix] < 0
        front[upix[newly]] = idx[start][newly]
        log_t[upix] += seg_total
    covered = front >= 0
    a = 1.0 - np.exp(log_t)
    rgba = np.zeros((W * H, 4), dtype=np.float32)
    with np.errstate(invalid="ignore", divide="ignore"):
        straight = np.where(a[:, None] > 0, acc / np.maximum(a, 1e-300)[:, None], 0.0)
    rgba[:, :3] = np.clip(straight, 0.0, 1.0)
    rgba[:, 3] = np.where(covered, a, 0.0)
    dbuf = np.where(covered, depth[np.maximum(front, 0)], np.nan)
    return ZenithImage(rgba.reshape(H, W, 4), dbuf.reshape(H, W), front.reshape(H, W), ppu, int(drawn.sum()))


def render_zenith(cloud: Union[SparseCloud, SplatCloud], cam: ZenithCamera, resolution: int = 1024,
                  splat_k: float = SPLAT_RADIUS_K) -> ZenithImage:
    """Orthographic top-down render; ``resolution`` is the long-side pixel count."""
    if resolution < 16:
        raise ValueError("render resolution must be at least 16 px")
    if len(cloud) == 0:
        raise DegenerateGeometryError("cannot render an empty cloud")
    W, H, ppu = _image_size(cam, resolution)
    if isinstance(cloud, SplatCloud):
        return _render_splats(cloud, cam, W, H, ppu, splat_k)
    return _render_points(cloud, cam, W, H, ppu)


@dataclass
class Template:
    rgba: np.ndarray
    depth: np.ndarray
    index: np.ndarray
    crop2model: np.ndarray   # 2x3 affine on continuous corner-origin crop coordinates
    source: TemplateSource
    W_m: float
    H_m: float

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def coverage(self) -> np.ndarray:
        return self.index >= 0

    def pixel_center_to_model(self, col, row):
        return apply_affine(self.crop2model, np.asarray(col, dtype=float) + 0.5,
                            np.asarray(row, dtype=float) + 0.5)

    def to_meta(self) -> dict:
        return {"width": self.width, "height": self.height, "source": self.source.value,
                "W_m": self.W_m, "H_m": self.H_m,
                "crop2model": [float(v) for v in self.crop2model.ravel()]}


def extract_oriented_crop(img: ZenithImage, footprint: Footprint, center: Optional[np.ndarray] = None,
                          source: TemplateSource = TemplateSource.SPLAT_RENDER) -> Template:
    """Axis-aligned (in the zenith frame) crop covering the footprint bbox around ``center``.

    Crop dimensions are the model extent times the render's pixels-per-unit,
    rounded. ``crop2model`` maps the crop's continuous corner coordinates
    exactly onto the bbox corners; sampling from the render is nearest-pixel.
    """
    x0, y0, x1, y1 = (float(v) for v in footprint.bbox)
    wm, hm = x1 - x0, y1 - y0
    if not (wm > 0 and hm > 0):
        raise DegenerateGeometryError("footprint has zero extent")
    ppu = img.pixels_per_unit
    if wm > 4.0 * img.width / ppu or hm > 4.0 * img.height / ppu:
        raise DegenerateGeometryError("footprint exceeds 4x the render extent")
    c = footprint.center if center is None else np.asarray(center, dtype=float)
    Wc = max(1, int(round(wm * ppu)))
    Hc = max(1, int(round(hm * ppu)))
    sx, sy = wm / Wc, hm / Hc
    A = np.array([[sx, 0.0, c[0] - wm / 2.0], [0.0, -sy, c[1] + hm / 2.0]])
    jj, ii = np.meshgrid(np.arange(Wc) + 0.5, np.arange(Hc) + 0.5, indexing="xy")
    a, b = apply_affine(A, jj, ii)
    col = np.floor(a * ppu + img.width / 2.0).astype(np.int64)
    row = np.floor(-b * ppu + img.height / 2.0).astype(np.int64)
    inside = (col >= 0) & (col < img.width) & (row >= 0) & (row < img.height)
    cc, rr = np.clip(col, 0, img.width - 1), np.clip(row, 0, img.height - 1)
    rgba = np.where(inside[..., None], img.rgba[rr, cc], 0.0).astype(np.float32)
    depth = np.where(inside, img.depth[rr, cc], np.nan)
    index = np.where(inside, img.index[rr, cc], -1)
    return Template(rgba, depth, index, A, TemplateSource(source), footprint.W_m, footprint.H_m)
