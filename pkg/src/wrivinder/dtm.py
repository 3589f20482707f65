"""Test-time self-supervised template matcher.

Pseudo-aligned crop pairs are cut from the satellite tile itself, labelled
with the exact IoU of their rectangles, and used to fit a ridge regressor
over hand-crafted similarity features. The regressor then scores every
candidate placement of the zenith template inside a satellite search window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateGeometryError, InsufficientDataError

logger = logging.getLogger(__name__)

FEATURE_VERSION = 2
N_FEATURES = 15
ANALYSIS_SIZE = 64
N_ORIENT_BINS = 8
GRIDS = (4, 8, ANALYSIS_SIZE)
VALID_ALPHA = 0.5
LOW_CONFIDENCE = 1.05
MAX_CONFIDENCE = 1e6
MIN_TRAINING_PAIRS = 20
FEATURE_NAMES = (["hist_cosine", "grid_zncc", "grid8_zncc", "pixel_zncc"]
                 + [f"hist_absdiff_{i}" for i in range(N_ORIENT_BINS)]
                 + ["mean_absdiff", "var_absdiff", "overlap"])


# --------------------------------------------------------------------------- rectangles

@dataclass(frozen=True)
class Rect:
    """Satellite-pixel rectangle: top-left (x, y) of the unrotated box, size, rotation about its center."""

    x: float
    y: float
    w: float
    h: float
    rotation_deg: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("rect width and height must be positive")
        object.__setattr__(self, "rotation_deg", float(self.rotation_deg) % 360.0)

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def hull(self) -> Tuple[float, float, float, float]:
        """Axis-aligned hull (x0, y0, x1, y1)."""
        t = math.radians(self.rotation_deg)
        c, s = abs(math.cos(t)), abs(math.sin(t))
        # snap round-off so 90-degree multiples give exact hulls
        c = 0.0 if c < 1e-12 else (1.0 if abs(c - 1) < 1e-12 else c)
        s = 0.0 if s < 1e-12 else (1.0 if abs(s - 1) < 1e-12 else s)
        hw = (self.w * c + self.h * s) / 2.0
        hh = (self.w * s + self.h * c) / 2.0
        cx, cy = self.center
        return cx - hw, cy - hh, cx + hw, cy + hh

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "rotation_deg": self.rotation_deg}


def rect_iou(a: Rect, b: Rect) -> float:
    ax0, ay0, ax1, ay1 = a.hull()
    bx0, by0, bx1, by1 = b.hull()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union) if union > 0 else 0.0


# --------------------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class JitterParams:
    blur_sigma_px: float = 1.5
    n_blobs: int = 12
    blob_radius_px: Optional[float] = None   # default 0.12 * min(h, w)
    blob_gain: float = 0.35


def blobby_jitter(crop: np.ndarray, params: JitterParams = JitterParams(), seed=0) -> np.ndarray:
    """Gaussian blur followed by soft multiplicative intensity blobs; alpha is left untouched."""
    crop = np.asarray(crop)
    if crop.size == 0:
        raise ValueError("cannot jitter an empty crop")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = crop.astype(np.float64, copy=True)
    nc = 3 if out.ndim == 3 and out.shape[2] >= 3 else (1 if out.ndim == 2 else out.shape[2])
    color = out[..., :nc] if out.ndim == 3 else out[..., None]
    if params.blur_sigma_px > 0:
        for ch in range(color.shape[-1]):
            color[..., ch] = ndimage.gaussian_filter(color[..., ch], params.blur_sigma_px, mode="nearest")
    h, w = out.shape[:2]
    if params.n_blobs > 0:
        radius = params.blob_radius_px if params.blob_radius_px is not None else 0.12 * min(h, w)
        radius = max(float(radius), 1e-6)
        yy, xx = np.mgrid[0:h, 0:w]
        gain_field = np.ones((h, w))
        for _ in range(params.n_blobs):
            bx, by = rng.uniform(0, w), rng.uniform(0, h)
            g = rng.uniform(1 - params.blob_gain, 1 + params.blob_gain)
            d = np.sqrt((xx + 0.5 - bx) ** 2 + (yy + 0.5 - by) ** 2) / radius
            t = np.clip(1.0 - d, 0.0, 1.0)
            gain_field *= 1.0 + (g - 1.0) * (t * t * (3.0 - 2.0 * t))
        color *= gain_field[..., None]
    np.clip(color, 0.0, 1.0, out=color)
    if out.ndim == 2:
        out = color[..., 0]
    else:
        out[..., :nc] = color
    return out.astype(crop.dtype) if np.issubdtype(crop.dtype, np.floating) else out


# --------------------------------------------------------------------------- pseudo pairs

@dataclass
class PseudoPair:
    crop_a: np.ndarray
    crop_b: np.ndarray
    iou_label: float
    rect_a: Rect
    rect_b: Rect


def offset_for_iou(w: float, h: float, target: float, phi: float) -> Tuple[float, float]:
    """Offset along direction ``phi`` giving two equal w x h rects the target IoU."""
    c, s = abs(math.cos(phi)), abs(math.sin(phi))
    k = 2.0 * w * h * target / (1.0 + target)
    qa = c * s
    qb = -(w * s + h * c)
    qc = w * h - k
    if qa < 1e-12:
        rho = -qc / qb
    else:
        disc = max(qb * qb - 4 * qa * qc, 0.0)
        rho = (-qb - math.sqrt(disc)) / (2 * qa)
    return rho * math.cos(phi), rho * math.sin(phi)


def _with_alpha(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 4:
        return img
    return np.concatenate([img[..., :3], np.ones(img.shape[:2] + (1,), dtype=np.float32)], axis=2)


def generate_pseudo_pairs(sat: np.ndarray, footprint_px: Tuple[int, int], n: int,
                          aug: JitterParams = JitterParams(), seed: int = 0) -> List[PseudoPair]:
    """``n`` crop pairs of size footprint (W_px, H_px) with IoU-stratified offsets."""
    sat = _with_alpha(sat)
    Hs, Ws = sat.shape[:2]
    w, h = int(footprint_px[0]), int(footprint_px[1])
    if w >= Ws or h >= Hs:
        raise DegenerateGeometryError(f"footprint {w}x{h} does not fit in satellite {Ws}x{Hs}")
    if n < 1:
        raise ValueError("need at least one pair")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        xa = int(rng.integers(0, Ws - w + 1))
        ya = int(rng.integers(0, Hs - h + 1))
        target = float(rng.uniform(0.0, 1.0))
        phi = float(rng.uniform(0.0, 2 * math.pi))
        dx, dy = offset_for_iou(w, h, target, phi)
        dx, dy = int(round(dx)), int(round(dy))
        if not 0 <= xa + dx <= Ws - w:
            dx = -dx
        if not 0 <= ya + dy <= Hs - h:
            dy = -dy
        xb = int(np.clip(xa + dx, 0, Ws - w))
        yb = int(np.clip(ya + dy, 0, Hs - h))
        ra, rb = Rect(xa, ya, w, h), Rect(xb, yb, w, h)
        crop_a = sat[ya:ya + h, xa:xa + w].copy()
        crop_b = blobby_jitter(sat[yb:yb + h, xb:xb + w], aug, rng)
        pairs.append(PseudoPair(crop_a, crop_b, rect_iou(ra, rb), ra, rb))
    return pairs


# --------------------------------------------------------------------------- features

def area_weights(n_in: int, n_out: int = ANALYSIS_SIZE) -> np.ndarray:
    """(n_out, n_in) box-filter resampling matrix; each row sums to one."""
    s = n_in / n_out
    lo = np.arange(n_out)[:, None] * s
    hi = lo + s
    j = np.arange(n_in)[None, :]
    return np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None) / s


def gray_of(rgba: np.ndarray) -> np.ndarray:
    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.ndim == 2:
        return rgba
    return 0.299 * rgba[..., 0] + 0.587 * rgba[..., 1] + 0.114 * rgba[..., 2]


def alpha_of(rgba: np.ndarray) -> np.ndarray:
    rgba = np.asarray(rgba)
    if rgba.ndim == 3 and rgba.shape[2] == 4:
        return rgba[..., 3].astype(np.float64)
    return np.ones(rgba.shape[:2])


def analysis_view(rgba: np.ndarray, size: int = ANALYSIS_SIZE):
    """Resample a crop to size x size: (gray, valid) with alpha-weighted averaging."""
    g, a = gray_of(rgba), alpha_of(rgba)
    Ry, Rx = area_weights(g.shape[0], size), area_weights(g.shape[1], size)
    A = Ry @ a @ Rx.T
    P = Ry @ (g * a) @ Rx.T
    valid = A >= VALID_ALPHA
    gray = np.where(valid, P / np.where(A > 0, A, 1.0), 0.0)
    return gray, valid


def _grid_zncc(ga, gb, Mf, cells: int) -> np.ndarray:
    """ZNCC of masked cell means on a ``cells`` x ``cells`` grid; 0 when undefined."""
    S = ga.shape[-1]
    c = S // cells
    lead = ga.shape[:-2]
    shape = lead + (cells, c, cells, c)
    ccount = Mf.reshape(shape).sum(axis=(-3, -1)).reshape(lead + (-1,))
    cvf = (ccount > 0).astype(np.float64)
    ncell = cvf.sum(axis=-1)
    ma = (ga * Mf).reshape(shape).sum(axis=(-3, -1)).reshape(lead + (-1,)) / np.maximum(ccount, 1)
    mb = (gb * Mf).reshape(shape).sum(axis=(-3, -1)).reshape(lead + (-1,)) / np.maximum(ccount, 1)
    za = (ma - (ma * cvf).sum(-1, keepdims=True) / np.maximum(ncell, 1)[..., None]) * cvf
    zb = (mb - (mb * cvf).sum(-1, keepdims=True) / np.maximum(ncell, 1)[..., None]) * cvf
    den = np.linalg.norm(za, axis=-1) * np.linalg.norm(zb, axis=-1)
    return np.where((den > 1e-12) & (ncell >= 2), (za * zb).sum(-1) / np.maximum(den, 1e-300), 0.0)


def _gradient_bins(g: np.ndarray):
    """Central-difference gradient magnitude and orientation bin of each pixel."""
    gy = np.zeros_like(g)
    gx = np.zeros_like(g)
    gy[..., 1:-1, :] = (g[..., 2:, :] - g[..., :-2, :]) * 0.5
    gx[..., :, 1:-1] = (g[..., :, 2:] - g[..., :, :-2]) * 0.5
    b = np.floor((np.arctan2(gy, gx) + np.pi) / (2 * np.pi) * N_ORIENT_BINS).astype(np.int64) % N_ORIENT_BINS
    return np.hypot(gx, gy), b


def _masked_hist(mag: np.ndarray, b: np.ndarray, Mgf: np.ndarray) -> np.ndarray:
    """Normalised magnitude-weighted orientation histogram per leading batch entry."""
    lead = Mgf.shape[:-2]
    n = int(np.prod(lead, dtype=np.int64))
    w = (mag * Mgf).reshape(n, -1)
    lab = np.broadcast_to(b, Mgf.shape).reshape(n, -1) + N_ORIENT_BINS * np.arange(n)[:, None]
    h = np.bincount(lab.ravel(), weights=w.ravel(), minlength=n * N_ORIENT_BINS)
    h = h.reshape(lead + (N_ORIENT_BINS,))
    tot = h.sum(axis=-1, keepdims=True)
    return np.where(tot > 0, h / np.where(tot > 0, tot, 1.0), 0.0)


def _pair_features(ga, va, gb, vb) -> np.ndarray:
    """Vectorised similarity features over leading batch dims of (..., S, S) analysis views."""
    # gradients depend only on each view, so compute them before broadcasting
    mag_a, bin_a = _gradient_bins(np.asarray(ga, dtype=np.float64))
    mag_b, bin_b = _gradient_bins(np.asarray(gb, dtype=np.float64))
    ga, gb = np.broadcast_arrays(ga, gb)
    va, vb = np.broadcast_arrays(va, vb)
    M = va & vb
    Mf = M.astype(np.float64)
    cnt = Mf.sum(axis=(-2, -1))
    safe = np.maximum(cnt, 1.0)
    feats = []

    # gradient histograms on interior pixels whose 4-neighbourhood is valid
    Mg = np.zeros_like(M)
    Mg[..., 1:-1, 1:-1] = (M[..., 1:-1, 1:-1] & M[..., :-2, 1:-1] & M[..., 2:, 1:-1]
                           & M[..., 1:-1, :-2] & M[..., 1:-1, 2:])
    Mgf = Mg.astype(np.float64)
    ha, hb = _masked_hist(mag_a, bin_a, Mgf), _masked_hist(mag_b, bin_b, Mgf)
    na, nb = np.linalg.norm(ha, axis=-1), np.linalg.norm(hb, axis=-1)
    cos = np.where((na > 0) & (nb > 0), (ha * hb).sum(axis=-1) / np.maximum(na * nb, 1e-300),
                   np.where((na == 0) & (nb == 0), 1.0, 0.0))
    feats.append(cos)

    # masked cell means at coarse to per-pixel resolution, compared by zero-mean normalised correlation
    for cells in GRIDS:
        feats.append(_grid_zncc(ga, gb, Mf, cells))

    feats.extend(np.moveaxis(np.abs(ha - hb), -1, 0))
    mua = (ga * Mf).sum(axis=(-2, -1)) / safe
    mub = (gb * Mf).sum(axis=(-2, -1)) / safe
    vara = ((ga - mua[..., None, None]) ** 2 * Mf).sum(axis=(-2, -1)) / safe
    varb = ((gb - mub[..., None, None]) ** 2 * Mf).sum(axis=(-2, -1)) / safe
    feats.append(np.abs(mua - mub))
    feats.append(np.abs(vara - varb))
    feats.append(cnt / float(M.shape[-1] * M.shape[-2]))
    return np.stack(feats, axis=-1)


def extract_features(crop_a: np.ndarray, crop_b: np.ndarray) -> np.ndarray:
    ga, va = analysis_view(crop_a)
    gb, vb = analysis_view(crop_b)
    if not va.any() or not vb.any():
        raise InsufficientDataError("crop is fully transparent")
    if not (va & vb).any():
        raise InsufficientDataError("crops share no valid pixels")
    return _pair_features(ga, va, gb, vb)


# --------------------------------------------------------------------------- regressor

@dataclass
class Matcher:
    weights: np.ndarray
    bias: float
    ridge_lambda: float
    train_rmse: float
    feature_version: int = FEATURE_VERSION
    backend: str = "dtm"

    def predict_raw(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.clip(self.predict_raw(features), 0.0, 1.0)

    def score_views(self, ga, va, gb, vb) -> np.ndarray:
        """Unclamped scores; callers clamp for reporting but rank on these."""
        return self.predict_raw(_pair_features(ga, va, gb, vb))

    def to_dict(self) -> dict:
        return {"backend": self.backend, "feature_version": self.feature_version,
                "weights": [float(v) for v in self.weights], "bias": float(self.bias),
                "ridge_lambda": self.ridge_lambda, "train_rmse": self.train_rmse,
                "feature_names": FEATURE_NAMES}


class ZnccMatcher:
    """Baseline backend: masked ZNCC of the analysis views, mapped to [0, 1]."""

    backend = "zncc"

    def score_views(self, ga, va, gb, vb) -> np.ndarray:
        ga, gb = np.broadcast_arrays(ga, gb)
        M = (va & vb).astype(np.float64)
        n = np.maximum(M.sum(axis=(-2, -1)), 1.0)
        da = (ga - (ga * M).sum(axis=(-2, -1))[..., None, None] / n[..., None, None]) * M
        db = (gb - (gb * M).sum(axis=(-2, -1))[..., None, None] / n[..., None, None]) * M
        den = np.sqrt((da * da).sum(axis=(-2, -1)) * (db * db).sum(axis=(-2, -1)))
        z = np.where(den > 1e-12, (da * db).sum(axis=(-2, -1)) / np.maximum(den, 1e-300), 0.0)
        return (1.0 + z) / 2.0

    def predict(self, features):
        raise NotImplementedError("the ZNCC backend scores analysis views directly")

    def to_dict(self) -> dict:
        return {"backend": self.backend}


def matcher_from_dict(d: dict):
    """Rebuild a matcher from :meth:`Matcher.to_dict` / :meth:`ZnccMatcher.to_dict` output."""
    if d.get("backend") == "zncc":
        return ZnccMatcher()
    if int(d.get("feature_version", FEATURE_VERSION)) != FEATURE_VERSION:
        raise ValueError(f"matcher feature_version {d.get('feature_version')} != {FEATURE_VERSION}")
    return Matcher(np.array(d["weights"], dtype=float), float(d["bias"]), float(d["ridge_lambda"]),
                   float(d["train_rmse"]))


def fit_iou_regressor(pairs: Sequence[PseudoPair], ridge_lambda: float = 1.0,
                      features: Optional[np.ndarray] = None) -> Matcher:
    """Ridge regression of IoU labels on standardised features, folded back to raw weights."""
    if len(pairs) < MIN_TRAINING_PAIRS:
        raise InsufficientDataError(f"need at least {MIN_TRAINING_PAIRS} training pairs, got {len(pairs)}")
    y = np.array([p.iou_label for p in pairs], dtype=float)
    if y.max() - y.min() < 0.5:
        logger.warning("training labels span only %.3f; the regressor may be weak", y.max() - y.min())
    X = features if features is not None else np.stack([extract_features(p.crop_a, p.crop_b) for p in pairs])
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12
    if not live.any():
        raise DegenerateGeometryError("all similarity features are constant over the training set")
    Z = (X[:, live] - mu[live]) / sd[live]
    yc = y - y.mean()
    w_std = np.linalg.solve(Z.T @ Z + ridge_lambda * np.eye(Z.shape[1]), Z.T @ yc)
    w = np.zeros(X.shape[1])
    w[live] = w_std / sd[live]
    b = float(y.mean() - mu @ w)
    pred = np.clip(X @ w + b, 0.0, 1.0)
    rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
    return Matcher(w, b, float(ridge_lambda), rmse)


def train_matcher(sat: np.ndarray, footprint_px: Tuple[int, int], n_pairs: int = 500,
                  aug: JitterParams = JitterParams(), ridge_lambda: float = 1.0, seed: int = 0) -> Matcher:
    pairs = generate_pseudo_pairs(sat, footprint_px, n_pairs, aug, seed)
    return fit_iou_regressor(pairs, ridge_lambda)


# --------------------------------------------------------------------------- heatmap search

def _premultiply(rgba: np.ndarray) -> np.ndarray:
    rgba = _with_alpha(rgba).astype(np.float64)
    out = rgba.copy()
    out[..., :3] *= rgba[..., 3:4]
    return out


def resample_premultiplied(pm: np.ndarray, width: int, height: int) -> np.ndarray:
    Ry, Rx = area_weights(pm.shape[0], height), area_weights(pm.shape[1], width)
    return np.stack([Ry @ pm[..., k] @ Rx.T for k in range(pm.shape[2])], axis=-1)


def rotate_premultiplied(pm: np.ndarray, rotation_deg: float, mirror: bool) -> np.ndarray:
    """Mirror (left-right) then rotate counter-clockwise as displayed."""
    img = pm[:, ::-1] if mirror else pm
    r = float(rotation_deg) % 360.0
    if abs(r / 90.0 - round(r / 90.0)) < 1e-9:
        return np.ascontiguousarray(np.rot90(img, int(round(r / 90.0)) % 4, axes=(0, 1)))
    h, w = img.shape[:2]
    t = math.radians(r)
    c, s = math.cos(t), math.sin(t)
    W2 = int(math.ceil(abs(w * c) + abs(h * s) - 1e-9))
    H2 = int(math.ceil(abs(w * s) + abs(h * c) - 1e-9))
    X, Y = np.meshgrid(np.arange(W2) + 0.5 - W2 / 2.0, np.arange(H2) + 0.5 - H2 / 2.0, indexing="xy")
    # inverse of x' = x c + y s, y' = -x s + y c
    x = X * c - Y * s
    y = X * s + Y * c
    coords = [y + h / 2.0 - 0.5, x + w / 2.0 - 0.5]
    out = np.stack([ndimage.map_coordinates(img[..., k], coords, order=1, mode="constant", cval=0.0)
                    for k in range(img.shape[2])], axis=-1)
    return out


def _view_from_premultiplied(pm: np.ndarray):
    a = pm[..., 3]
    g = 0.299 * pm[..., 0] + 0.587 * pm[..., 1] + 0.114 * pm[..., 2]
    Ry, Rx = area_weights(pm.shape[0]), area_weights(pm.shape[1])
    A = Ry @ a @ Rx.T
    P = Ry @ g @ Rx.T
    valid = A >= VALID_ALPHA
    return np.where(valid, P / np.where(A > 0, A, 1.0), 0.0), valid


def _window_views(sat_pg: np.ndarray, sat_a: np.ndarray, ww: int, wh: int, xs: np.ndarray, ys: np.ndarray):
    """Analysis views of all satellite windows with top-left in xs x ys: (ny, nx, S, S)."""
    from numpy.lib.stride_tricks import sliding_window_view
    Ry, Rx = area_weights(wh), area_weights(ww)
    hp = np.tensordot(sliding_window_view(sat_pg, ww, axis=1)[:, xs, :], Rx, axes=([2], [1]))  # (Hs, nx, S)
    ha = np.tensordot(sliding_window_view(sat_a, ww, axis=1)[:, xs, :], Rx, axes=([2], [1]))
    vp = np.tensordot(sliding_window_view(hp, wh, axis=0)[ys], Ry, axes=([3], [1]))  # (ny, nx, S, S_y)
    va = np.tensordot(sliding_window_view(ha, wh, axis=0)[ys], Ry, axes=([3], [1]))
    vp = np.swapaxes(vp, -1, -2)
    va = np.swapaxes(va, -1, -2)
    valid = va >= VALID_ALPHA
    return np.where(valid, vp / np.where(va > 0, va, 1.0), 0.0), valid


@dataclass
class Placement:
    rect: Rect                 # template-sized rect on the satellite (center = window center)
    window: Tuple[int, int, int, int]   # axis-aligned window (x, y, w, h) actually scored
    score: float
    rotation_deg: float
    mirror: bool
    confidence: float
    low_confidence: bool
    heatmap: np.ndarray        # (n_orientations, ny, nx) coarse scores
    orientations: List[Tuple[float, bool]]
    xs: np.ndarray
    ys: np.ndarray
    stride: int
    template_size: Tuple[int, int] = (0, 0)     # (Wc, Hc) template pixels
    footprint_px: Tuple[int, int] = (0, 0)      # (W_px, H_px) satellite pixels

    def template_to_satellite(self, u, v):
        """Continuous corner-origin template coordinates -> continuous satellite coordinates."""
        Wc, Hc = self.template_size
        Wp, Hp = self.footprint_px
        x = (np.asarray(u, dtype=float) - Wc / 2.0) * (Wp / Wc)
        y = (np.asarray(v, dtype=float) - Hc / 2.0) * (Hp / Hc)
        if self.mirror:
            x = -x
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        cx, cy = self.rect.center
        return x * c + y * s + cx, -x * s + y * c + cy

    def satellite_to_template(self, X, Y):
        Wc, Hc = self.template_size
        Wp, Hp = self.footprint_px
        cx, cy = self.rect.center
        X = np.asarray(X, dtype=float) - cx
        Y = np.asarray(Y, dtype=float) - cy
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        x = X * c - Y * s
        y = X * s + Y * c
        if self.mirror:
            x = -x
        return x * (Wc / Wp) + Wc / 2.0, y * (Hc / Hp) + Hc / 2.0

    def to_dict(self) -> dict:
        cx, cy = self.rect.center
        return {"x": self.window[0], "y": self.window[1], "width": self.window[2], "height": self.window[3],
                "center_x": cx, "center_y": cy, "rotation_deg": self.rotation_deg, "mirror": self.mirror,
                "score": self.score, "confidence": self.confidence, "low_confidence": self.low_confidence,
                "stride": self.stride, "rect": self.rect.to_dict(),
                "template_size": list(self.template_size), "footprint_px": list(self.footprint_px)}

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        r = d["rect"]
        return cls(Rect(r["x"], r["y"], r["w"], r["h"], r["rotation_deg"]),
                   (d["x"], d["y"], d["width"], d["height"]), d["score"], d["rotation_deg"], d["mirror"],
                   d["confidence"], d["low_confidence"], np.zeros((0, 0, 0)), [], np.zeros(0), np.zeros(0),
                   d["stride"], tuple(d["template_size"]), tuple(d["footprint_px"]))


def default_stride(footprint_px: Tuple[int, int]) -> int:
    return max(1, int(max(footprint_px) // 50))


def default_orientations(rotations=(0.0, 90.0, 180.0, 270.0), try_mirror: bool = True):
    out = [(float(r), False) for r in rotations]
    if try_mirror:
        out += [(float(r), True) for r in rotations]
    return out


def _positions(lo: int, hi: int, size: int, stride: int) -> np.ndarray:
    """Top-left coordinates in [lo, hi - size] stepping by stride."""
    if hi - size < lo:
        return np.zeros(0, dtype=np.int64)
    return np.arange(lo, hi - size + 1, stride, dtype=np.int64)


def _masked_zncc(tg: np.ndarray, tv: np.ndarray, sg: np.ndarray, sv: np.ndarray) -> float:
    M = tv & sv
    if M.sum() < 16:
        return -1.0
    a = tg[M] - tg[M].mean()
    b = sg[M] - sg[M].mean()
    den = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float((a * b).sum() / den) if den > 1e-12 else -1.0


def _top_peaks(scores: np.ndarray, k: int) -> List[Tuple[int, int]]:
    """Up to ``k`` local maxima of a coarse score grid, best first, at least 2 cells apart."""
    finite = np.isfinite(scores)
    if not finite.any():
        return []
    filled = np.where(finite, scores, -np.inf)
    is_max = (filled == ndimage.maximum_filter(filled, size=5, mode="constant", cval=-np.inf)) & finite
    iy, ix = np.nonzero(is_max)
    order = np.lexsort((ix, iy, -filled[iy, ix]))
    return [(int(iy[o]), int(ix[o])) for o in order[:k]]


def _verify_orientations(raw, orientations, tpl_pm, sat_pg, sat_a, gx, gy, stride, bounds, top_k):
    """Best full-resolution ZNCC near each orientation's top coarse peaks: list of (zncc, x, y)."""
    x0, y0, x1, y1 = bounds
    sat_v = sat_a >= VALID_ALPHA
    sat_g = np.where(sat_v, sat_pg / np.where(sat_a > 0, sat_a, 1.0), 0.0)
    out = []
    for k, (rot, mir) in enumerate(orientations):
        pm = rotate_premultiplied(tpl_pm, rot, mir)
        th, tw = pm.shape[:2]
        a = pm[..., 3]
        tv = a >= VALID_ALPHA
        tg = np.where(tv, (0.299 * pm[..., 0] + 0.587 * pm[..., 1] + 0.114 * pm[..., 2])
                      / np.where(a > 0, a, 1.0), 0.0)
        best = (-np.inf, 0, 0)
        for iy, ix in _top_peaks(raw[k], top_k):
            for y in range(int(gy[iy]) - stride, int(gy[iy]) + stride + 1):
                for x in range(int(gx[ix]) - stride, int(gx[ix]) + stride + 1):
                    if x < x0 or y < y0 or x + tw > x1 or y + th > y1:
                        continue
                    z = _masked_zncc(tg, tv, sat_g[y:y + th, x:x + tw], sat_v[y:y + th, x:x + tw])
                    if z > best[0]:
                        best = (z, x, y)
        out.append(best)
    return out

def match_heatmap(matcher, template_rgba: np.ndarray, sat: np.ndarray, footprint_px: Tuple[int, int],
                  window: Optional[Tuple[int, int, int, int]] = None, stride: Optional[int] = None,
                  rotations: Sequence[float] = (0.0, 90.0, 180.0, 270.0), try_mirror: bool = True,
                  chunk_elems: int = 8_000_000, verify_orientation: bool = False,
                  verify_top_k: int = 5) -> Placement:
    """Score every strided placement of the template inside ``window`` and refine the peak.

    ``footprint_px`` is the template's size on the satellite (W_px, H_px);
    ``window`` is (x, y, w, h) in satellite pixels, defaulting to the whole
    tile. Ties resolve to the lowest (orientation, y, x).

    With ``verify_orientation`` the ``verify_top_k`` best coarse peaks of every
    orientation are re-scored by full-resolution masked ZNCC over a +-stride neighbourhood and
    the orientation with the highest correlation wins. The learned score works
    on 64x64 summaries and often confuses a layout with its rotated or mirrored
    copy; pixel correlation separates them. Score and confidence are then taken
    from the chosen orientation's heatmap slice.
    """
    sat = _with_alpha(sat)
    Hs, Ws = sat.shape[:2]
    Wp, Hp = int(footprint_px[0]), int(footprint_px[1])
    if Wp < 1 or Hp < 1:
        raise DegenerateGeometryError("footprint must be at least one pixel")
    stride = default_stride((Wp, Hp)) if stride is None else int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    wx, wy, ww, wh = (0, 0, Ws, Hs) if window is None else (int(v) for v in window)
    x0, y0 = max(0, wx), max(0, wy)
    x1, y1 = min(Ws, wx + ww), min(Hs, wy + wh)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateGeometryError("search window is empty")
    sat_a = sat[..., 3].astype(np.float64)
    sat_pg = gray_of(sat) * sat_a
    tpl_pm = resample_premultiplied(_premultiply(template_rgba), Wp, Hp)
    orientations = default_orientations(rotations, try_mirror)

    per_orient = []
    for rot, mir in orientations:
        pm = rotate_premultiplied(tpl_pm, rot, mir)
        tg, tv = _view_from_premultiplied(pm)
        if not tv.any():
            raise InsufficientDataError("template is fully transparent")
        th, tw = pm.shape[:2]
        per_orient.append((tg, tv, tw, th))

    # one grid of positions shared by all orientations so the heatmap is rectangular;
    # positions where a rotated window would leave the search window score zero
    max_w = max(o[2] for o in per_orient)
    max_h = max(o[3] for o in per_orient)
    min_w = min(o[2] for o in per_orient)
    min_h = min(o[3] for o in per_orient)
    gx = _positions(x0, x1, min_w, stride)
    gy = _positions(y0, y1, min_h, stride)
    if gx.size == 0 or gy.size == 0:
        raise DegenerateGeometryError("search window is smaller than the template footprint")
    del max_w, max_h
    raw = np.full((len(orientations), len(gy), len(gx)), -np.inf)

    def score_positions(k, xs, ys):
        tg, tv, tw, th = per_orient[k]
        out = np.full((len(ys), len(xs)), -np.inf)
        okx = xs + tw <= x1
        oky = ys + th <= y1
        xs_ok, ys_ok = xs[okx], ys[oky]
        if xs_ok.size == 0 or ys_ok.size == 0:
            return out
        rows_per = max(1, chunk_elems // (len(xs_ok) * ANALYSIS_SIZE * ANALYSIS_SIZE))
        iy = np.flatnonzero(oky)
        ix = np.flatnonzero(okx)
        for s0 in range(0, len(ys_ok), rows_per):
            yy = ys_ok[s0:s0 + rows_per]
            sg, sv = _window_views(sat_pg, sat_a, tw, th, xs_ok, yy)
            sc = matcher.score_views(tg, tv, sg, sv)
            sc = np.where((tv & sv).any(axis=(-2, -1)), sc, -np.inf)
            out[np.ix_(iy[s0:s0 + rows_per], ix)] = sc
        return out

    for k in range(len(orientations)):
        raw[k] = score_positions(k, gx, gy)
    # rank on unclamped predictions so saturated scores still have a unique peak
    heat = np.clip(raw, 0.0, 1.0)
    verified = None
    if verify_orientation and len(orientations) > 1:
        verified = _verify_orientations(raw, orientations, tpl_pm, sat_pg, sat_a, gx, gy, stride,
                                        (x0, y0, x1, y1), int(verify_top_k))
        k_best = int(np.argmax([v[0] for v in verified]))
        _, best_x, best_y = verified[k_best]
        logger.info("orientation verification ZNCC: %s",
                    ", ".join(f"{r:g}{'m' if m else ''}={v[0]:.3f}" for (r, m), v in zip(orientations, verified)))
        ix_best = int(np.argmin(np.abs(gx - best_x)))
        iy_best = int(np.argmin(np.abs(gy - best_y)))
        bx, by = int(gx[ix_best]), int(gy[iy_best])
        peak = float(heat[k_best, iy_best, ix_best])
        best_raw = float(score_positions(k_best, np.array([best_x]), np.array([best_y]))[0, 0])
        if not np.isfinite(best_raw):
            best_raw = float(raw[k_best, iy_best, ix_best])
        heat_for_conf = heat[k_best][None]
    else:
        flat = int(np.argmax(raw))
        k_best, iy_best, ix_best = np.unravel_index(flat, raw.shape)
        peak_raw = float(raw[k_best, iy_best, ix_best])
        peak = float(heat[k_best, iy_best, ix_best])
        bx, by = int(gx[ix_best]), int(gy[iy_best])

        # stride-1 refinement around the coarse peak
        best_raw, best_x, best_y = peak_raw, bx, by
        if stride > 1:
            rx = np.arange(bx - stride, bx + stride + 1)
            ry = np.arange(by - stride, by + stride + 1)
            rx = rx[rx >= x0]
            ry = ry[ry >= y0]
            local = score_positions(k_best, rx, ry)
            j = int(np.argmax(local))
            jy, jx = np.unravel_index(j, local.shape)
            if local[jy, jx] > peak_raw:
                best_raw, best_x, best_y = float(local[jy, jx]), int(rx[jx]), int(ry[jy])
        heat_for_conf = heat
    best_score = float(np.clip(best_raw, 0.0, 1.0))

    # confidence: peak over the best entry at Chebyshev distance >= 2*stride
    XX, YY = np.meshgrid(gx, gy, indexing="xy")
    far = np.maximum(np.abs(XX - bx), np.abs(YY - by)) >= 2 * stride
    if far.any():
        second = float(heat_for_conf[:, far].max())
        if second > 0:
            confidence = peak / second
        else:
            confidence = MAX_CONFIDENCE if peak > 0 else 1.0
    else:
        confidence = 1.0
    confidence = min(max(confidence, 1.0), MAX_CONFIDENCE)
    rot, mir = orientations[k_best]
    tw, th = per_orient[k_best][2], per_orient[k_best][3]
    cx, cy = best_x + tw / 2.0, best_y + th / 2.0
    rect = Rect(cx - Wp / 2.0, cy - Hp / 2.0, Wp, Hp, rot)
    tpl = np.asarray(template_rgba)
    return Placement(rect, (best_x, best_y, tw, th), best_score, rot, mir, float(confidence),
                     bool(confidence < LOW_CONFIDENCE), heat, orientations, gx, gy, stride,
                     (int(tpl.shape[1]), int(tpl.shape[0])), (Wp, Hp))
