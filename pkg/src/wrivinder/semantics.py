"""Semantic label propagation to SfM points and the joint ground-plane fit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientDataError, NoConsensusError
from .ingest.colmap import RegisteredImage, SparseCloud
from .ingest.rasters import UNLABELED, LabelMap

logger = logging.getLogger(__name__)

N_CLASSES = 172
CORE_GROUND_NAMES = ("road", "sidewalk", "grass", "dirt", "gravel", "pavement", "ground-other", "sand",
                     "playingfield")
CONTEXTUAL_GROUND_NAMES = ("floor-marble", "floor-stone", "floor-tile", "floor-wood", "carpet", "platform",
                           "bridge")
CONTEXTUAL_MIN_SHARE = 0.05
DEFAULT_CAMERA_HEIGHT_M = 1.7


def load_class_table(text: Optional[str] = None) -> Dict[str, int]:
    """Parse an ``id<TAB>name`` table (the packaged taxonomy by default) into name -> id."""
    if text is None:
        text = resources.files("wrivinder").joinpath("data/classes.tsv").read_text(encoding="utf-8")
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cid, name = line.split("\t")
        table[name.strip()] = int(cid)
    return table


@dataclass(frozen=True)
class GroundClassSet:
    core_ids: frozenset
    contextual_ids: frozenset
    names: Mapping[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.core_ids & self.contextual_ids:
            raise ValueError("core and contextual ground classes overlap")
        if any(not 0 <= i < N_CLASSES for i in self.core_ids | self.contextual_ids):
            raise ValueError(f"ground class ids must be < {N_CLASSES}")

    @classmethod
    def from_names(cls, core=CORE_GROUND_NAMES, contextual=CONTEXTUAL_GROUND_NAMES,
                   table: Optional[Mapping[str, int]] = None) -> "GroundClassSet":
        table = dict(table) if table is not None else load_class_table()
        missing = [n for n in list(core) + list(contextual) if n not in table]
        if missing:
            raise ValueError(f"unknown class names: {missing}")
        return cls(frozenset(table[n] for n in core), frozenset(table[n] for n in contextual), table)

    def active_ids(self, labels: np.ndarray) -> frozenset:
        """Core ids plus each contextual id holding >= 5% of ground-candidate labels."""
        labels = np.asarray(labels)
        cand = np.isin(labels, list(self.core_ids | self.contextual_ids))
        total = int(cand.sum())
        active = set(self.core_ids)
        if total:
            for cid in sorted(self.contextual_ids):
                if np.count_nonzero(labels == cid) >= CONTEXTUAL_MIN_SHARE * total:
                    active.add(cid)
        return frozenset(active)


def majority_label(votes: Sequence[int]) -> int:
    """Most frequent class; lowest id wins ties; UNLABELED for no votes."""
    v = np.asarray([x for x in votes if x != UNLABELED], dtype=np.int64)
    if v.size == 0:
        return UNLABELED
    counts = np.bincount(v, minlength=256)
    return int(np.argmax(counts))


def propagate_labels(cloud: SparseCloud, images: Sequence[RegisteredImage],
                     label_maps: Mapping[int, LabelMap]) -> SparseCloud:
    """Majority vote of observation pixel labels per point (nearest pixel)."""
    by_id = {im.image_id: im for im in images}
    counts = np.zeros((len(cloud), 256), dtype=np.int64)
    for im_id, im in by_id.items():
        lm = label_maps.get(im_id)
        if lm is None or len(im.point3d_ids) == 0:
            continue
        valid = im.point3d_ids >= 0
        xy = im.xys[valid]
        pids = im.point3d_ids[valid]
        col = np.floor(xy[:, 0]).astype(np.int64)
        row = np.floor(xy[:, 1]).astype(np.int64)
        inb = (col >= 0) & (row >= 0) & (col < lm.width) & (row < lm.height)
        inb &= np.array([cloud.has_point(p) for p in pids], dtype=bool)
        if not inb.any():
            continue
        idx = np.array([cloud.index_of(p) for p in pids[inb]], dtype=np.int64)
        lab = lm.labels[row[inb], col[inb]].astype(np.int64)
        keep = lab != UNLABELED
        np.add.at(counts, (idx[keep], lab[keep]), 1)
    labels = np.full(len(cloud), UNLABELED, dtype=np.uint8)
    has = counts.sum(axis=1) > 0
    labels[has] = np.argmax(counts[has], axis=1)
    return cloud.with_labels(labels)


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float
    inlier_ratio: float

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def to_dict(self) -> dict:
        return {"normal": [float(v) for v in self.normal], "offset": float(self.offset),
                "inlier_ratio": float(self.inlier_ratio)}


def _tls_plane(p: np.ndarray):
    c = p.mean(axis=0)
    _, s, vt = np.linalg.svd(p - c, full_matrices=False)
    if len(s) < 2 or s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("plane inlier set is collinear")
    n = vt[2] if len(s) == 3 else np.cross(vt[0], vt[1])
    n = n / np.linalg.norm(n)
    return n, float(n @ c)


def fit_plane_ransac(points: np.ndarray, threshold: float, iterations: int = 500, seed: int = 0,
                     up: Optional[np.ndarray] = None) -> Plane:
    """RANSAC plane over ``points`` refined by total least squares on the best inlier set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    n_pts = len(pts)
    if n_pts < 3:
        raise InsufficientDataError(f"plane fit needs at least 3 samples, got {n_pts}")
    spread = pts - pts.mean(axis=0)
    sv = np.linalg.svd(spread, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("plane samples are collinear or coincident")
    rng = np.random.default_rng(seed)
    best_count, best_mask, best_resid = -1, None, np.inf
    for _ in range(iterations):
        i, j, k = rng.choice(n_pts, 3, replace=False)
        nrm = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(nrm)
        if norm <= 1e-12 * max(np.linalg.norm(pts[j] - pts[i]) ** 2, 1e-300):
            continue
        nrm /= norm
        dist = np.abs((pts - pts[i]) @ nrm)
        mask = dist <= threshold
        cnt = int(mask.sum())
        resid = float(dist[mask].sum())
        if cnt > best_count or (cnt == best_count and resid < best_resid):
            best_count, best_mask, best_resid = cnt, mask, resid
    if best_mask is None or best_count < 3:
        raise NoConsensusError("no plane hypothesis reached 3 inliers")
    n, d = _tls_plane(pts[best_mask])
    if up is not None and n @ np.asarray(up, dtype=float) < 0:
        n, d = -n, -d
    return Plane(n, d, best_count / n_pts)


def default_plane_threshold(r98: float) -> float:
    return 0.05 * r98 / 100.0


def fit_ground_plane(cloud: SparseCloud, camera_centers: np.ndarray, ground: GroundClassSet,
                     up: np.ndarray, camera_height_m: float = DEFAULT_CAMERA_HEIGHT_M, scale: float = 1.0,
                     threshold: Optional[float] = None, iterations: int = 500, seed: int = 0) -> Plane:
    """Joint plane over ground-labelled points and height-corrected camera centers.

    Each camera center is moved ``camera_height_m / scale`` model units down
    along ``up`` (the current vertical estimate) before fitting. The normal
    is oriented to have a nonnegative component along ``up``.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    if cloud.labels is None:
        raise InsufficientDataError("cloud has no propagated labels")
    active = ground.active_ids(cloud.labels)
    gpts = cloud.xyz[np.isin(cloud.labels, list(active))]
    cams = np.asarray(camera_centers, dtype=float).reshape(-1, 3) - (camera_height_m / scale) * up
    joint = np.concatenate([gpts, cams], axis=0)
    if threshold is None:
        from .zenith import trim_outliers
        base = joint[trim_outliers(joint)] if len(joint) >= 3 else joint
        q = base - base.mean(axis=0)
        q = q - np.outer(q @ up, up)
        threshold = default_plane_threshold(float(np.percentile(np.linalg.norm(q, axis=1), 98)) if len(q) else 0.0)
        if threshold <= 0:
            threshold = 1e-9
    return fit_plane_ransac(joint, threshold, iterations, seed, up)
