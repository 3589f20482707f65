"""Evaluation metrics: world-to-model alignment error and camera geolocation errors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientDataError
from .geodesy import GeoPoint, geo_to_enu, geographic_centroid, haversine_array
from .geolocator import umeyama_similarity

logger = logging.getLogger(__name__)

PERCENTILE = 0.67
REGISTRATION_THRESHOLD = 0.67
DEFAULT_TRIPLETS = 500


def percentile_nearest_rank(values: Sequence[float], q: float = PERCENTILE) -> float:
    """Nearest-rank percentile: sorted[ceil(q n) - 1]."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise InsufficientDataError("percentile of an empty list")
    k = max(0, int(math.ceil(q * v.size - 1e-12)) - 1)
    return float(v[k])


@dataclass
class MetricsReport:
    world2model_rmse_p67: float
    geoloc_rmse_mean: float
    geoloc_rmse_p67: float
    centroid_error: float
    registered_fraction: float
    runtime_min: float = math.nan
    n_matched: int = 0
    unmatched: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None or not math.isfinite(x) else float(x)

        return {
            "schema_version": 1,
            "World2Model RMSE": num(self.world2model_rmse_p67),
            "Geolocation RMSE (Mean)": num(self.geoloc_rmse_mean),
            "Geolocation RMSE (67th Percentile)": num(self.geoloc_rmse_p67),
            "Geolocation Centroid Error": num(self.centroid_error),
            "Run Time (in mins)": num(self.runtime_min),
            "registered_fraction": float(self.registered_fraction),
            "n_matched": int(self.n_matched),
            "unmatched": sorted(self.unmatched),
        }


def world2model_rmse(model_centers: Mapping[str, np.ndarray], gt: Mapping[str, GeoPoint],
                     n_triplets: int = DEFAULT_TRIPLETS, seed: int = 0) -> float:
    """Best-triplet similarity alignment error (67th percentile) of model centers to GT GPS.

    NaN when fewer than 67% of the GT images have a model center.
    """
    if not gt:
        raise InsufficientDataError("no ground-truth cameras")
    names = sorted(n for n in gt if n in model_centers)
    frac = len(names) / len(gt)
    if frac < REGISTRATION_THRESHOLD:
        return math.nan
    if len(names) < 3:
        raise InsufficientDataError("world2model needs at least 3 registered cameras with GT")
    pts = [gt[n] for n in names]
    anchor = geographic_centroid(pts)
    dst = geo_to_enu([GeoPoint(p.lat, p.lon, p.alt or 0.0) for p in pts], GeoPoint(anchor.lat, anchor.lon, 0.0))
    src = np.array([np.asarray(model_centers[n], dtype=float) for n in names])
    rng = np.random.default_rng(seed)
    best = math.inf
    for _ in range(n_triplets):
        idx = rng.choice(len(names), 3, replace=False)
        try:
            sim = umeyama_similarity(src[idx], dst[idx])
        except DegenerateGeometryError:
            continue
        res = np.linalg.norm(sim.apply(src) - dst, axis=1)
        best = min(best, percentile_nearest_rank(res))
    if not math.isfinite(best):
        raise DegenerateGeometryError("every sampled triplet was degenerate")
    return best


def geolocation_metrics(pred: Mapping[str, Optional[GeoPoint]], gt: Mapping[str, GeoPoint]) -> Dict[str, float]:
    """Mean, p67 and centroid haversine errors over images present in both maps."""
    names = sorted(n for n, p in pred.items() if p is not None and n in gt)
    unmatched = sorted(n for n, p in pred.items() if p is not None and n not in gt)
    if not names:
        raise InsufficientDataError("no predicted cameras match ground truth")
    P = [pred[n] for n in names]
    G = [gt[n] for n in names]
    err = haversine_array(np.array([p.lat for p in P]), np.array([p.lon for p in P]),
                          np.array([g.lat for g in G]), np.array([g.lon for g in G]))
    cp, cg = geographic_centroid(P), geographic_centroid(G)
    centroid = float(haversine_array(cp.lat, cp.lon, cg.lat, cg.lon))
    return {"mean": float(np.mean(err)), "p67": percentile_nearest_rank(err), "centroid": centroid,
            "n_matched": len(names), "unmatched": unmatched, "per_camera": dict(zip(names, map(float, err)))}


def evaluate(pred: Mapping[str, Optional[GeoPoint]], gt: Mapping[str, GeoPoint],
             model_centers: Optional[Mapping[str, np.ndarray]] = None, runtime_min: float = math.nan,
             n_triplets: int = DEFAULT_TRIPLETS, seed: int = 0) -> MetricsReport:
    registered = [n for n in gt if pred.get(n) is not None]
    frac = len(registered) / len(gt) if gt else 0.0
    g = geolocation_metrics(pred, gt)
    w2m = math.nan
    if model_centers is not None:
        w2m = world2model_rmse(model_centers, gt, n_triplets, seed)
    return MetricsReport(w2m, g["mean"], g["p67"], g["centroid"], frac, runtime_min, g["n_matched"],
                         g["unmatched"])


def read_cameras_geojson(doc: dict) -> Dict[str, Optional[GeoPoint]]:
    """image name -> GeoPoint (None for features without geometry)."""
    if doc.get("type") != "FeatureCollection":
        raise ValueError("expected a GeoJSON FeatureCollection")
    out: Dict[str, Optional[GeoPoint]] = {}
    for f in doc.get("features", []):
        props = f.get("properties") or {}
        name = props.get("image")
        if name is None:
            raise ValueError("feature without an 'image' property")
        geom = f.get("geometry")
        if geom is None:
            out[name] = None
            continue
        if geom.get("type") != "Point":
            raise ValueError(f"feature {name}: expected Point geometry")
        c = geom["coordinates"]
        out[name] = GeoPoint(float(c[1]), float(c[0]), float(c[2]) if len(c) > 2 else None)
    return out
