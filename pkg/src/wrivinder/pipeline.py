"""End-to-end orchestration: configuration, stages, and on-disk artifacts.

Each stage reads its inputs from the configured source files and from the
artifacts earlier stages wrote into the output directory, so any stage can
be re-run on its own once its predecessors have produced their files.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import SCHEMA_VERSION
from . import dtm, geolocator, metric, raster, semantics, zenith
from .errors import ConfigError, StageError, WrivinderError
from .evaluate import evaluate, read_cameras_geojson
from .geodesy import CRS, GeoPoint, GeoTransform
from .ingest import (ColmapModel, SplatCloud, fit_to_camera, load_depth_map, load_label_map,
                     parse_colmap_model, parse_ply_splats, parse_world_file, read_rgb_png, write_pfm, write_png)
from .ingest.ply import median_nn_spacing
from .ingest.rasters import to_uint8
from .synth import cameras_geojson

logger = logging.getLogger(__name__)

STAGES = ("ingest", "semantics", "zenith", "metric", "raster", "dtm", "geolocator", "eval")

DEFAULT_CONFIG: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "inputs": {
        "colmap": None,
        "splats": None,
        "satellite": None,
        "world_file": None,
        "crs": "LONLAT_DEGREES",
        "origin": None,
        "depths": None,
        "labels": None,
        "gt": None,
    },
    "output": None,
    "semantics": {
        "core_classes": list(semantics.CORE_GROUND_NAMES),
        "contextual_classes": list(semantics.CONTEXTUAL_GROUND_NAMES),
        "camera_height_m": semantics.DEFAULT_CAMERA_HEIGHT_M,
        "plane_iterations": 500,
    },
    "zenith": {"margin": zenith.DEFAULT_MARGIN, "resolution": zenith.DEFAULT_RESOLUTION},
    "metric": {"rel_threshold": metric.DEFAULT_REL_THRESHOLD, "iterations": None},
    "raster": {"source": "auto", "splat_k": raster.SPLAT_RADIUS_K},
    "dtm": {
        "backend": "regressor",
        "n_pairs": 500,
        "ridge_lambda": 1.0,
        "stride": None,
        "rotations": [0.0, 90.0, 180.0, 270.0],
        "try_mirror": False,
        "verify_orientation": True,
    },
    "geolocator": {
        "grid": geolocator.DEFAULT_GRID,
        "refine": True,
        "refine_iterations": 2,
        "ransac_threshold_m": None,
        "ransac_iterations": 1000,
        "inherit": True,
        "inherit_radius_factor": 2.0,
        "min_shared_points": 10,
    },
    "eval": {"triplets": 500},
}

# artifacts whose content legitimately differs between otherwise identical runs
NONDETERMINISTIC_ARTIFACTS = ("timings.json",)


# --------------------------------------------------------------------------- configuration

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class PipelineConfig:
    """Nested JSON configuration with defaults, ``key=value`` overrides and validation."""

    def __init__(self, data: Optional[dict] = None):
        self.data = _merge(DEFAULT_CONFIG, data or {})

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = Path(path).resolve().parent
        cfg = cls(doc)
        cfg._resolve_paths(base)
        return cfg

    def _resolve_paths(self, base: Path):
        for k, v in self.data["inputs"].items():
            if k in ("crs", "origin") or v is None:
                continue
            p = Path(v)
            self.data["inputs"][k] = str(p if p.is_absolute() else base / p)

    def set(self, assignment: str):
        if "=" not in assignment:
            raise ConfigError(f"override '{assignment}' is not key=value")
        key, text = assignment.split("=", 1)
        parts = key.strip().split(".")
        node = self.data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section '{p}' in '{key}'")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = _parse_value(text)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output(self) -> Path:
        if not self.data["output"]:
            raise ConfigError("no output directory configured")
        return Path(self.data["output"])

    def validate(self, stages: Sequence[str] = STAGES):
        inp = self.data["inputs"]
        need = {"colmap": True, "satellite": any(s in stages for s in ("dtm", "geolocator", "eval")),
                "depths": any(s in stages for s in ("metric", "raster", "dtm", "geolocator", "eval"))}
        for key, required in need.items():
            if required and not inp.get(key):
                raise ConfigError(f"inputs.{key} is required")
        for key in ("colmap", "splats", "satellite", "world_file", "depths", "labels", "gt"):
            v = inp.get(key)
            if v and not Path(v).exists():
                raise ConfigError(f"inputs.{key} does not exist: {v}")
        if inp.get("satellite") and not inp.get("world_file") and _world_file_for(inp["satellite"]) is None:
            raise ConfigError(f"no world file next to {inp['satellite']}")
        try:
            crs = CRS(inp["crs"])
        except ValueError as exc:
            raise ConfigError(f"unknown CRS {inp['crs']!r}") from exc
        if crs == CRS.LOCAL_METERS and not inp.get("origin"):
            raise ConfigError("LOCAL_METERS satellite tiles need inputs.origin {lat, lon}")
        z, m, d, g = self.data["zenith"], self.data["metric"], self.data["dtm"], self.data["geolocator"]
        checks = [
            (z["margin"] > 0, "zenith.margin must be positive"),
            (int(z["resolution"]) >= 16, "zenith.resolution must be at least 16"),
            (0 < m["rel_threshold"] < 1, "metric.rel_threshold must be in (0, 1)"),
            (d["backend"] in ("regressor", "zncc"), "dtm.backend must be 'regressor' or 'zncc'"),
            (int(d["n_pairs"]) >= dtm.MIN_TRAINING_PAIRS, f"dtm.n_pairs must be >= {dtm.MIN_TRAINING_PAIRS}"),
            (d["stride"] is None or int(d["stride"]) >= 1, "dtm.stride must be >= 1"),
            (int(g["grid"]) >= 3, "geolocator.grid must be at least 3"),
            (int(g["ransac_iterations"]) >= 1, "geolocator.ransac_iterations must be positive"),
            (self.data["raster"]["source"] in ("auto", "SPLAT_RENDER", "PCD_RENDER"),
             "raster.source must be auto, SPLAT_RENDER or PCD_RENDER"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_record(self) -> dict:
        """Config as written into the output directory (output path omitted so copies compare equal)."""
        rec = copy.deepcopy(self.data)
        rec.pop("output", None)
        return rec


def _world_file_for(image_path) -> Optional[Path]:
    p = Path(image_path)
    for ext in (".pgw", ".pngw", ".wld"):
        cand = p.with_suffix(ext)
        if cand.exists():
            return cand
    return None


# --------------------------------------------------------------------------- artifacts

def write_json(path: Path, doc: dict):
    doc = dict(doc)
    doc.setdefault("schema_version", SCHEMA_VERSION)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise WrivinderError(f"missing artifact {path}; run the producing stage first") from exc


class Context:
    """Lazily loaded inputs and intermediate results shared by the stages of one run."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.output
        self.out.mkdir(parents=True, exist_ok=True)
        self._cache: Dict[str, Any] = {}
        self.timings: Dict[str, float] = {}

    def _memo(self, key: str, fn: Callable[[], Any]):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # ---- inputs
    @property
    def model(self) -> ColmapModel:
        return self._memo("model", lambda: parse_colmap_model(self.config["inputs"]["colmap"]))

    @property
    def images(self):
        return sorted(self.model.images, key=lambda im: im.image_id)

    @property
    def splats(self) -> Optional[SplatCloud]:
        def load():
            p = self.config["inputs"]["splats"]
            return parse_ply_splats(Path(p).read_bytes()) if p else None
        return self._memo("splats", load)

    @property
    def satellite(self) -> np.ndarray:
        return self._memo("satellite", lambda: read_rgb_png(self.config["inputs"]["satellite"])[..., :3])

    @property
    def geotransform(self) -> GeoTransform:
        def load():
            inp = self.config["inputs"]
            wf = inp["world_file"] or _world_file_for(inp["satellite"])
            H, W = self.satellite.shape[:2]
            origin = GeoPoint.from_dict(inp["origin"]) if inp.get("origin") else None
            return parse_world_file(Path(wf).read_text(), inp["crs"], (W, H), origin)
        return self._memo("geotransform", load)

    @property
    def anchor(self) -> GeoPoint:
        """ENU anchor: the geographic position of the tile-center pixel."""
        def make():
            H, W = self.satellite.shape[:2]
            return self.geotransform.pixel_to_geo((W - 1) / 2.0, (H - 1) / 2.0)
        return self._memo("anchor", make)

    def _per_image(self, key: str, ext: str, loader):
        d = self.config["inputs"][key]
        out = {}
        if not d:
            return out
        cams = self.model.camera_by_id()
        for im in self.images:
            p = Path(d) / (Path(im.name).stem + ext)
            if not p.exists():
                logger.info("no %s for image %s", key, im.name)
                continue
            cam = cams[im.camera_id]
            out[im.image_id] = fit_to_camera(loader(p.read_bytes()), cam.width, cam.height, f"{key} {im.name}")
        return out

    @property
    def depth_maps(self):
        return self._memo("depths", lambda: self._per_image("depths", ".pfm", load_depth_map))

    @property
    def label_maps(self):
        return self._memo("labels", lambda: self._per_image("labels", ".png", load_label_map))

    @property
    def camera_centers(self) -> np.ndarray:
        return np.array([im.center for im in self.images])

    @property
    def gt(self):
        def load():
            p = self.config["inputs"]["gt"]
            return read_cameras_geojson(json.loads(Path(p).read_text())) if p else None
        return self._memo("gt", load)

    # ---- artifacts written by earlier stages
    @property
    def zenith_camera(self) -> zenith.ZenithCamera:
        return self._memo("zenith_camera", lambda: zenith.ZenithCamera.from_dict(
            read_json(self.out / "zenith.json")["camera"]))

    @property
    def scale_doc(self) -> dict:
        return self._memo("scale_doc", lambda: read_json(self.out / "scale.json"))

    @property
    def footprint(self) -> metric.Footprint:
        return metric.Footprint.from_dict(self.scale_doc["footprint"])

    @property
    def template(self) -> raster.Template:
        def load():
            meta = read_json(self.out / "template.json")
            with np.load(self.out / "template.npz") as z:
                return raster.Template(z["rgba"], z["depth"], z["index"],
                                       np.array(meta["crop2model"], dtype=float).reshape(2, 3),
                                       raster.TemplateSource(meta["source"]), float(meta["W_m"]),
                                       float(meta["H_m"]))
        return self._memo("template", load)

    @property
    def placement(self) -> dtm.Placement:
        return self._memo("placement", lambda: dtm.Placement.from_dict(read_json(self.out / "placement.json")))

    @property
    def point_labels(self) -> Optional[np.ndarray]:
        def load():
            p = self.out / "semantics.json"
            if not p.exists():
                return None
            doc = read_json(p)
            return None if doc.get("point_labels") is None else np.array(doc["point_labels"], dtype=np.uint8)
        return self._memo("point_labels", load)

    def ground_classes(self) -> semantics.GroundClassSet:
        s = self.config["semantics"]
        return semantics.GroundClassSet.from_names(s["core_classes"], s["contextual_classes"])


# --------------------------------------------------------------------------- stages

def stage_ingest(ctx: Context):
    model = ctx.model
    sat = ctx.satellite
    gt = ctx.geotransform
    doc = {"n_cameras": len(model.cameras), "n_images": len(model.images), "n_points": len(model.cloud),
           "n_splats": None if ctx.splats is None else len(ctx.splats),
           "n_depth_maps": len(ctx.depth_maps) if ctx.config["inputs"]["depths"] else 0,
           "n_label_maps": len(ctx.label_maps) if ctx.config["inputs"]["labels"] else 0,
           "satellite_size": [int(sat.shape[1]), int(sat.shape[0])], "geotransform": gt.to_dict(),
           "anchor": ctx.anchor.to_dict()}
    write_json(ctx.out / "ingest.json", doc)


def stage_semantics(ctx: Context):
    if not ctx.config["inputs"]["labels"]:
        logger.info("no label maps configured; semantic grounding skipped")
        write_json(ctx.out / "semantics.json", {"point_labels": None, "active_ground_ids": []})
        ctx._cache["point_labels"] = None
        return
    cloud = semantics.propagate_labels(ctx.model.cloud, ctx.images, ctx.label_maps)
    ground = ctx.ground_classes()
    active = sorted(ground.active_ids(cloud.labels))
    n_ground = int(np.isin(cloud.labels, active).sum())
    write_json(ctx.out / "semantics.json", {"point_labels": [int(v) for v in cloud.labels],
                                            "active_ground_ids": active, "n_ground_points": n_ground})
    ctx._cache["point_labels"] = cloud.labels


def _ground_mask(ctx: Context) -> Optional[np.ndarray]:
    labels = ctx.point_labels
    if labels is None:
        return None
    return np.isin(labels, sorted(ctx.ground_classes().active_ids(labels)))


def stage_zenith(ctx: Context):
    xyz = ctx.model.cloud.xyz
    frame = zenith.principal_axes(xyz)
    gmask = _ground_mask(ctx)
    ground_pts = xyz[gmask] if gmask is not None and gmask.any() else None
    z_hat = zenith.resolve_vertical(frame, ctx.camera_centers, ground_pts)
    zc = ctx.config["zenith"]
    cam = zenith.zenith_camera(frame, z_hat, xyz, float(zc["margin"]), int(zc["resolution"]))
    ctx._cache["zenith_camera"] = cam
    write_json(ctx.out / "zenith.json", {
        "camera": cam.to_dict(),
        "principal_frame": {"centroid": [float(v) for v in frame.centroid],
                            "axes": [float(v) for v in frame.axes.ravel()],
                            "eigenvalues": [float(v) for v in frame.eigenvalues]},
        "z_hat": [float(v) for v in z_hat]})


def stage_metric(ctx: Context):
    cam = ctx.zenith_camera
    mc = ctx.config["metric"]
    if not ctx.depth_maps:
        raise WrivinderError("no depth maps matched any registered image")
    est, per_image, pairs = metric.estimate_scene_scale(ctx.images, ctx.model.cloud, ctx.depth_maps,
                                                        float(mc["rel_threshold"]), mc["iterations"], ctx.config.seed)
    gsd = ctx.geotransform.gsd
    fp = metric.metric_footprint(ctx.model.cloud.xyz, cam, est.s, gsd)
    doc = {"scale": est.to_dict(), "per_image": [e.to_dict() for e in per_image], "n_pairs": len(pairs),
           "footprint": fp.to_dict(), "gsd": gsd, "ground_plane": None, "vertical_disagreement_deg": None}
    gmask = _ground_mask(ctx)
    if gmask is not None and gmask.sum() >= 3:
        labelled = ctx.model.cloud.with_labels(ctx.point_labels)
        sc = ctx.config["semantics"]
        try:
            plane = semantics.fit_ground_plane(labelled, ctx.camera_centers, ctx.ground_classes(), cam.z_hat,
                                               float(sc["camera_height_m"]), est.s,
                                               iterations=int(sc["plane_iterations"]), seed=ctx.config.seed)
            dis = zenith.vertical_disagreement_deg(cam.z_hat, plane.normal)
            doc["ground_plane"] = plane.to_dict()
            doc["vertical_disagreement_deg"] = dis
            logger.info("ground-plane normal differs from the PCA vertical by %.2f deg", dis)
        except WrivinderError as exc:
            logger.warning("ground-plane cross-check failed: %s", exc)
    ctx._cache["scale_doc"] = doc
    write_json(ctx.out / "scale.json", doc)


def _template_source(ctx: Context) -> raster.TemplateSource:
    src = ctx.config["raster"]["source"]
    if src == "auto":
        return raster.TemplateSource.SPLAT_RENDER if ctx.splats is not None else raster.TemplateSource.PCD_RENDER
    if src == "SPLAT_RENDER" and ctx.splats is None:
        raise ConfigError("raster.source SPLAT_RENDER needs inputs.splats")
    return raster.TemplateSource(src)


def stage_raster(ctx: Context):
    cam = ctx.zenith_camera
    source = _template_source(ctx)
    cloud = ctx.splats if source == raster.TemplateSource.SPLAT_RENDER else ctx.model.cloud
    img = raster.render_zenith(cloud, cam, int(ctx.config["zenith"]["resolution"]),
                               float(ctx.config["raster"]["splat_k"]))
    fp = ctx.footprint
    tpl = raster.extract_oriented_crop(img, fp, source=source)
    ctx._cache["template"] = tpl
    write_png(ctx.out / "zenith.png", img.rgba)
    write_png(ctx.out / "template.png", tpl.rgba)
    meta = img.to_meta()
    meta["metric_scale"] = ctx.scale_doc["scale"]["s"]
    write_json(ctx.out / "zenith_render.json", meta)
    write_json(ctx.out / "template.json", tpl.to_meta())
    np.savez(ctx.out / "template.npz", rgba=tpl.rgba, depth=tpl.depth, index=tpl.index)


def stage_dtm(ctx: Context):
    dc = ctx.config["dtm"]
    fp = ctx.footprint
    sat = ctx.satellite
    size = (fp.W_px, fp.H_px)
    if dc["backend"] == "zncc":
        matcher = dtm.ZnccMatcher()
    else:
        matcher = dtm.train_matcher(sat, size, int(dc["n_pairs"]), ridge_lambda=float(dc["ridge_lambda"]),
                                    seed=ctx.config.seed)
        logger.info("IoU regressor training RMSE %.4f", matcher.train_rmse)
    pl = dtm.match_heatmap(matcher, ctx.template.rgba, sat, size, stride=dc["stride"],
                           rotations=[float(r) for r in dc["rotations"]], try_mirror=bool(dc["try_mirror"]),
                           verify_orientation=bool(dc["verify_orientation"]))
    if pl.low_confidence:
        logger.warning("placement confidence %.3f is low; the match may be ambiguous", pl.confidence)
    ctx._cache["placement"] = pl
    write_json(ctx.out / "matcher.json", matcher.to_dict())
    write_json(ctx.out / "placement.json", pl.to_dict())
    (ctx.out / "heatmap.pfm").write_bytes(write_pfm(np.max(pl.heatmap, axis=0).astype(np.float32)))


def stage_geolocator(ctx: Context):
    gc = ctx.config["geolocator"]
    gt = ctx.geotransform
    anchor = ctx.anchor
    corrs = geolocator.placement_correspondences(
        ctx.placement, ctx.template, ctx.zenith_camera, ctx.satellite, gt, anchor, bool(gc["refine"]),
        int(gc["grid"]), iterations=int(gc["refine_iterations"]), seed=ctx.config.seed)
    threshold = gc["ransac_threshold_m"] or 2.0 * gt.gsd
    inherit = bool(gc["inherit"]) and ctx.splats is not None
    sfm_xyz = ctx.model.cloud.xyz if inherit else None
    splat_xyz = ctx.splats.positions if inherit else None
    radius = float(gc["inherit_radius_factor"]) * median_nn_spacing(splat_xyz) if inherit else None
    al = geolocator.align_to_world(corrs, anchor, float(threshold), int(gc["ransac_iterations"]),
                                   ctx.config.seed, sfm_xyz, splat_xyz, radius)
    sim = al.similarity
    images = ctx.images
    in_cluster = geolocator.dominant_cluster(images, int(gc["min_shared_points"]))
    extra_names = sorted(set(ctx.gt or {}) - {im.name for im in images})
    results = geolocator.camera_gps(sim, images, anchor, list(in_cluster), extra_names)
    props = [{"residual_m": sim.rms_residual if gp is not None else None} for _, gp in results]
    write_json(ctx.out / "cameras.geojson", cameras_geojson([n for n, _ in results], [g for _, g in results],
                                                            props))
    write_json(ctx.out / "correspondences.json", {"correspondences": [c.to_dict() for c in corrs]})
    tdoc = sim.to_dict()
    tdoc.update({"anchor": anchor.to_dict(), "used_inheritance": al.used_inheritance,
                 "n_fit_points": al.n_correspondences, "threshold_m": float(threshold)})
    write_json(ctx.out / "transform.json", tdoc)
    ctx._cache["camera_results"] = results
    ctx._cache["similarity"] = sim
    _write_overlay(ctx, results)


def _write_overlay(ctx: Context, results):
    sat = Image.fromarray(to_uint8(ctx.satellite)).convert("RGB")
    draw = ImageDraw.Draw(sat)
    pl, tpl = ctx.placement, ctx.template
    corners = [(0, 0), (tpl.width, 0), (tpl.width, tpl.height), (0, tpl.height)]
    poly = [tuple(float(v) for v in pl.template_to_satellite(u, v)) for u, v in corners]
    draw.line(poly + [poly[0]], fill=(255, 200, 0), width=2)
    gt = ctx.geotransform

    def dot(gp, color):
        col, row = gt.geo_to_pixel_array(gp.lat, gp.lon)
        x, y = float(col) + 0.5, float(row) + 0.5
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=color, outline=(0, 0, 0))

    if ctx.gt:
        for gp in ctx.gt.values():
            if gp is not None:
                dot(gp, (40, 90, 255))
    for _, gp in results:
        if gp is not None:
            dot(gp, (255, 40, 40))
    sat.save(ctx.out / "overlay.png", format="PNG", optimize=False, compress_level=6)


def stage_eval(ctx: Context):
    gt = ctx.gt
    if not gt:
        logger.info("no ground truth configured; evaluation skipped")
        return
    results = ctx._cache.get("camera_results")
    if results is None:
        pred = read_cameras_geojson(read_json(ctx.out / "cameras.geojson"))
    else:
        pred = dict(results)
    centers = {im.name: im.center for im, ok in zip(ctx.images, geolocator.dominant_cluster(
        ctx.images, int(ctx.config["geolocator"]["min_shared_points"]))) if ok}
    rep = evaluate(pred, gt, centers, n_triplets=int(ctx.config["eval"]["triplets"]), seed=ctx.config.seed)
    doc = rep.to_dict()
    # run time lives in timings.json so metrics.json stays reproducible
    doc.pop("Run Time (in mins)", None)
    write_json(ctx.out / "metrics.json", doc)
    ctx._cache["metrics"] = rep


STAGE_FUNCS = {"ingest": stage_ingest, "semantics": stage_semantics, "zenith": stage_zenith,
               "metric": stage_metric, "raster": stage_raster, "dtm": stage_dtm,
               "geolocator": stage_geolocator, "eval": stage_eval}


def run_stages(config: PipelineConfig, stages: Sequence[str] = STAGES, stop_after: Optional[str] = None) -> Context:
    """Run ``stages`` in order (truncated after ``stop_after``); raises StageError naming the failing stage."""
    stages = list(stages)
    if stop_after is not None:
        if stop_after not in stages:
            raise ConfigError(f"--stop-after {stop_after!r} is not one of {stages}")
        stages = stages[:stages.index(stop_after) + 1]
    config.validate(stages)
    ctx = Context(config)
    write_json(ctx.out / "config.json", config.to_record())
    t_all = time.perf_counter()
    try:
        for name in stages:
            t0 = time.perf_counter()
            logger.info("stage %s", name)
            try:
                STAGE_FUNCS[name](ctx)
            except (WrivinderError, ValueError, OSError, np.linalg.LinAlgError) as exc:
                raise StageError(name, exc) from exc
            ctx.timings[name] = time.perf_counter() - t0
    finally:
        total = time.perf_counter() - t_all
        write_json(ctx.out / "timings.json", {"stages_s": ctx.timings, "total_s": total,
                                              "Run Time (in mins)": total / 60.0})
    return ctx


def seed_from_env(config: PipelineConfig):
    v = os.environ.get("WRIVINDER_SEED")
    if v is not None:
        try:
            config.data["seed"] = int(v)
        except ValueError as exc:
            raise ConfigError(f"WRIVINDER_SEED must be an integer, got {v!r}") from exc


def synth_config(scene_dir: Path) -> dict:
    """Config document for a scene written by :func:`wrivinder.synth.write_scene` (paths relative)."""
    return {"inputs": {"colmap": "colmap", "splats": "splats.ply", "satellite": "satellite.png",
                       "world_file": "satellite.pgw", "crs": "LONLAT_DEGREES", "depths": "depths",
                       "labels": "labels", "gt": "gt.geojson"},
            "output": None}
