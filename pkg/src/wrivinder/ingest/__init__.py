"""Parsers for the reconstruction and raster artifacts the pipeline consumes."""

from .colmap import (CAMERA_MODEL_ARITY, CameraIntrinsics, ColmapModel, RegisteredImage, SparseCloud,
                     camera_centers, models_equal, parse_colmap_model, qvec_to_rotmat, rotmat_to_qvec,
                     write_colmap_model)
from .ply import SplatCloud, parse_ply_splats, write_ply_splats
from .rasters import (UNLABELED, DepthMap, LabelMap, fit_to_camera, load_depth_map, load_label_map,
                      read_pfm, read_rgb_png, write_label_png, write_pfm, write_png)
from .worldfile import format_world_file, parse_world_file

__all__ = [
    "CAMERA_MODEL_ARITY", "CameraIntrinsics", "ColmapModel", "RegisteredImage", "SparseCloud",
    "camera_centers", "models_equal", "parse_colmap_model", "qvec_to_rotmat", "rotmat_to_qvec",
    "write_colmap_model", "SplatCloud", "parse_ply_splats", "write_ply_splats", "UNLABELED",
    "DepthMap", "LabelMap", "fit_to_camera", "load_depth_map", "load_label_map", "read_pfm",
    "read_rgb_png", "write_label_png", "write_pfm", "write_png", "format_world_file", "parse_world_file",
]
