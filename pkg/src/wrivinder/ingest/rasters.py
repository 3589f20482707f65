"""Depth (PFM) and semantic label (8-bit PNG) rasters."""

from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass
from typing import BinaryIO, Optional, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import DimensionMismatchError, ParseError, TruncatedDataError, UnsupportedFormatError

logger = logging.getLogger(__name__)

UNLABELED = 255


@dataclass
class DepthMap:
    depth: np.ndarray   # (H, W) meters, row 0 at the top
    valid: np.ndarray   # (H, W) bool

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @classmethod
    def from_array(cls, depth: np.ndarray) -> "DepthMap":
        depth = np.asarray(depth)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(depth, valid)

    def resized(self, width: int, height: int) -> "DepthMap":
        """Bilinear resample; invalid pixels poison their neighbourhood rather than inventing depth."""
        src = np.where(self.valid, self.depth, np.nan).astype(np.float64)
        zy, zx = height / self.height, width / self.width
        yy = (np.arange(height) + 0.5) / zy - 0.5
        xx = (np.arange(width) + 0.5) / zx - 0.5
        gy, gx = np.meshgrid(yy, xx, indexing="ij")
        out = ndimage.map_coordinates(src, [gy, gx], order=1, mode="nearest")
        return DepthMap.from_array(out.astype(self.depth.dtype))


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) uint8

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def resized(self, width: int, height: int) -> "LabelMap":
        rows = np.minimum((np.arange(height) + 0.5) * self.height / height, self.height - 1).astype(int)
        cols = np.minimum((np.arange(width) + 0.5) * self.width / width, self.width - 1).astype(int)
        return LabelMap(self.labels[rows][:, cols])


def _read_bytes(stream) -> bytes:
    if isinstance(stream, (bytes, bytearray)):
        return bytes(stream)
    return stream.read()


def read_pfm(stream: Union[bytes, BinaryIO]) -> np.ndarray:
    """Decode a PFM into an (H, W) or (H, W, 3) float32 array with row 0 at the top."""
    data = _read_bytes(stream)
    header = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if header is None:
        if not data[:2] in (b"Pf", b"PF"):
            raise ParseError("bad PFM magic", "<pfm>")
        raise ParseError("malformed PFM header", "<pfm>")
    magic, w, h, scale = header.group(1), int(header.group(2)), int(header.group(3)), float(header.group(4))
    channels = 3 if magic == b"PF" else 1
    endian = "<" if scale < 0 else ">"
    offset = header.end()
    need = w * h * channels * 4
    if len(data) - offset < need:
        raise TruncatedDataError(f"PFM payload needs {need} bytes, got {len(data) - offset}", "<pfm>")
    arr = np.frombuffer(data, dtype=endian + "f4", count=w * h * channels, offset=offset)
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    return np.flipud(arr).astype(np.float32)


def write_pfm(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype=np.float32)
    color = arr.ndim == 3
    h, w = arr.shape[:2]
    head = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    return head + np.flipud(arr).astype("<f4").tobytes()


def load_depth_map(stream: Union[bytes, BinaryIO], expected_size: Optional[Tuple[int, int]] = None) -> DepthMap:
    """Load a grayscale PFM depth map; NaN and non-positive depths are invalid.

    ``expected_size`` is (width, height); a mismatch raises
    :class:`DimensionMismatchError` and the caller decides whether to rescale.
    """
    arr = read_pfm(stream)
    if arr.ndim != 2:
        raise UnsupportedFormatError("depth PFM must be single channel (Pf)", "<pfm>")
    dm = DepthMap.from_array(arr)
    if expected_size is not None and (dm.width, dm.height) != tuple(expected_size):
        raise DimensionMismatchError(
            f"depth map is {dm.width}x{dm.height}, image is {expected_size[0]}x{expected_size[1]}",
            (dm.width, dm.height), tuple(expected_size))
    return dm


def load_label_map(stream: Union[bytes, BinaryIO], expected_size: Optional[Tuple[int, int]] = None) -> LabelMap:
    data = _read_bytes(stream)
    if not data.startswith(b"\x89PNG"):
        raise ParseError("bad PNG magic", "<png>")
    img = Image.open(io.BytesIO(data))
    if img.mode not in ("L", "P"):
        raise UnsupportedFormatError(f"label PNG must be 8-bit single channel, got mode {img.mode}", "<png>")
    lm = LabelMap(np.array(img, dtype=np.uint8))
    if expected_size is not None and (lm.width, lm.height) != tuple(expected_size):
        raise DimensionMismatchError(
            f"label map is {lm.width}x{lm.height}, image is {expected_size[0]}x{expected_size[1]}",
            (lm.width, lm.height), tuple(expected_size))
    return lm


def write_label_png(labels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def fit_to_camera(raster, width: int, height: int, what: str = "raster"):
    """Rescale a DepthMap/LabelMap to camera dimensions (bilinear depth, nearest labels)."""
    if (raster.width, raster.height) == (width, height):
        return raster
    logger.info("rescaling %s from %dx%d to %dx%d", what, raster.width, raster.height, width, height)
    return raster.resized(width, height)


def read_rgb_png(path) -> np.ndarray:
    """Satellite/RGB(A) PNG as float32 in [0, 1], shape (H, W, 3) or (H, W, 4)."""
    img = Image.open(path)
    if img.mode not in ("RGB", "RGBA"):
        img = img.convert("RGBA" if "A" in img.mode else "RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write float [0,1] or uint8 RGB/RGBA/gray; fixed encoder settings for reproducible bytes."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)
