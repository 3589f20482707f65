"""COLMAP text-format sparse model reader/writer.

Reads ``cameras.txt``, ``images.txt`` and ``points3D.txt`` into
:class:`CameraIntrinsics`, :class:`RegisteredImage` and :class:`SparseCloud`
and cross-checks the observation <-> track links. Floats are written with
``repr`` so a write/parse cycle reproduces every field exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from ..errors import DanglingReferenceError, ParseError

logger = logging.getLogger(__name__)

CAMERA_MODEL_ARITY = {
    "SIMPLE_PINHOLE": 3,
    "PINHOLE": 4,
    "SIMPLE_RADIAL": 4,
    "RADIAL": 5,
    "OPENCV": 8,
}

UNLABELED = 255


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model_name: str
    width: int
    height: int
    params: tuple

    def __post_init__(self):
        if self.model_name not in CAMERA_MODEL_ARITY:
            raise ValueError(f"unknown camera model {self.model_name!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera dimensions must be positive")
        if len(self.params) != CAMERA_MODEL_ARITY[self.model_name]:
            raise ValueError(
                f"{self.model_name} expects {CAMERA_MODEL_ARITY[self.model_name]} params, got {len(self.params)}")
        if self.focal[0] <= 0 or self.focal[1] <= 0:
            raise ValueError("focal length must be positive")

    @property
    def focal(self):
        if self.model_name in ("PINHOLE", "OPENCV"):
            return float(self.params[0]), float(self.params[1])
        return float(self.params[0]), float(self.params[0])

    @property
    def principal_point(self):
        if self.model_name in ("PINHOLE", "OPENCV"):
            return float(self.params[2]), float(self.params[3])
        return float(self.params[1]), float(self.params[2])

    def intrinsic_matrix(self) -> np.ndarray:
        fx, fy = self.focal
        cx, cy = self.principal_point
        return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points (distortion ignored)."""
        p = np.asarray(points_cam, dtype=float)
        fx, fy = self.focal
        cx, cy = self.principal_point
        return np.stack([fx * p[..., 0] / p[..., 2] + cx, fy * p[..., 1] / p[..., 2] + cy], axis=-1)


def qvec_to_rotmat(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion with nonnegative w."""
    R = np.asarray(R, dtype=float)
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array([
        [Rxx - Ryy - Rzz, 0, 0, 0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
    ]) / 3.0
    eigvals, eigvecs = np.linalg.eigh(K)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class RegisteredImage:
    image_id: int
    name: str
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation R_i."""
        return qvec_to_rotmat(self.qvec)

    @property
    def center(self) -> np.ndarray:
        """Camera center C_i = -R_i^T t_i in model units."""
        return -self.rotation.T @ np.asarray(self.tvec, dtype=float)

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.rotation.T + np.asarray(self.tvec, dtype=float)

    def equals(self, other: "RegisteredImage") -> bool:
        return (self.image_id == other.image_id and self.name == other.name
                and self.camera_id == other.camera_id
                and np.array_equal(self.qvec, other.qvec) and np.array_equal(self.tvec, other.tvec)
                and np.array_equal(self.xys, other.xys)
                and np.array_equal(self.point3d_ids, other.point3d_ids))


@dataclass
class SparseCloud:
    """SfM points stored column-wise; ``tracks[k]`` is an (n, 2) array of (image_id, obs_idx)."""

    ids: np.ndarray
    xyz: np.ndarray
    rgb: np.ndarray
    error: np.ndarray
    tracks: List[np.ndarray]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(-1, 3)
        self.error = np.asarray(self.error, dtype=float)
        self.tracks = [np.asarray(t, dtype=np.int64).reshape(-1, 2) for t in self.tracks]
        n = len(self.ids)
        if not (len(self.xyz) == len(self.rgb) == len(self.error) == len(self.tracks) == n):
            raise ValueError("SparseCloud columns have inconsistent lengths")
        self._index = {int(pid): i for i, pid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def index_of(self, point_id: int) -> int:
        return self._index[int(point_id)]

    def has_point(self, point_id: int) -> bool:
        return int(point_id) in self._index

    def with_labels(self, labels: np.ndarray) -> "SparseCloud":
        return SparseCloud(self.ids, self.xyz, self.rgb, self.error, self.tracks,
                           np.asarray(labels, dtype=np.uint8))

    def subset(self, mask: np.ndarray) -> "SparseCloud":
        idx = np.flatnonzero(mask)
        return SparseCloud(self.ids[idx], self.xyz[idx], self.rgb[idx], self.error[idx],
                           [self.tracks[i] for i in idx],
                           None if self.labels is None else self.labels[idx])

    def equals(self, other: "SparseCloud") -> bool:
        if len(self) != len(other):
            return False
        same = (np.array_equal(self.ids, other.ids) and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.rgb, other.rgb) and np.array_equal(self.error, other.error))
        if not same:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.tracks, other.tracks))


class ColmapModel(NamedTuple):
    cameras: List[CameraIntrinsics]
    images: List[RegisteredImage]
    cloud: SparseCloud

    def camera_by_id(self) -> Dict[int, CameraIntrinsics]:
        return {c.camera_id: c for c in self.cameras}

    def image_by_id(self) -> Dict[int, RegisteredImage]:
        return {im.image_id: im for im in self.images}


def _content_lines(path: Path):
    """Yield (lineno, stripped line), skipping comments; blank lines are kept."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            yield lineno, line


def _num(tok: str, kind, path, lineno, what):
    try:
        return kind(tok)
    except ValueError:
        raise ParseError(f"malformed {what} field {tok!r}", path, lineno) from None


def parse_cameras_txt(path: Union[str, Path]) -> List[CameraIntrinsics]:
    path = Path(path)
    if not path.exists():
        raise ParseError("missing file", path)
    cams = []
    for lineno, line in _content_lines(path):
        if not line:
            continue
        tok = line.split()
        if len(tok) < 4:
            raise ParseError("camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS...", path, lineno)
        model = tok[1]
        if model not in CAMERA_MODEL_ARITY:
            raise ParseError(f"unknown camera model {model!r}", path, lineno)
        cid = _num(tok[0], int, path, lineno, "camera id")
        w = _num(tok[2], int, path, lineno, "width")
        h = _num(tok[3], int, path, lineno, "height")
        params = tuple(_num(t, float, path, lineno, "camera parameter") for t in tok[4:])
        try:
            cams.append(CameraIntrinsics(cid, model, w, h, params))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return cams


def _normalize_quaternion(q: np.ndarray, path, lineno) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n == 0.0 or not np.isfinite(n):
        raise ParseError("zero or non-finite quaternion", path, lineno)
    if abs(n - 1.0) > 1e-4:
        logger.warning("%s:%d: quaternion norm %.6f renormalized", path, lineno, n)
    if abs(n - 1.0) > 1e-12:
        q = q / n
    return q


def parse_images_txt(path: Union[str, Path]):
    """Returns (images, points-line numbers keyed by image_id)."""
    path = Path(path)
    if not path.exists():
        raise ParseError("missing file", path)
    images = []
    obs_lines = {}
    it = iter(_content_lines(path))
    for lineno, line in it:
        if not line:
            continue
        tok = line.split()
        if len(tok) < 10:
            raise ParseError("image line needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME", path, lineno)
        iid = _num(tok[0], int, path, lineno, "image id")
        q = np.array([_num(t, float, path, lineno, "quaternion") for t in tok[1:5]])
        t = np.array([_num(v, float, path, lineno, "translation") for v in tok[5:8]])
        cam_id = _num(tok[8], int, path, lineno, "camera id")
        name = " ".join(tok[9:])
        q = _normalize_quaternion(q, path, lineno)
        try:
            plineno, pline = next(it)
        except StopIteration:
            plineno, pline = lineno + 1, ""
        ptok = pline.split()
        if len(ptok) % 3 != 0:
            raise ParseError("observation line must hold X Y POINT3D_ID triples", path, plineno)
        m = len(ptok) // 3
        xys = np.empty((m, 2))
        pids = np.empty(m, dtype=np.int64)
        for k in range(m):
            xys[k, 0] = _num(ptok[3 * k], float, path, plineno, "observation x")
            xys[k, 1] = _num(ptok[3 * k + 1], float, path, plineno, "observation y")
            pids[k] = _num(ptok[3 * k + 2], int, path, plineno, "point3d id")
        images.append(RegisteredImage(iid, name, q, t, cam_id, xys, pids))
        obs_lines[iid] = plineno
    return images, obs_lines


def parse_points3d_txt(path: Union[str, Path]):
    """Returns (cloud, line numbers keyed by point id)."""
    path = Path(path)
    if not path.exists():
        raise ParseError("missing file", path)
    ids, xyz, rgb, err, tracks = [], [], [], [], []
    lines = {}
    for lineno, line in _content_lines(path):
        if not line:
            continue
        tok = line.split()
        if len(tok) < 8 or (len(tok) - 8) % 2 != 0:
            raise ParseError("point line needs ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)...", path, lineno)
        pid = _num(tok[0], int, path, lineno, "point id")
        ids.append(pid)
        xyz.append([_num(v, float, path, lineno, "coordinate") for v in tok[1:4]])
        rgb.append([_num(v, int, path, lineno, "color") for v in tok[4:7]])
        err.append(_num(tok[7], float, path, lineno, "error"))
        tr = [_num(v, int, path, lineno, "track entry") for v in tok[8:]]
        tracks.append(np.array(tr, dtype=np.int64).reshape(-1, 2))
        lines[pid] = lineno
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate point ids", path)
    cloud = SparseCloud(np.array(ids, dtype=np.int64), np.array(xyz).reshape(-1, 3),
                        np.array(rgb).reshape(-1, 3), np.array(err), tracks)
    return cloud, lines


def _cross_link(images, obs_lines, cloud, point_lines, images_path, points_path):
    by_id = {im.image_id: im for im in images}
    observed = set()
    for im in images:
        for k, pid in enumerate(im.point3d_ids):
            if pid < 0:
                continue
            if not cloud.has_point(pid):
                raise DanglingReferenceError(
                    f"image {im.image_id} observation {k} references missing point3d_id {int(pid)}",
                    int(pid), images_path, obs_lines.get(im.image_id))
            observed.add((im.image_id, k))
    tracked = set()
    for i, pid in enumerate(cloud.ids):
        lineno = point_lines.get(int(pid))
        for image_id, obs in cloud.tracks[i]:
            image_id, obs = int(image_id), int(obs)
            im = by_id.get(image_id)
            if im is None:
                raise DanglingReferenceError(
                    f"point {int(pid)} track references missing image_id {image_id}",
                    image_id, points_path, lineno)
            if obs < 0 or obs >= len(im.point3d_ids):
                raise DanglingReferenceError(
                    f"point {int(pid)} track references observation {obs} beyond image {image_id}",
                    obs, points_path, lineno)
            if int(im.point3d_ids[obs]) != int(pid):
                raise ParseError(
                    f"point {int(pid)} track entry ({image_id}, {obs}) is not linked back by the image",
                    points_path, lineno)
            if (image_id, obs) in tracked:
                raise ParseError(f"observation ({image_id}, {obs}) appears in more than one track entry",
                                 points_path, lineno)
            tracked.add((image_id, obs))
    missing = observed - tracked
    if missing:
        image_id, obs = sorted(missing)[0]
        raise ParseError(f"observation ({image_id}, {obs}) is missing from its point's track",
                         images_path, obs_lines.get(image_id))


def parse_colmap_model(directory: Union[str, Path]) -> ColmapModel:
    """Parse a COLMAP text model directory into a cross-linked model.

    Raises:
        ParseError: missing file, unknown camera model, malformed field, or a
            dangling/inconsistent reference; the message names file and line.
    """
    d = Path(directory)
    cams_path, images_path, points_path = d / "cameras.txt", d / "images.txt", d / "points3D.txt"
    cameras = parse_cameras_txt(cams_path)
    images, obs_lines = parse_images_txt(images_path)
    cloud, point_lines = parse_points3d_txt(points_path)
    cam_ids = {c.camera_id for c in cameras}
    for im in images:
        if im.camera_id not in cam_ids:
            raise DanglingReferenceError(f"image {im.image_id} references missing camera {im.camera_id}",
                                         im.camera_id, images_path, obs_lines.get(im.image_id, None))
    _cross_link(images, obs_lines, cloud, point_lines, images_path, points_path)
    return ColmapModel(cameras, images, cloud)


def write_colmap_model(directory: Union[str, Path], cameras: Sequence[CameraIntrinsics],
                       images: Sequence[RegisteredImage], cloud: SparseCloud) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in cameras:
            fh.write(" ".join([str(c.camera_id), c.model_name, str(c.width), str(c.height)]
                              + [repr(float(p)) for p in c.params]) + "\n")
    with open(d / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in images:
            head = [str(im.image_id)] + [repr(float(v)) for v in im.qvec] + \
                   [repr(float(v)) for v in im.tvec] + [str(im.camera_id), im.name]
            fh.write(" ".join(head) + "\n")
            obs = []
            for (x, y), pid in zip(im.xys, im.point3d_ids):
                obs += [repr(float(x)), repr(float(y)), str(int(pid))]
            fh.write(" ".join(obs) + "\n")
    with open(d / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for i in range(len(cloud)):
            row = [str(int(cloud.ids[i]))] + [repr(float(v)) for v in cloud.xyz[i]] + \
                  [str(int(v)) for v in cloud.rgb[i]] + [repr(float(cloud.error[i]))]
            row += [str(int(v)) for v in cloud.tracks[i].ravel()]
            fh.write(" ".join(row) + "\n")


def models_equal(a: ColmapModel, b: ColmapModel) -> bool:
    if list(a.cameras) != list(b.cameras):
        return False
    if len(a.images) != len(b.images):
        return False
    if not all(x.equals(y) for x, y in zip(a.images, b.images)):
        return False
    return a.cloud.equals(b.cloud)


def camera_centers(images: Sequence[RegisteredImage]) -> np.ndarray:
    return np.array([im.center for im in images]).reshape(-1, 3)


def with_image(im: RegisteredImage, **changes) -> RegisteredImage:
    return replace(im, **changes)
