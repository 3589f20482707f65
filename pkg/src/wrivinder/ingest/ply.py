"""PLY loader/writer for Gaussian-splat point sets (ascii and binary little-endian)."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import BinaryIO, List, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ParseError, TruncatedDataError, UnsupportedFormatError

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
DEFAULT_OPACITY_LOGIT = 10.0

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class SplatCloud:
    positions: np.ndarray      # (N, 3) model units
    dc_color: np.ndarray       # (N, 3) zeroth-order SH coefficients
    opacity_logit: np.ndarray  # (N,)
    log_scales: np.ndarray     # (N, 3) log of model-unit scales
    rotations: np.ndarray      # (N, 4) quaternion, scalar first

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.dc_color = np.asarray(self.dc_color, dtype=float).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=float).reshape(n)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)

    def __len__(self):
        return len(self.positions)

    @property
    def base_color(self) -> np.ndarray:
        """DC color law: 0.5 + C0 * f_dc, clamped to [0, 1]."""
        return np.clip(0.5 + SH_C0 * self.dc_color, 0.0, 1.0)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def equals(self, other: "SplatCloud") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
                   for k in ("positions", "dc_color", "opacity_logit", "log_scales", "rotations"))


def median_nn_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbour distance; 1.0 when undefined (fewer than 2 distinct points)."""
    pts = np.asarray(points, dtype=float)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < 2:
        return 1.0
    d, _ = cKDTree(pts).query(pts, k=2)
    med = float(np.median(d[:, 1]))
    return med if med > 0 else 1.0


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", "<ply>")
    end = data.find(b"end_header")
    if end < 0:
        raise TruncatedDataError("header has no end_header", "<ply>")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise TruncatedDataError("header not terminated", "<ply>")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: List[Tuple[str, int, list]] = []
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else ""
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("bad element line", "<ply header>", lineno)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", "<ply header>", lineno)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise UnsupportedFormatError(f"unsupported list property {line!r}", "<ply header>", lineno)
                elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise UnsupportedFormatError(f"unknown property type in {line!r}", "<ply header>", lineno)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormatError(f"unsupported PLY format {fmt!r}", "<ply header>")
    return fmt, elements, nl + 1


def _vertex_columns(fmt, elements, data, offset) -> dict:
    if fmt == "binary_little_endian":
        for name, count, props in elements:
            has_list = any(p[2] is not None for p in props)
            if name != "vertex" and has_list:
                raise UnsupportedFormatError(f"list properties in element {name!r} preceding vertex", "<ply>")
            if name == "vertex" and has_list:
                raise UnsupportedFormatError("list properties in vertex element", "<ply>")
            dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
            need = dtype.itemsize * count
            if offset + need > len(data):
                raise TruncatedDataError(
                    f"element {name!r} needs {need} bytes, only {len(data) - offset} available", "<ply>")
            if name == "vertex":
                arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
                return {p[0]: arr[p[0]].astype(float) for p in props}
            offset += need
        raise ParseError("no vertex element", "<ply>")
    lines = data[offset:].decode("ascii", errors="replace").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    cursor = 0
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        if cursor + count > len(lines):
            raise TruncatedDataError(f"expected {count} vertex rows, found {max(0, len(lines) - cursor)}", "<ply>")
        if any(p[2] is not None for p in props):
            raise UnsupportedFormatError("list properties in vertex element", "<ply>")
        rows = []
        for k in range(count):
            tok = lines[cursor + k].split()
            if len(tok) < len(props):
                raise TruncatedDataError("short vertex row", "<ply>", cursor + k + 1)
            try:
                rows.append([float(t) for t in tok[:len(props)]])
            except ValueError:
                raise ParseError("malformed vertex value", "<ply>", cursor + k + 1) from None
        arr = np.array(rows, dtype=float).reshape(count, len(props))
        return {p[0]: arr[:, j] for j, p in enumerate(props)}
    raise ParseError("no vertex element", "<ply>")


def parse_ply_splats(stream: Union[bytes, BinaryIO]) -> SplatCloud:
    """Parse a splat PLY. Missing optional attributes get neutral defaults."""
    data = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    data = bytes(data)
    fmt, elements, offset = _parse_header(data)
    cols = _vertex_columns(fmt, elements, data, offset)
    for k in ("x", "y", "z"):
        if k not in cols:
            raise ParseError(f"vertex element lacks property {k!r}", "<ply>")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    n = len(pos)
    bad = int(np.sum(~np.all(np.isfinite(pos), axis=1)))
    if bad:
        logger.warning("%d splats have non-finite positions", bad)

    def block(prefix, k):
        names = [f"{prefix}{i}" for i in range(k)]
        if all(nm in cols for nm in names):
            return np.stack([cols[nm] for nm in names], axis=1)
        return None

    dc = block("f_dc_", 3)
    if dc is None:
        dc = np.zeros((n, 3))
    opacity = cols.get("opacity")
    if opacity is None:
        opacity = np.full(n, DEFAULT_OPACITY_LOGIT)
    scales = block("scale_", 3)
    if scales is None:
        scales = np.full((n, 3), np.log(median_nn_spacing(pos)))
    rot = block("rot_", 4)
    if rot is None:
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return SplatCloud(pos, dc, opacity, scales, rot)


def write_ply_splats(cloud: SplatCloud, binary: bool = True) -> bytes:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    table = np.concatenate([cloud.positions, cloud.dc_color, cloud.opacity_logit[:, None],
                            cloud.log_scales, cloud.rotations], axis=1)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(cloud)}"] + [f"property float {nm}" for nm in names] + ["end_header"]
    out = io.BytesIO()
    out.write(("\n".join(head) + "\n").encode("ascii"))
    if binary:
        out.write(table.astype("<f4").tobytes())
    else:
        for row in table.astype(np.float32):
            out.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
    return out.getvalue()
