"""ESRI world-file (six-line affine sidecar) parsing."""

from __future__ import annotations

from typing import Optional, Tuple, Union

from ..errors import ParseError
from ..geodesy import CRS, GeoPoint, GeoTransform, local_gsd


def parse_world_file(text: str, crs: Union[CRS, str], image_size: Tuple[int, int],
                     origin: Optional[GeoPoint] = None) -> GeoTransform:
    """Parse lines A, D, B, E, C, F into a :class:`GeoTransform`.

    ``image_size`` is (width, height); for lon/lat tiles the GSD is taken at
    the tile-center pixel.
    """
    crs = CRS(crs)
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) != 6:
        raise ParseError(f"world file must have exactly 6 numeric lines, found {len(lines)}", "<world file>")
    vals = []
    for i, ln in enumerate(lines, start=1):
        try:
            vals.append(float(ln))
        except ValueError:
            raise ParseError(f"non-numeric value {ln!r}", "<world file>", i) from None
    a, d, b, e, c, f = vals
    if a * e - b * d == 0.0:
        raise ParseError("world file affine has zero determinant", "<world file>")
    gt = GeoTransform(a, d, b, e, c, f, crs, 0.0, origin)
    w, h = image_size
    gsd = local_gsd(gt, (w - 1) / 2.0, (h - 1) / 2.0)
    return GeoTransform(a, d, b, e, c, f, crs, gsd, origin)


def format_world_file(gt: GeoTransform) -> str:
    return "\n".join(repr(float(v)) for v in (gt.a, gt.d, gt.b, gt.e, gt.c, gt.f)) + "\n"
