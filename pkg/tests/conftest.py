"""Shared fixtures: small hand-built reconstructions and cached synthetic scenes."""

import numpy as np
import pytest

from wrivinder.ingest import CameraIntrinsics, RegisteredImage, SparseCloud, rotmat_to_qvec
from wrivinder.synth import SynthParams, generate_scene


def look_at_rotation(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation for a camera at ``center`` looking at ``target`` (y down in the image)."""
    f = np.asarray(target, float) - np.asarray(center, float)
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f])


def make_model(points, centers, target=(0.0, 0.0, 0.0), f=300.0, size=(640, 480)):
    """Cameras at ``centers`` looking at ``target``; every point in front of a camera is observed."""
    W, H = size
    cam = CameraIntrinsics(1, "PINHOLE", W, H, (f, f, W / 2.0, H / 2.0))
    pts = np.asarray(points, float)
    tracks = [[] for _ in range(len(pts))]
    images = []
    for i, c in enumerate(centers, start=1):
        R = look_at_rotation(c, target)
        t = -R @ np.asarray(c, float)
        Xc = pts @ R.T + t
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = f * Xc[:, 0] / z + W / 2.0
            v = f * Xc[:, 1] / z + H / 2.0
        ok = np.flatnonzero((z > 0.1) & (u >= 0) & (u < W) & (v >= 0) & (v < H))
        xys = np.stack([u[ok], v[ok]], axis=1)
        pids = ok.astype(np.int64) + 1
        for k, p in enumerate(ok):
            tracks[p].append((i, k))
        images.append(RegisteredImage(i, f"img_{i:03d}.png", rotmat_to_qvec(R), t, 1, xys, pids))
    ids = np.arange(1, len(pts) + 1)
    cloud = SparseCloud(ids, pts, np.full((len(pts), 3), 128, np.uint8), np.zeros(len(pts)), tracks)
    return cam, images, cloud


@pytest.fixture(scope="session")
def small_scene():
    """Reduced synthetic scene shared by integration-style tests."""
    params = SynthParams(extent_m=60.0, n_cameras=12, n_points=2500, n_splat_candidates=16000,
                         building_count=2, margin_m=25.0)
    return generate_scene(3, params)


# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
