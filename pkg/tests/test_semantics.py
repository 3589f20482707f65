import numpy as np
import pytest

from wrivinder.errors import DegenerateGeometryError
from wrivinder.ingest import LabelMap, SparseCloud
from wrivinder.ingest.rasters import UNLABELED
from wrivinder.semantics import (GroundClassSet, fit_ground_plane, fit_plane_ransac, load_class_table,
                                 majority_label, propagate_labels)

from conftest import make_model

TABLE = load_class_table()
ROAD, BUILDING = TABLE["road"], TABLE["building-other"]


def tls_normal(points):
    """Least-squares plane through ``points`` via the smallest right singular vector."""
    c = points.mean(axis=0)
    n = np.linalg.svd(points - c)[2][-1]
    n = n if n[2] >= 0 else -n
    return n, float(n @ c)


def test_class_table_has_ground_classes():
    gs = GroundClassSet.from_names()
    assert ROAD in gs.core_ids
    assert TABLE["floor-wood"] in gs.contextual_ids
    with pytest.raises(ValueError):
        GroundClassSet.from_names(core=["no-such-class"])


def test_majority_votes():
    assert majority_label([ROAD]) == ROAD
    assert majority_label([ROAD, ROAD, BUILDING]) == ROAD
    assert majority_label([]) == UNLABELED
    assert majority_label([UNLABELED, UNLABELED]) == UNLABELED
    # ties resolve to the lower id
    assert majority_label([BUILDING, ROAD]) == min(ROAD, BUILDING)


def test_propagate_single_observation():
    cam, images, cloud = make_model(np.array([[0.0, 0.0, 0.0]]), [(0.0, -10.0, 0.0)])
    maps = {1: LabelMap(np.full((cam.height, cam.width), ROAD, np.uint8))}
    labelled = propagate_labels(cloud, images, maps)
    assert labelled.labels.tolist() == [ROAD]


def test_propagate_majority_and_out_of_bounds():
    pts = np.array([[0.0, 0.0, 0.0]])
    cam, images, cloud = make_model(pts, [(0, -10, 0), (10, 0, 0), (-10, 0, 0)])
    lab = {1: ROAD, 2: ROAD, 3: BUILDING}
    maps = {i: LabelMap(np.full((cam.height, cam.width), v, np.uint8)) for i, v in lab.items()}
    assert propagate_labels(cloud, images, maps).labels.tolist() == [ROAD]
    # label maps far smaller than the images: every observation falls outside
    tiny = {i: LabelMap(np.full((2, 2), ROAD, np.uint8)) for i in lab}
    assert propagate_labels(cloud, images, tiny).labels.tolist() == [UNLABELED]


def _ground_cloud(z_noise=0.0, seed=0, n=400):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-10, 10, (n, 2))
    z = rng.normal(0.0, z_noise, n) if z_noise else np.zeros(n)
    xyz = np.column_stack([xy, z])
    labels = np.full(n, ROAD, np.uint8)
    cloud = SparseCloud(np.arange(1, n + 1), xyz, np.zeros((n, 3), np.uint8), np.zeros(n),
                        [np.zeros((0, 2), np.int64)] * n, labels)
    return cloud, rng


def test_ground_plane_with_height_corrected_cameras():
    cloud, rng = _ground_cloud()
    cams = np.column_stack([rng.uniform(-8, 8, (10, 2)), np.full(10, 1.7)])
    plane = fit_ground_plane(cloud, cams, GroundClassSet.from_names(), up=[0, 0, 1],
                             camera_height_m=1.7, scale=1.0)
    assert np.allclose(plane.normal, [0, 0, 1], atol=1e-6)
    assert abs(plane.offset) < 1e-6
    assert plane.inlier_ratio == 1.0


def test_collinear_samples_degenerate():
    pts = np.column_stack([np.linspace(0, 1, 20), np.zeros(20), np.zeros(20)])
    with pytest.raises(DegenerateGeometryError):
        fit_plane_ransac(pts, 0.01)


def test_mislabelled_points_do_not_move_the_plane():
    cloud, rng = _ground_cloud(z_noise=0.01, seed=1, n=1000)
    clean_n, clean_d = tls_normal(cloud.xyz)
    xyz = cloud.xyz.copy()
    bad = rng.choice(len(xyz), len(xyz) // 5, replace=False)
    xyz[bad, 2] += 5.0
    dirty = SparseCloud(cloud.ids, xyz, cloud.rgb, cloud.error, cloud.tracks, cloud.labels)
    plane = fit_ground_plane(dirty, np.zeros((0, 3)), GroundClassSet.from_names(), up=[0, 0, 1],
                             threshold=0.05, seed=0)
    angle = np.degrees(np.arccos(min(1.0, abs(float(plane.normal @ clean_n)))))
    assert angle < 0.5
    assert abs(plane.offset - clean_d) < 0.05


def test_plane_normal_oriented_up():
    cloud, _ = _ground_cloud(seed=2)
    plane = fit_plane_ransac(cloud.xyz, 0.01, up=[0, 0, -1])
    assert plane.normal[2] < 0
