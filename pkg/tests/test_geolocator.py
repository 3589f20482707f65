import dataclasses
import math

import numpy as np
import pytest
from scipy import ndimage

from wrivinder.dtm import Placement, Rect
from wrivinder.errors import DegenerateGeometryError, InsufficientDataError, NoConsensusError
from wrivinder.geodesy import CRS, GeoPoint, GeoTransform, enu_to_geo, haversine
from wrivinder.geolocator import (Correspondence, CorrespondenceSource, Similarity, align_to_world,
                                  camera_gps, dominant_cluster, placement_correspondences, ransac_similarity,
                                  splat_to_sfm_geo_inheritance, umeyama_similarity)
from wrivinder.ingest import RegisteredImage
from wrivinder.raster import Template, TemplateSource
from wrivinder.zenith import ZenithCamera

from conftest import make_model


def rot_z(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


# --------------------------------------------------------------------------- Umeyama and RANSAC

def test_umeyama_identity():
    X = np.random.default_rng(0).normal(size=(10, 3))
    s = umeyama_similarity(X, X)
    assert s.scale == pytest.approx(1.0)
    assert np.allclose(s.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(s.translation, 0.0, atol=1e-12)


def test_umeyama_exact_recovery():
    X = np.random.default_rng(1).normal(size=(20, 3))
    Y = 2.0 * X @ rot_z(30).T + [5, 0, 0]
    s = umeyama_similarity(X, Y)
    assert abs(s.scale - 2.0) < 1e-9
    assert np.abs(s.rotation - rot_z(30)).max() < 1e-9
    assert np.abs(s.translation - [5, 0, 0]).max() < 1e-9
    assert s.rms_residual < 1e-9


def test_umeyama_mirror_has_no_reflection():
    rng = np.random.default_rng(2)
    # in 3D a mirrored planar set is reachable by a half turn about an in-plane axis
    X = np.column_stack([rng.normal(size=(30, 2)), np.zeros(30)])
    s = umeyama_similarity(X, X * [-1, 1, 1])
    assert np.linalg.det(s.rotation) == pytest.approx(1.0)
    assert s.rms_residual < 1e-9
    # in the plane itself no rotation reaches the mirror
    X2 = rng.normal(size=(30, 2))
    s2 = umeyama_similarity(X2, X2 * [1, -1])
    assert np.linalg.det(s2.rotation) == pytest.approx(1.0)
    assert s2.rms_residual > 0


def test_umeyama_collinear_rejected():
    X = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometryError):
        umeyama_similarity(X, X)


def test_umeyama_2d():
    X = np.random.default_rng(3).normal(size=(8, 2))
    t = math.radians(-40)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    s = umeyama_similarity(X, 0.5 * X @ R.T + [1, 2])
    assert s.scale == pytest.approx(0.5) and np.allclose(s.rotation, R)


def test_ransac_rejects_gross_outliers():
    rng = np.random.default_rng(4)
    R = random_rotation(rng)
    X = rng.uniform(-50, 50, (130, 3))
    Y = 1.7 * X @ R.T + [10, -20, 3]
    Y[100:] += rng.uniform(20, 80, (30, 3)) * rng.choice([-1, 1], (30, 3))
    s, mask = ransac_similarity(X, Y, threshold=1.0)
    assert s.inlier_count >= 100 and mask[:100].all()
    assert abs(s.scale - 1.7) < 1e-6
    assert np.abs(s.rotation - R).max() < 1e-6
    assert np.abs(s.translation - [10, -20, 3]).max() < 1e-6


def test_ransac_three_points_and_no_consensus():
    X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    s, mask = ransac_similarity(X, X * 3 + 1, threshold=1e-6)
    assert s.rms_residual == pytest.approx(0.0, abs=1e-12) and mask.all()
    rng = np.random.default_rng(5)
    with pytest.raises(NoConsensusError):
        ransac_similarity(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)), threshold=1e-6)


def test_similarity_round_trip():
    s = Similarity(2.0, rot_z(20), np.array([1.0, 2, 3]), 5, 0.1)
    X = np.random.default_rng(6).normal(size=(4, 3))
    assert np.allclose(s.inverse_apply(s.apply(X)), X)
    back = Similarity.from_dict(s.to_dict())
    assert np.allclose(back.apply(X), s.apply(X))


# --------------------------------------------------------------------------- grid correspondences

GT = GeoTransform(1e-5, 0.0, 0.0, -1e-5, 10.0, 45.0, CRS.LONLAT_DEGREES)
CAM = ZenithCamera(np.eye(3), np.array([0, 0, 10.0]), np.zeros(3), 40, 40, 10.0, 1.0)


def texture(h=200, w=240, seed=0):
    rng = np.random.default_rng(seed)
    g = ndimage.gaussian_filter(rng.uniform(size=(h, w)), 2.0)
    g = (g - g.min()) / (g.max() - g.min())
    return np.repeat(g[..., None], 3, axis=2)


def template_from(sat, x0, y0, w, h, covered=None):
    rgba = np.concatenate([sat[y0:y0 + h, x0:x0 + w], np.ones((h, w, 1))], axis=2).astype(np.float32)
    cov = np.ones((h, w), bool) if covered is None else covered
    rgba[~cov, 3] = 0.0
    index = np.where(cov, np.arange(h * w).reshape(h, w), -1)
    depth = np.where(cov, 10.0, np.nan)
    A = np.array([[1.0, 0, -w / 2.0], [0, -1.0, h / 2.0]])
    return Template(rgba, depth, index, A, TemplateSource.PCD_RENDER, float(w), float(h))


def placement_at(cx, cy, w, h):
    return Placement(Rect(cx - w / 2.0, cy - h / 2.0, w, h), (int(cx - w / 2), int(cy - h / 2), w, h), 1.0,
                     0.0, False, 2.0, False, np.zeros((1, 1, 1)), [(0.0, False)], np.zeros(1), np.zeros(1),
                     1, (w, h), (w, h))


def test_identity_placement_reproduces_source_pixels():
    sat = texture()
    x0, y0, w, h = 50, 40, 90, 70
    tpl = template_from(sat, x0, y0, w, h)
    corrs = placement_correspondences(placement_at(x0 + w / 2, y0 + h / 2, w, h), tpl, CAM, sat, GT,
                                      GeoPoint(45.0, 10.0), refine=False)
    assert len(corrs) == 49
    for c in corrs:
        col, row = c.template_px
        src = GT.pixel_to_geo(x0 + col, y0 + row)
        assert (c.geo.lat, c.geo.lon) == (src.lat, src.lon)
        assert c.source == CorrespondenceSource.PLACEMENT_GRID
        # lifted point sits on the ground plane under the pixel
        assert np.allclose(c.model_xyz, [col + 0.5 - w / 2, h / 2 - row - 0.5, 0.0])


def test_refinement_recovers_three_pixel_shift():
    sat = texture(seed=1)
    x0, y0, w, h = 70, 60, 100, 80
    tpl = template_from(sat, x0, y0, w, h)
    shifted = placement_at(x0 + 3 + w / 2, y0 + h / 2, w, h)
    corrs = placement_correspondences(shifted, tpl, CAM, sat, GT, GeoPoint(45.0, 10.0), refine=True)
    refined = [c for c in corrs if c.source == CorrespondenceSource.ZNCC_REFINED]
    assert len(refined) >= 0.8 * len(corrs)
    moves = []
    for c in refined:
        col, row = c.template_px
        truth = np.array([x0 + col + 0.5, y0 + row + 0.5])
        moves.append(np.array(c.sat_xy) - (truth + [3, 0]))
        assert np.linalg.norm(np.array(c.sat_xy) - truth) < 0.5
    assert np.mean(moves, axis=0) == pytest.approx([-3.0, 0.0], abs=0.25)


def test_too_little_coverage():
    sat = texture()
    cov = np.zeros((40, 40), bool)
    cov[5, 5] = cov[30, 30] = cov[5, 30] = True
    tpl = template_from(sat, 0, 0, 40, 40, cov)
    with pytest.raises(InsufficientDataError):
        placement_correspondences(placement_at(20, 20, 40, 40), tpl, CAM, sat, GT, GeoPoint(45.0, 10.0))


# --------------------------------------------------------------------------- inheritance, alignment, output

def test_inheritance_rules():
    splats = np.array([[0.0, 0, 0], [2.0, 0, 0], [-2.0, 0, 0], [50.0, 0, 0]])
    tagged = {0: "a", 1: "b", 2: "c"}
    sfm = np.array([[0.0, 0, 0], [100.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    out = splat_to_sfm_geo_inheritance(sfm, splats, tagged, radius=1.5)
    assert out[0] == "a"            # coincident
    assert 1 not in out             # beyond the radius
    assert out[2] == "a"            # equidistant from splats 0 and 1: lower index
    assert out[3] == "a"            # equidistant from splats 0 and 2
    assert splat_to_sfm_geo_inheritance(sfm, splats, {}, 1.0) == {}


def test_camera_gps_identity_and_scale():
    anchor = GeoPoint(38.9, -77.0)
    ident = Similarity(1.0, np.eye(3), np.zeros(3))
    im0 = RegisteredImage(1, "a.png", np.array([1.0, 0, 0, 0]), np.zeros(3), 1)
    (name, gp), = camera_gps(ident, [im0], anchor)
    assert name == "a.png" and (gp.lat, gp.lon) == pytest.approx((anchor.lat, anchor.lon), abs=1e-12)

    im1 = RegisteredImage(2, "b.png", np.array([1.0, 0, 0, 0]), np.array([-10.0, 0, 0]), 1)
    sim = Similarity(1.5, rot_z(33), np.array([4.0, -7.0, 0.0]))
    res = camera_gps(sim, [im0, im1], anchor)
    assert haversine(res[0][1], res[1][1]) == pytest.approx(15.0, abs=1e-3)

    res = camera_gps(sim, [im0, im1], anchor, registered=[True, False], all_names=["a.png", "c.png"])
    assert [(n, g is None) for n, g in res] == [("a.png", False), ("b.png", True), ("c.png", True)]


def test_dominant_cluster_picks_largest_component():
    rng = np.random.default_rng(7)
    pts_a = rng.uniform(-3, 3, (60, 3))
    _, ims_a, _ = make_model(pts_a, [(10, 0, 2), (0, 10, 2), (-10, 0, 2)])
    _, ims_b, _ = make_model(pts_a, [(10, 1, 2), (1, 10, 2)])
    # a disjoint second cluster: same geometry, different point ids
    ims_b = [dataclasses.replace(im, image_id=im.image_id + 10, point3d_ids=im.point3d_ids + 1000)
             for im in ims_b]
    mask = dominant_cluster(ims_a + ims_b)
    assert mask.tolist() == [True, True, True, False, False]
    assert dominant_cluster(ims_a, min_shared=10_000).tolist() == [True, False, False]


def _corrs_from(model, enu, anchor, splat_index=None):
    geos = enu_to_geo(enu, anchor)
    return [Correspondence(m, g, CorrespondenceSource.ZNCC_REFINED, (0.0, 0.0), (0, 0),
                           -1 if splat_index is None else int(splat_index[i]))
            for i, (m, g) in enumerate(zip(model, geos))]


def test_align_to_world_direct_and_inherited():
    rng = np.random.default_rng(8)
    anchor = GeoPoint(10.0, 20.0)
    model = rng.uniform(-20, 20, (40, 3)) * [1, 1, 0.1]
    truth = Similarity(1.3, rot_z(70), np.array([3.0, -2.0, 0.5]))
    enu = truth.apply(model)
    al = align_to_world(_corrs_from(model, enu, anchor), anchor, threshold=0.1)
    assert not al.used_inheritance
    assert al.similarity.scale == pytest.approx(1.3, abs=1e-6)
    assert np.allclose(al.similarity.rotation, rot_z(70), atol=1e-6)

    # correspondences tagged on splats; SfM points sit near those splats
    corrs = _corrs_from(model, enu, anchor, splat_index=np.arange(40))
    sfm = model + rng.normal(0, 1e-4, model.shape)
    al = align_to_world(corrs, anchor, 0.1, sfm_xyz=sfm, splat_xyz=model, inherit_radius=0.01)
    assert al.used_inheritance and al.n_correspondences == 40
    assert al.similarity.scale == pytest.approx(1.3, rel=1e-3)
