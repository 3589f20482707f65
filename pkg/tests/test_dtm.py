import numpy as np
import pytest
from scipy import ndimage

from wrivinder.dtm import (FEATURE_NAMES, JitterParams, Matcher, Placement, PseudoPair, Rect, ZnccMatcher,
                           blobby_jitter, extract_features, fit_iou_regressor, generate_pseudo_pairs,
                           match_heatmap, matcher_from_dict, offset_for_iou, rect_iou, train_matcher)
from wrivinder.errors import InsufficientDataError

F = {name: i for i, name in enumerate(FEATURE_NAMES)}


def texture(h=160, w=200, seed=0):
    rng = np.random.default_rng(seed)
    g = ndimage.gaussian_filter(rng.uniform(size=(h, w)), 3.0) + 0.5 * ndimage.gaussian_filter(
        rng.uniform(size=(h, w)), 1.0)
    g = (g - g.min()) / (g.max() - g.min())
    return np.repeat(g[..., None], 3, axis=2).astype(np.float32)


@pytest.fixture(scope="module")
def sat():
    return texture()


@pytest.fixture(scope="module")
def matcher(sat):
    return train_matcher(sat, (60, 40), n_pairs=300, seed=0)


# --------------------------------------------------------------------------- rects and pairs

def test_rect_iou_examples():
    a = Rect(0, 0, 2, 2)
    assert rect_iou(a, Rect(0, 0, 2, 2)) == 1.0
    assert rect_iou(a, Rect(5, 5, 2, 2)) == 0.0
    assert rect_iou(a, Rect(1, 0, 2, 2)) == pytest.approx(2 / 6)


def test_rect_hull_of_quarter_turn():
    assert Rect(0, 0, 4, 2, 90).hull() == (1.0, -1.0, 3.0, 3.0)


def test_jitter_identity_and_constant():
    rng = np.random.default_rng(1)
    crop = rng.uniform(size=(20, 30, 4)).astype(np.float32)
    assert np.array_equal(blobby_jitter(crop, JitterParams(blur_sigma_px=0, n_blobs=0)), crop)
    const = np.full((20, 30, 3), 0.4, np.float32)
    out = blobby_jitter(const, JitterParams(blur_sigma_px=3.0, n_blobs=0))
    assert np.allclose(out, 0.4, atol=1e-6)


def test_jitter_deterministic_and_keeps_alpha():
    crop = np.random.default_rng(2).uniform(size=(20, 30, 4)).astype(np.float32)
    a, b = blobby_jitter(crop, seed=7), blobby_jitter(crop, seed=7)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(a[..., 3], crop[..., 3])


def iou_of_offset(w, h, dx, dy):
    iw, ih = max(0.0, w - abs(dx)), max(0.0, h - abs(dy))
    inter = iw * ih
    return inter / (2 * w * h - inter)


@pytest.mark.parametrize("target,phi", [(0.8, 0.3), (0.5, 2.0), (0.2, 4.0), (0.95, 1.57)])
def test_offset_reaches_target_iou(target, phi):
    dx, dy = offset_for_iou(40, 25, target, phi)
    assert iou_of_offset(40, 25, dx, dy) == pytest.approx(target, abs=1e-9)


def test_offset_extremes():
    assert offset_for_iou(40, 25, 1.0, 0.7) == pytest.approx((0.0, 0.0), abs=1e-9)
    dx, dy = offset_for_iou(40, 25, 0.0, 0.7)
    assert abs(dx) >= 40 - 1e-9 or abs(dy) >= 25 - 1e-9
    assert iou_of_offset(40, 25, dx, dy) == 0.0
    # equal rects shifted by half a width
    dx, dy = offset_for_iou(40, 25, 1 / 3, 0.0)
    assert (dx, dy) == pytest.approx((20.0, 0.0))


def test_pseudo_pairs_labels_match_rects(sat):
    pairs = generate_pseudo_pairs(sat, (60, 40), 30, seed=3)
    for p in pairs:
        assert p.crop_a.shape == p.crop_b.shape == (40, 60, 4)
        assert p.iou_label == pytest.approx(rect_iou(p.rect_a, p.rect_b))
        assert 0.0 <= p.iou_label <= 1.0


# --------------------------------------------------------------------------- features and regressor

def test_self_similarity_features(sat):
    f = extract_features(sat[:40, :60], sat[:40, :60])
    assert f[F["hist_cosine"]] == pytest.approx(1.0)
    for name in ("grid_zncc", "grid8_zncc", "pixel_zncc"):
        assert f[F[name]] == pytest.approx(1.0)
    diffs = [i for n, i in F.items() if "absdiff" in n]
    assert np.allclose(f[diffs], 0.0)


def test_stripe_pattern_vs_half_turn():
    img = np.zeros((64, 64, 3), np.float32)
    img[:, :32] = 1.0
    f = extract_features(img, np.rot90(img, 2))
    # left-bright vs right-bright: hand-computed grid ZNCC is exactly -1
    assert f[F["grid_zncc"]] <= 0.0
    assert f[F["grid_zncc"]] == pytest.approx(-1.0)


def test_transparent_crop_rejected(sat):
    clear = np.zeros((40, 60, 4), np.float32)
    with pytest.raises(InsufficientDataError):
        extract_features(sat[:40, :60], clear)


def test_constant_labels_give_constant_prediction(sat):
    pairs = generate_pseudo_pairs(sat, (60, 40), 40, seed=4)
    flat = [PseudoPair(p.crop_a, p.crop_b, 0.5, p.rect_a, p.rect_b) for p in pairs]
    m = fit_iou_regressor(flat)
    X = np.stack([extract_features(p.crop_a, p.crop_b) for p in pairs])
    assert np.allclose(m.predict(X), 0.5)
    assert np.allclose(m.weights, 0.0) and m.bias == pytest.approx(0.5)


def test_too_few_pairs(sat):
    with pytest.raises(InsufficientDataError):
        fit_iou_regressor(generate_pseudo_pairs(sat, (60, 40), 5, seed=5))


def test_regressor_beats_constant_predictor(sat, matcher):
    labels = np.array([p.iou_label for p in generate_pseudo_pairs(sat, (60, 40), 300, seed=0)])
    assert matcher.train_rmse < 0.8 * labels.std()
    back = matcher_from_dict(matcher.to_dict())
    assert isinstance(back, Matcher)
    assert np.array_equal(back.weights, matcher.weights) and back.bias == matcher.bias
    assert isinstance(matcher_from_dict(ZnccMatcher().to_dict()), ZnccMatcher)


# --------------------------------------------------------------------------- heatmap search

def test_self_match_peak(matcher, sat):
    x0, y0 = 97, 61
    pl = match_heatmap(matcher, sat[y0:y0 + 40, x0:x0 + 60], sat, (60, 40), stride=4, rotations=[0.0],
                       try_mirror=False)
    assert abs(pl.window[0] - x0) <= 2 and abs(pl.window[1] - y0) <= 2
    # stride-1 refinement can only improve on the coarse heatmap maximum
    assert float(pl.heatmap.max()) - 1e-12 <= pl.score <= 1.0
    assert pl.confidence >= 1.0


def test_constant_satellite_is_low_confidence(matcher):
    flat = np.full((120, 150, 3), 0.5, np.float32)
    tpl = texture(40, 60, seed=9)
    pl = match_heatmap(matcher, tpl, flat, (60, 40), stride=6, rotations=[0.0], try_mirror=False)
    assert pl.confidence == pytest.approx(1.0, abs=0.05)
    assert pl.low_confidence


@pytest.mark.parametrize("verify", [False, True])
def test_quarter_turn_recovered(matcher, sat, verify):
    x0, y0 = 40, 90
    tpl = np.rot90(sat[y0:y0 + 40, x0:x0 + 60], -1)
    pl = match_heatmap(matcher, tpl, sat, (tpl.shape[1], tpl.shape[0]), stride=4, try_mirror=False,
                       verify_orientation=verify)
    assert pl.rotation_deg == 90.0
    assert abs(pl.window[0] - x0) <= 2 and abs(pl.window[1] - y0) <= 2


def test_mirror_recovered_when_searched(matcher, sat):
    x0, y0 = 120, 20
    tpl = sat[y0:y0 + 40, x0:x0 + 60][:, ::-1]
    pl = match_heatmap(matcher, tpl, sat, (60, 40), stride=4, rotations=[0.0], try_mirror=True,
                       verify_orientation=True)
    assert pl.mirror and pl.rotation_deg == 0.0


def test_placement_mappings_are_inverse(matcher, sat):
    tpl = np.rot90(sat[10:50, 10:70], -1)
    pl = match_heatmap(matcher, tpl, sat, (40, 60), stride=4)
    u = np.array([0.0, 13.5, 40.0])
    v = np.array([0.0, 7.25, 60.0])
    X, Y = pl.template_to_satellite(u, v)
    assert np.allclose(pl.satellite_to_template(X, Y), (u, v))
    back = Placement.from_dict(pl.to_dict())
    assert np.allclose(back.template_to_satellite(u, v), (X, Y))
