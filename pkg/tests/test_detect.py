import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from anomaly3d.errors import (EmptyCloud, EmptyDataset, InvalidIterations, ShapeMismatch,
                              TemplateMismatch, UntrainedModel)
from anomaly3d.geometry import PointCloud
from anomaly3d.io import read_ply
from anomaly3d.net.model import ModelConfig, init_params
from anomaly3d.net.train import TrainConfig, train
from anomaly3d.detect import (DetectConfig, Detector, FeatureTemplate, ScoreScale, build_template,
                              cosine_distance, export_scores, feature_dispersion, fuse,
                              input_patches, interpolate_to_points, iterative_reconstruct,
                              minmax, patch_features, regularize, score_features, score_points,
                              squash, top_mean)

from conftest import random_sphere

CFG = ModelConfig(d=16, enc_layers=1, dec_layers=1, heads=2, mlp_ratio=2, k=16, n_c=32, embed_hidden=16)
DCFG = DetectConfig(score_k=16)


def brute_score_points(a, b, k):
    def nn(pts, q):
        d2 = ((q[:, None] - pts[None]) ** 2).sum(-1)
        idx = np.broadcast_to(np.arange(len(pts)), d2.shape)
        return np.lexsort((idx, d2), axis=1)[:, :k]

    ia, ib = nn(a, a), nn(b, a)
    out = np.empty(len(a))
    for i in range(len(a)):
        x, y = a[ia[i]] - a[i], b[ib[i]] - a[i]
        d2 = ((x[:, None] - y[None]) ** 2).sum(-1)
        out[i] = d2.min(1).mean() + d2.min(0).mean()
    return out


@pytest.fixture(scope="module")
def trained():
    clouds = [random_sphere(1200, i) for i in range(3)]
    state = train(clouds, CFG, TrainConfig(steps=30, lr=3e-3), seed=0)
    return state.params, clouds


# ---------------------------------------------------------------- point field

def test_score_points_identity_is_zero():
    pts = random_sphere(500, 0)
    assert np.all(score_points(pts, pts, 32) == 0)


def test_score_points_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=(200, 3))
        b = a + rng.normal(scale=0.05, size=a.shape)
        ref = brute_score_points(a, b, 16)
        got = score_points(a, b, 16)
        assert np.all(np.abs(got - ref) <= 1e-9 * np.maximum(ref, 1e-300))


def test_score_points_peaks_inside_displaced_region():
    pts = random_sphere(3000, 1)
    region = pts @ np.array([0.0, 0.0, 1.0]) > 0.95
    recon = pts.copy()
    recon[region] *= 1.1
    a_p = score_points(pts, recon, 32)
    assert region[np.argmax(a_p)]
    far = pts @ np.array([0.0, 0.0, 1.0]) < 0.5
    assert np.all(a_p[far] == 0)


def test_score_points_empty():
    with pytest.raises(EmptyCloud):
        score_points(np.zeros((0, 3)), np.zeros((3, 3)))


# ---------------------------------------------------------------- reconstruction

def test_zero_iterations_reproduces_input():
    params = init_params(CFG, 0)
    pts = random_sphere(1000, 2)
    rec = iterative_reconstruct(pts, params, T=0, allow_untrained=True, cfg=DCFG)
    assert np.array_equal(np.unique(pts, axis=0), rec.recon_cloud.points)
    assert np.all(score_points(pts, rec.recon_cloud, 16) == 0)


def test_reconstruction_keeps_centers_and_is_deterministic():
    params = init_params(CFG, 0)
    pts = random_sphere(1000, 3)
    a = iterative_reconstruct(pts, params, 0.4, 3, seed=5, keep_iterates=True, allow_untrained=True, cfg=DCFG)
    b = iterative_reconstruct(pts, params, 0.4, 3, seed=5, allow_untrained=True, cfg=DCFG)
    assert np.array_equal(a.patches.centers, a.input_patches.centers)
    assert np.array_equal(a.patches.local_coords, b.patches.local_coords)
    assert len(a.iterates) == 3


def test_reconstruction_errors():
    params = init_params(CFG, 0)
    pts = random_sphere(500, 0)
    with pytest.raises(UntrainedModel):
        iterative_reconstruct(pts, params, cfg=DCFG)
    with pytest.raises(InvalidIterations):
        iterative_reconstruct(pts, params, T=-1, allow_untrained=True, cfg=DCFG)


# ---------------------------------------------------------------- feature field

def test_cosine_distance_examples():
    a = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 2.0], [0.0, 0.0]])
    b = np.array([[0.0, 3.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    assert np.allclose(cosine_distance(a, b), [1.0, 0.0, 0.0, 0.0])


def test_interpolation_equidistant_centers():
    centers = np.array([[1.0, 0, 0], [-0.5, np.sqrt(3) / 2, 0], [-0.5, -np.sqrt(3) / 2, 0]])
    v = interpolate_to_points(np.zeros((1, 3)), centers, np.array([0.0, 0.0, 0.9]))
    assert np.isclose(v[0], 0.3)
    at = interpolate_to_points(centers[:1], centers, np.array([0.2, 0.5, 0.9]))
    assert np.isclose(at[0], 0.2, atol=1e-6)


def test_feature_field_zero_on_identity():
    params = init_params(CFG, 0)
    pts = random_sphere(1000, 4)
    rec = iterative_reconstruct(pts, params, T=0, allow_untrained=True, cfg=DCFG)
    a_f = score_features(pts, rec, params, None, allow_untrained=True)
    assert np.allclose(a_f, 0, atol=1e-6)


def test_regularize_thresholds():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(10, 3))
    tmpl = FeatureTemplate(rng.normal(size=(10, 6)), centers, np.zeros(0), 1.0, 5.0)
    feats = rng.normal(size=(10, 6))
    out, rep, _ = regularize(feats, centers, tmpl, tau_reg=np.inf)
    assert np.array_equal(out, feats) and not rep.any()
    out, rep, d = regularize(feats, centers, tmpl, tau_reg=0.0)
    assert np.array_equal(out, tmpl.features) and rep.all()
    same, _, d0 = regularize(tmpl.features, centers, tmpl)
    assert np.all(d0 == 0)
    with pytest.raises(TemplateMismatch):
        regularize(feats[:, :4], centers, tmpl)
    with pytest.raises(TemplateMismatch):
        regularize(feats, centers + 100.0, tmpl)


def test_template_needs_clouds_and_positive_tau():
    params = init_params(CFG, 0)
    with pytest.raises(EmptyDataset):
        build_template([], params, DCFG, allow_untrained=True)
    with pytest.raises(ShapeMismatch):
        FeatureTemplate(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(0), 0.0, 1.0)


def test_single_cloud_template_fallback():
    params = init_params(CFG, 0)
    pts = random_sphere(1000, 5)
    t = build_template([pts], params, DCFG, allow_untrained=True)
    feats = patch_features(params, input_patches(pts, params, DCFG))
    assert len(t.distances) == 0 and t.scale is None
    assert np.isclose(t.tau_reg, 0.25 * np.median(np.linalg.norm(feats, axis=1)))


def test_template_bank_and_replacement_rate(trained):
    params, clouds = trained
    t = build_template(clouds, params, DCFG)
    assert len(t.distances) == 2 * CFG.n_c
    assert np.isclose(t.tau_reg, np.percentile(t.distances, 97.5))
    assert t.scale is not None and t.scale.hi_p > t.scale.lo_p
    held_out = random_sphere(1200, 99)
    rec = iterative_reconstruct(held_out, params, cfg=DCFG)
    _, replaced, _ = regularize(patch_features(params, rec.patches), rec.patches.centers, t)
    assert replaced.mean() <= 0.10


# ---------------------------------------------------------------- fusion

def test_fuse_examples():
    s = fuse(np.array([0.0, 2.0]), np.array([1.0, 0.0]))
    assert np.allclose(s.point_scores, [0.5, 0.5])
    s = fuse(np.ones(10), np.ones(10))
    assert np.all(s.point_scores == 0) and s.object_score == 0
    a_p = np.random.default_rng(0).uniform(size=50)
    s = fuse(a_p, np.zeros(50))
    assert np.allclose(s.point_scores, minmax(a_p) / 2) and np.argmax(s.point_scores) == np.argmax(a_p)
    with pytest.raises(ShapeMismatch):
        fuse(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(0, 10)), arrays(np.float64, 30, elements=st.floats(0, 10)),
       st.floats(0.1, 100), st.floats(-5, 5))
def test_fuse_in_unit_range_and_affine_invariant(a_p, a_f, scale, shift):
    s = fuse(a_p, a_f)
    assert np.all((s.point_scores >= 0) & (s.point_scores <= 1))
    t = fuse(a_p * scale + shift, a_f)
    assert np.allclose(s.point_scores, t.point_scores, atol=1e-9)


def test_calibrated_fuse():
    scale = ScoreScale.fit([np.array([0.0, 1.0])], [np.array([2.0, 4.0])])
    assert scale == ScoreScale(0.0, 1.0, 2.0, 4.0)
    s = fuse(np.array([0.0, 1.0, 3.0]), np.array([2.0, 4.0, 2.0]), scale=scale)
    assert np.allclose(s.point_scores, [0.0, 0.5, 0.375])
    assert squash(np.array([5.0]), 1.0, 1.0)[0] == 0.0
    with pytest.raises(EmptyDataset):
        ScoreScale.fit([], [])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-10, 1e6)))
def test_squash_bounded_monotone(x):
    y = squash(x, 0.0, 1.0)
    assert np.all((y >= 0) & (y < 1))
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(y[order]) >= 0)


def test_top_mean():
    x = np.arange(1000, dtype=float)
    assert top_mean(x, 0.01) == np.mean(np.arange(990, 1000))
    assert top_mean(np.array([3.0, 1.0]), 0.01) == 3.0


# ---------------------------------------------------------------- pipeline

def test_detector_scores_and_export(trained, tmp_path):
    params, clouds = trained
    t = build_template(clouds, params, DCFG)
    det = Detector(params, t, DCFG)
    cloud = PointCloud(random_sphere(1200, 50))
    s = det.score(cloud)
    assert s.point_scores.shape == (1200,)
    assert np.all((s.point_scores >= 0) & (s.point_scores <= 1))
    assert np.all(s.a_p >= 0) and np.all(s.a_f >= 0)
    assert s.meta["calibrated"] and s.meta["iterations"] == 3
    export_scores(tmp_path / "o.ply", tmp_path / "o.json", cloud, s)
    back, extra = read_ply(tmp_path / "o.ply")
    assert np.array_equal(back.points, cloud.points.astype(np.float32))
    assert np.array_equal(extra["score"], s.point_scores.astype(np.float32))
    assert np.isclose(json.loads((tmp_path / "o.json").read_text())["object_score"], s.object_score)
    assert Detector(params, t, DCFG).score(cloud).object_score == s.object_score


def test_detector_refuses_untrained():
    with pytest.raises(UntrainedModel):
        Detector(init_params(CFG, 0))


def test_feature_dispersion(trained):
    params, clouds = trained
    std = feature_dispersion(clouds[:2], params, DCFG)
    assert std.shape == (CFG.dec_layers * CFG.d,) and np.all(std >= 0)
    with pytest.raises(EmptyDataset):
        feature_dispersion([], params)
