import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anomaly3d.errors import DegenerateMask, InvalidInput, InvalidRatio, KTooLarge, ShapeMismatch
from anomaly3d.net.model import ModelConfig, init_params
from anomaly3d.patching import (MaskSpec, embed_patches, make_patches, mask_count, patches_at,
                                random_mask, select_centers)

from conftest import random_sphere


def test_patch_shapes_and_self_center():
    pts = random_sphere(4000, 0)
    centers = select_centers(pts, 256, "fps")
    ps = make_patches(pts, centers, 64)
    assert ps.local_coords.shape == (256, 64, 3)
    assert np.all(ps.local_coords[:, 0] == 0)
    assert np.array_equal(ps.neighbor_idx[:, 0], centers)
    assert np.allclose(ps.points().reshape(256, 64, 3), pts[ps.neighbor_idx])


def test_center_forced_first_with_duplicates():
    pts = np.zeros((10, 3))
    pts[5:] = 1.0
    ps = make_patches(pts, np.array([3]), 4)
    assert ps.neighbor_idx[0, 0] == 3


def test_patch_errors():
    pts = random_sphere(100, 0)
    with pytest.raises(KTooLarge):
        make_patches(pts, np.array([0]), 128)
    with pytest.raises(InvalidInput):
        make_patches(pts, np.array([100]), 4)
    ps = make_patches(pts, np.array([0, 1]), 4)
    with pytest.raises(ShapeMismatch):
        ps.with_local(np.zeros((2, 5, 3)))


def test_patches_at_arbitrary_coordinates():
    pts = random_sphere(500, 1)
    ps = patches_at(pts, pts[:3] + 1e-3, 8)
    assert ps.local_coords.shape == (3, 8, 3)


def test_mask_counts():
    assert random_mask(256, 0.4, 0).masked.sum() == 102
    assert random_mask(256, 0.0, 0).masked.sum() == 0
    m = random_mask(256, 0.99, 0)
    assert m.masked.sum() == 253 and len(m.visible_idx) == 3


def test_mask_errors_and_determinism():
    with pytest.raises(InvalidRatio):
        random_mask(10, 1.0, 0)
    with pytest.raises(InvalidRatio):
        random_mask(10, -0.1, 0)
    with pytest.raises(DegenerateMask):
        random_mask(4, 0.1, 0)
    with pytest.raises(DegenerateMask):
        MaskSpec(np.ones(3, bool), 0.9)
    assert np.array_equal(random_mask(64, 0.4, 9).masked, random_mask(64, 0.4, 9).masked)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 512), st.floats(0.0, 0.999))
def test_mask_count_is_floor(n_c, m):
    count = mask_count(n_c, m)
    if count >= n_c or (m > 0 and count == 0):
        with pytest.raises(DegenerateMask):
            random_mask(n_c, m, 0)
        return
    spec = random_mask(n_c, m, 1)
    assert spec.masked.sum() == count == int(np.floor(m * n_c + 1e-9))
    assert len(spec.masked_idx) + len(spec.visible_idx) == n_c


def _small_setup(n_c=32, k=16, d=16):
    cfg = ModelConfig(d=d, enc_layers=1, dec_layers=1, heads=2, k=k, n_c=n_c, embed_hidden=32)
    params = init_params(cfg, 0)
    pts = random_sphere(1000, 3)
    ps = make_patches(pts, select_centers(pts, n_c, "fps"), k)
    return cfg, params, ps


def test_embedding_shapes():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    pts = random_sphere(4000, 2)
    ps = make_patches(pts, select_centers(pts, 256, "fps"), 64)
    tok, pos = embed_patches(ps, random_mask(256, 0.4, 0), params)
    assert tok.tokens.shape == (154, 64) and pos.tokens.shape == (256, 64)


def test_embedding_permutation_and_translation():
    cfg, params, ps = _small_setup()
    mask = MaskSpec.none(32)
    tok, pos = embed_patches(ps, mask, params)
    perm = ps.with_local(ps.local_coords[:, np.random.default_rng(0).permutation(16)])
    tok2, _ = embed_patches(perm, mask, params)
    assert np.allclose(tok.tokens, tok2.tokens, atol=1e-6)
    moved = type(ps)(ps.centers + 5.0, ps.neighbor_idx, ps.local_coords, ps.center_idx)
    tok3, pos3 = embed_patches(moved, mask, params)
    assert np.array_equal(tok.tokens, tok3.tokens)
    assert not np.allclose(pos.tokens, pos3.tokens)


def test_embedding_rejects_wrong_k():
    cfg, params, ps = _small_setup()
    other = make_patches(random_sphere(500, 0), np.arange(32), 8)
    with pytest.raises(ShapeMismatch):
        embed_patches(other, MaskSpec.none(32), params)


@pytest.mark.parametrize("sampler", ["gps", "fps", "rs", "voxel"])
def test_samplers_return_distinct_centers(sampler):
    pts = random_sphere(3000, 4)
    c = select_centers(pts, 128, sampler, seed=1)
    assert len(c) == 128 and len(set(c.tolist())) == 128


def test_unknown_sampler():
    with pytest.raises(InvalidInput):
        select_centers(random_sphere(100, 0), 8, "grid")
