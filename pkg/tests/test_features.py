import numpy as np
import pytest

from semray import autodiff as ad
from semray.autodiff import Param, Tensor
from semray.errors import ConfigError, ShapeError
from semray.features import (ContextualSpace, FeatureExtractor,
                             FeatureExtractorConfig, STAGE_FULL, STAGE_INITIAL,
                             build_contextual_space, feature_coords,
                             make_view_dir_mlp)
from semray.optim import grad_check

rng = np.random.default_rng(3)
CFG = FeatureExtractorConfig(base_channels=2, out_channels=8)


def _extractor(seed=0):
    return FeatureExtractor(CFG, np.random.default_rng(seed))


class TestFeatureExtractor:
    def test_output_half_resolution(self):
        net = _extractor()
        out = net(Tensor(rng.uniform(size=(2, 16, 24, 3))))
        assert out.shape == (2, 8, 12, 8)

    def test_shared_weights_identical_views(self):
        net = _extractor()
        img = rng.uniform(size=(1, 16, 16, 3))
        both = net(Tensor(np.concatenate([img, img], axis=0)))
        np.testing.assert_array_equal(both.data[0], both.data[1])

    def test_zero_image_zeroed_final_conv(self):
        net = _extractor()
        net.final.w.data[...] = 0.0
        net.final.b.data[...] = 0.0
        out = net(Tensor(np.zeros((1, 16, 16, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_too_small_image_rejected(self):
        net = _extractor()
        with pytest.raises(ConfigError):
            net(Tensor(np.zeros((1, 4, 4, 3))))
        with pytest.raises(ConfigError):
            net(Tensor(np.zeros((1, 20, 16, 3))))   # not a multiple of 8

    def test_gradcheck_probe(self):
        net = _extractor(3)
        img = Tensor(rng.uniform(size=(1, 8, 8, 3)))
        probe = rng.normal(size=(1, 4, 4, 8))
        rep = grad_check(lambda: ad.sum_(net(img) * probe), net.params(),
                         max_entries_per_param=3, rng=np.random.default_rng(0),
                         tol=1e-4)
        assert rep.passed


class TestViewDirEmbedding:
    def test_dims(self):
        mlp = make_view_dir_mlp(8, np.random.default_rng(0))
        out = mlp(Tensor(rng.normal(size=(5, 4))))
        assert out.shape == (5, 8)

    def test_gradcheck(self):
        mlp = make_view_dir_mlp(8, np.random.default_rng(1))
        x = Tensor(rng.normal(size=(5, 4)))
        probe = rng.normal(size=(5, 8))
        assert grad_check(lambda: ad.sum_(mlp(x) * probe), mlp.params(), tol=1e-6).passed


class TestFeatureCoords:
    def test_half_resolution_mapping(self):
        # image pixels 0 and 1 straddle feature cell 0 centered between them
        np.testing.assert_allclose(feature_coords(np.array([0.5]), 2.0), [0.0])
        np.testing.assert_allclose(feature_coords(np.array([2.5]), 2.0), [1.0])


def _setup_space(m=3, b=2, n=4, c=8, seed=0, mask_out=()):
    r = np.random.default_rng(seed)
    fmaps = Tensor(r.normal(size=(m, 6, 6, c)))
    coords = r.uniform(1.0, 10.0, size=(m, b, n, 2))
    mask = np.ones((m, b, n), dtype=bool)
    for idx in mask_out:
        mask[idx] = False
    deltas = r.normal(size=(m, b, n, 4)) * 0.1
    mlp = make_view_dir_mlp(c, np.random.default_rng(7))
    return fmaps, coords, mask, deltas, mlp


class TestBuildContextualSpace:
    def test_single_entry_at_integer_pixel(self):
        fmaps, coords, mask, deltas, mlp = _setup_space(m=1, b=1, n=1)
        coords[0, 0, 0] = [4.0, 2.0]    # image coords -> feature (1.75, 0.75)
        space = build_contextual_space(fmaps, coords, mask, deltas, mlp, (12, 12))
        fc = feature_coords(np.array([4.0, 2.0]), 2.0)
        sampled = ad.bilinear_sample(Tensor(fmaps.data[0]), Tensor(fc[None, :])).data[0]
        emb = mlp(Tensor(deltas[0, 0, 0][None, :])).data[0]
        np.testing.assert_allclose(space.features.data[0, 0, 0], sampled + emb, rtol=1e-12)

    def test_masked_entries_exactly_zero(self):
        fmaps, coords, mask, deltas, mlp = _setup_space(mask_out=((1,),))
        space = build_contextual_space(fmaps, coords, mask, deltas, mlp, (12, 12))
        assert space.stage == STAGE_INITIAL
        np.testing.assert_array_equal(space.features.data[:, 1], 0.0)
        assert not space.mask[:, 1].any()

    def test_view_permutation_equivariance(self):
        fmaps, coords, mask, deltas, mlp = _setup_space(m=4)
        mask[2, 0, 1] = False
        space = build_contextual_space(fmaps, coords, mask, deltas, mlp, (12, 12))
        perm = [2, 0, 3, 1]
        space_p = build_contextual_space(
            Tensor(fmaps.data[perm]), coords[perm], mask[perm], deltas[perm], mlp, (12, 12))
        np.testing.assert_array_equal(space_p.features.data,
                                      space.features.data[:, perm])

    def test_entrywise_recomputation(self):
        fmaps, coords, mask, deltas, mlp = _setup_space(m=2, b=2, n=3)
        space = build_contextual_space(fmaps, coords, mask, deltas, mlp, (12, 12))
        for j in range(2):
            for r_i in range(2):
                for k in range(3):
                    fc = feature_coords(coords[j, r_i, k], 2.0)
                    samp = ad.bilinear_sample(Tensor(fmaps.data[j]),
                                              Tensor(fc[None, :])).data[0]
                    emb = mlp(Tensor(deltas[j, r_i, k][None, :])).data[0]
                    np.testing.assert_allclose(space.features.data[r_i, j, k],
                                               samp + emb, rtol=1e-10, atol=1e-12)

    def test_inconsistent_view_count_rejected(self):
        fmaps, coords, mask, deltas, mlp = _setup_space(m=3)
        with pytest.raises(ShapeError):
            build_contextual_space(fmaps, coords[:2], mask, deltas, mlp, (12, 12))

    def test_bilinear_lipschitz_continuity(self):
        fmaps, coords, mask, deltas, mlp = _setup_space(m=1, b=1, n=1)
        base = np.array([3.3, 2.7])
        f0 = ad.bilinear_sample(Tensor(fmaps.data[0]), Tensor(base[None, :])).data
        local = fmaps.data[0, 0:3, 0:3]
        slope_bound = 4.0 * np.abs(np.diff(fmaps.data[0], axis=0)).max() \
            + 4.0 * np.abs(np.diff(fmaps.data[0], axis=1)).max()
        for eps in (1e-3, 1e-4):
            f1 = ad.bilinear_sample(Tensor(fmaps.data[0]),
                                    Tensor((base + eps)[None, :])).data
            assert np.abs(f1 - f0).max() <= slope_bound * eps + 1e-12

    def test_stage_promotion_rules(self):
        fmaps, coords, mask, deltas, mlp = _setup_space()
        space = build_contextual_space(fmaps, coords, mask, deltas, mlp, (12, 12))
        promoted = space.promoted(STAGE_FULL)
        assert promoted.stage == STAGE_FULL
        with pytest.raises(ShapeError):
            promoted.promoted(STAGE_INITIAL)
