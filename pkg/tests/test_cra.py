import numpy as np
import pytest
from hypothesis import given, strategies as st

from semray import autodiff as ad
from semray import cra
from semray.autodiff import Param, Tensor
from semray.errors import ConfigError, ContractError
from semray.features import (ContextualSpace, STAGE_FULL, STAGE_INITIAL,
                             STAGE_INTRA)
from semray.optim import grad_check
from conftest import naive_attention

rng = np.random.default_rng(11)


def _weights(dim, seed=0, name="w"):
    return cra.ProjectionWeights(name, dim, np.random.default_rng(seed))


def _space(b=2, m=3, n=4, c=8, seed=0, stage=STAGE_INITIAL, full_mask=True):
    r = np.random.default_rng(seed)
    mask = np.ones((b, m, n), dtype=bool)
    if not full_mask:
        mask[0, 1, :2] = False
        mask[1, 2] = False
    feats = r.normal(size=(b, m, n, c)) * mask[..., None]
    return ContextualSpace(Tensor(feats, requires_grad=True), mask, stage)


class TestMultiHeadAttention:
    def test_single_token_is_projection_composition(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8)
        x = rng.normal(size=(3, 1, 8))
        out = cra.multi_head_attention(Tensor(x), w, cfg)
        expected = x @ w.wv.data @ w.wo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_identical_tokens_collapse_to_single_token_result(self):
        cfg = cra.AttentionConfig(heads=4, channels=8)
        w = _weights(8, seed=2)
        tok = rng.normal(size=(1, 1, 8))
        rep = np.repeat(tok, 6, axis=1)
        out = cra.multi_head_attention(Tensor(rep), w, cfg)
        single = cra.multi_head_attention(Tensor(tok), w, cfg)
        np.testing.assert_allclose(out.data, np.repeat(single.data, 6, axis=1), atol=1e-10)

    def test_matches_naive_reference(self):
        for trial in range(5):
            r = np.random.default_rng(trial)
            heads = r.choice([1, 2, 4])
            c = int(heads * r.integers(2, 5))
            s, t = int(r.integers(1, 4)), int(r.integers(1, 7))
            cfg = cra.AttentionConfig(heads=int(heads), channels=c)
            w = _weights(c, seed=trial + 10)
            tokens = r.normal(size=(s, t, c))
            mask = r.uniform(size=(s, t)) > 0.3
            mask[:, 0] = True
            out = cra.multi_head_attention(Tensor(tokens), w, cfg, key_mask=mask)
            ref = naive_attention(tokens, w.wq.data, w.wk.data, w.wv.data,
                                  w.wo.data, cfg.heads, key_mask=mask)
            np.testing.assert_allclose(out.data, ref, atol=1e-10)

    def test_masked_keys_get_negligible_weight(self):
        cfg = cra.AttentionConfig(heads=2, channels=4)
        w = _weights(4, seed=5)
        tokens = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
        mask = np.array([[True, True, False, True, False]])
        q = ad.matmul(tokens, w.wq)
        k = ad.matmul(tokens, w.wk)
        qh = ad.transpose(ad.reshape(q, (1, 5, 2, 2)), (0, 2, 1, 3))
        kh = ad.transpose(ad.reshape(k, (1, 5, 2, 2)), (0, 2, 1, 3))
        logits = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))).data / np.sqrt(2)
        logits = logits + np.where(mask, 0.0, cra.MASK_LOGIT_BIAS)[:, None, None, :]
        attn = ad.softmax(Tensor(logits), axis=-1).data
        assert attn[..., ~mask[0]].max() < 1e-30
        np.testing.assert_allclose(attn[..., mask[0]].sum(-1), 1.0, atol=1e-10)

    def test_bad_head_config_rejected(self):
        with pytest.raises(ConfigError):
            cra.AttentionConfig(heads=3, channels=8)


class TestIntraViewRadial:
    def test_row_independence(self):
        cfg = cra.AttentionConfig(heads=2, channels=8, use_radial_position_embedding=False)
        w = _weights(8, seed=1)
        space = _space(seed=4)
        out = cra.intra_view_radial(space, w, cfg)
        zeroed = ContextualSpace(Tensor(space.features.data.copy()), space.mask.copy())
        zeroed.features.data[:, 1] = 0.0
        out2 = cra.intra_view_radial(zeroed, w, cfg)
        np.testing.assert_array_equal(out.features.data[:, 0], out2.features.data[:, 0])
        np.testing.assert_array_equal(out.features.data[:, 2], out2.features.data[:, 2])
        assert not np.allclose(out.features.data[:, 1], out2.features.data[:, 1])

    def test_sample_permutation_equivariance_without_pe(self):
        cfg = cra.AttentionConfig(heads=2, channels=8, use_radial_position_embedding=False)
        w = _weights(8, seed=2)
        space = _space(seed=5)
        out = cra.intra_view_radial(space, w, cfg)
        perm = np.array([2, 0, 3, 1])
        permuted = ContextualSpace(Tensor(space.features.data[:, :, perm]),
                                   space.mask[:, :, perm])
        out_p = cra.intra_view_radial(permuted, w, cfg)
        np.testing.assert_allclose(out_p.features.data,
                                   out.features.data[:, :, perm], atol=1e-12)

    def test_position_embedding_breaks_permutation(self):
        cfg = cra.AttentionConfig(heads=2, channels=8, use_radial_position_embedding=True)
        w = _weights(8, seed=2)
        pe = Param("pe", np.random.default_rng(0).normal(size=(4, 8)))
        space = _space(seed=5)
        out = cra.intra_view_radial(space, w, cfg, pe)
        perm = np.array([2, 0, 3, 1])
        permuted = ContextualSpace(Tensor(space.features.data[:, :, perm]),
                                   space.mask[:, :, perm])
        out_p = cra.intra_view_radial(permuted, w, cfg, pe)
        assert not np.allclose(out_p.features.data, out.features.data[:, :, perm])

    def test_stage_contract(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8)
        with pytest.raises(ContractError):
            cra.intra_view_radial(_space(stage=STAGE_INTRA), w, cfg)

    def test_gradcheck(self):
        cfg = cra.AttentionConfig(heads=2, channels=8, use_radial_position_embedding=True)
        w = _weights(8, seed=3)
        pe = Param("pe", np.random.default_rng(1).normal(0, 0.2, size=(4, 8)))
        space = _space(seed=6)
        probe = rng.normal(size=space.features.shape)

        def f():
            return ad.sum_(cra.intra_view_radial(space, w, cfg, pe).features * probe)

        rep = grad_check(f, w.params() + [pe, space.features], tol=1e-6,
                         max_entries_per_param=6, rng=np.random.default_rng(2))
        assert rep.passed


class TestCrossViewSparse:
    def test_column_independence(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8, seed=1)
        space = _space(seed=7, stage=STAGE_INTRA)
        out = cra.cross_view_sparse(space, w, cfg)
        zeroed = ContextualSpace(Tensor(space.features.data.copy()),
                                 space.mask.copy(), STAGE_INTRA)
        zeroed.features.data[:, :, 2] = 0.0
        out2 = cra.cross_view_sparse(zeroed, w, cfg)
        keep = [0, 1, 3]
        np.testing.assert_array_equal(out.features.data[:, :, keep],
                                      out2.features.data[:, :, keep])

    def test_view_permutation_equivariance(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8, seed=9)
        space = _space(seed=8, stage=STAGE_INTRA, full_mask=False)
        out = cra.cross_view_sparse(space, w, cfg)
        perm = np.array([1, 2, 0])
        permuted = ContextualSpace(Tensor(space.features.data[:, perm]),
                                   space.mask[:, perm], STAGE_INTRA)
        out_p = cra.cross_view_sparse(permuted, w, cfg)
        np.testing.assert_allclose(out_p.features.data, out.features.data[:, perm],
                                   atol=1e-12)

    def test_single_view_reduces_to_projection(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8, seed=4)
        space = _space(m=1, seed=9, stage=STAGE_INTRA)
        out = cra.cross_view_sparse(space, w, cfg)
        expected = space.features.data @ w.wv.data @ w.wo.data
        np.testing.assert_allclose(out.features.data, expected, atol=1e-12)

    def test_masked_queries_zeroed(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8, seed=4)
        space = _space(seed=10, stage=STAGE_INTRA, full_mask=False)
        out = cra.cross_view_sparse(space, w, cfg)
        np.testing.assert_array_equal(out.features.data[~space.mask], 0.0)
        assert out.stage == STAGE_FULL

    def test_stage_contract(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        with pytest.raises(ContractError):
            cra.cross_view_sparse(_space(stage=STAGE_INITIAL), _weights(8), cfg)


class TestDenseReference:
    def test_m1_equals_intra(self):
        cfg = cra.AttentionConfig(heads=2, channels=8, use_radial_position_embedding=False)
        w = _weights(8, seed=6)
        space = _space(m=1, seed=11)
        dense = cra.dense_attention_reference(space, w, cfg)
        intra = cra.intra_view_radial(space, w, cfg)
        np.testing.assert_allclose(dense.features.data, intra.features.data, atol=1e-12)

    def test_n1_equals_cross(self):
        cfg = cra.AttentionConfig(heads=2, channels=8)
        w = _weights(8, seed=7)
        space = _space(n=1, seed=12)
        dense = cra.dense_attention_reference(space, w, cfg)
        cross = cra.cross_view_sparse(space.promoted(STAGE_INTRA), w, cfg)
        np.testing.assert_allclose(dense.features.data, cross.features.data, atol=1e-12)

    def test_differs_from_two_stage_composition(self):
        cfg = cra.AttentionConfig(heads=2, channels=8, use_radial_position_embedding=False)
        w1, w2 = _weights(8, seed=8, name="a"), _weights(8, seed=9, name="b")
        space = _space(seed=13)
        dense = cra.dense_attention_reference(space, w1, cfg)
        two_stage = cra.cross_view_sparse(
            cra.intra_view_radial(space, w1, cfg), w2, cfg)
        assert not np.allclose(dense.features.data, two_stage.features.data, atol=1e-3)


class TestCostModel:
    def test_full_is_exact_stage_sum(self):
        e = cra.full_cost_report(1024, 64, 8, 32).entries
        assert e["full"].flops == e["intra_only"].flops + e["cross_only"].flops
        assert (e["full"].activation_elements
                == e["intra_only"].activation_elements + e["cross_only"].activation_elements)

    @given(st.integers(1, 64), st.integers(2, 64), st.integers(1, 12),
           st.integers(1, 4))
    def test_identity_for_all_inputs(self, rays, samples, views, head_pow):
        heads = 2 ** (head_pow - 1)
        channels = heads * 8
        full = cra.cost_model(rays, samples, views, channels, heads, "full")
        intra = cra.cost_model(rays, samples, views, channels, heads, "intra_only")
        cross = cra.cost_model(rays, samples, views, channels, heads, "cross_only")
        assert full.flops == intra.flops + cross.flops
        assert full.activation_elements == (intra.activation_elements
                                            + cross.activation_elements)

    def test_reference_input_ratios(self):
        report = cra.full_cost_report(1024, 64, 8, 32, heads=4)
        assert report.ratio("dense", "full") == pytest.approx(10.25 / 5.40, rel=0.15)
        assert report.ratio("dense", "full", "activation_elements") == pytest.approx(
            17647 / 4143, rel=0.25)

    def test_dense_to_full_ratio_grows_with_tokens(self):
        ratios = [cra.full_cost_report(64, n, m, 32).ratio("dense", "full")
                  for n, m in [(8, 2), (16, 4), (32, 8), (64, 16), (128, 32)]]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_rejects_bad_dims(self):
        with pytest.raises(ConfigError):
            cra.cost_model(0, 1, 1, 8, 2, "full")
        with pytest.raises(ConfigError):
            cra.cost_model(1, 1, 1, 9, 2, "full")
        with pytest.raises(ConfigError):
            cra.cost_model(1, 1, 1, 8, 2, "bogus")
