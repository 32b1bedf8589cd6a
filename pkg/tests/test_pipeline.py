import numpy as np
import pytest

from semray.errors import ConfigError
from semray.pipeline import (ModelConfig, RayBatch, SemanticRayModel,
                             ray_rngs_for, rays_for_pixels, render_view,
                             sample_depths)
from semray.scene import holdout_split

CFG = ModelConfig(num_classes=3, channels=8, heads=2, base_channels=2,
                  n_coarse=4, n_fine=4, num_source_views=3, dtype="f64")


def _batch(scene, b=6, seed=0, m=3):
    rng = np.random.default_rng(seed)
    cam = scene.cameras[0]
    flat = rng.choice(cam.height * cam.width, size=b, replace=False)
    px = np.stack([flat % cam.width, flat // cam.width], -1).astype(float)
    origins, dirs = rays_for_pixels(cam, px)
    sources = list(range(1, 1 + m))
    return RayBatch(origins, dirs, scene.spec.t_near, scene.spec.t_far,
                    np.stack([scene.rgb[i] for i in sources]),
                    [scene.cameras[i] for i in sources])


class TestModelConfig:
    def test_rejects_bad_variant(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="both")

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(channels=10, heads=4)

    def test_hash_stable_and_sensitive(self):
        a, b = ModelConfig(), ModelConfig()
        assert a.hash() == b.hash()
        assert a.hash() != ModelConfig(channels=16).hash()


class TestForward:
    def test_output_shapes(self, tiny_dataset):
        scene = tiny_dataset.train[0]
        model = SemanticRayModel(CFG, seed=0)
        out = model.forward(_batch(scene), ray_rngs=None)
        assert out["coarse"].class_probs.shape == (6, 3)
        assert out["fine"].class_probs.shape == (6, 3)
        assert out["fine"].color.shape == (6, 3)
        assert out["z_fine"].shape == (6, 8)
        np.testing.assert_allclose(out["fine"].class_probs.data.sum(-1), 1.0,
                                   atol=1e-10)

    def test_deterministic_without_rngs(self, tiny_dataset):
        scene = tiny_dataset.train[0]
        model = SemanticRayModel(CFG, seed=0)
        a = model.forward(_batch(scene), ray_rngs=None)
        b = model.forward(_batch(scene), ray_rngs=None)
        np.testing.assert_array_equal(a["fine"].class_probs.data,
                                      b["fine"].class_probs.data)
        np.testing.assert_array_equal(a["fine"].color.data, b["fine"].color.data)

    def test_deterministic_with_seeded_rngs(self, tiny_dataset):
        scene = tiny_dataset.train[0]
        model = SemanticRayModel(CFG, seed=0)
        outs = []
        for _ in range(2):
            rngs = ray_rngs_for(9, np.arange(6))
            outs.append(model.forward(_batch(scene), ray_rngs=rngs))
        np.testing.assert_array_equal(outs[0]["z_coarse"], outs[1]["z_coarse"])
        np.testing.assert_array_equal(outs[0]["fine"].color.data,
                                      outs[1]["fine"].color.data)

    def test_source_view_permutation_invariance(self, tiny_dataset):
        """The rendered semantics/color must not depend on source order."""
        scene = tiny_dataset.train[0]
        model = SemanticRayModel(CFG, seed=1)
        batch = _batch(scene)
        perm = [2, 0, 1]
        permuted = RayBatch(batch.origins, batch.directions, batch.t_near,
                            batch.t_far, batch.source_images[perm],
                            [batch.source_cams[i] for i in perm])
        a = model.forward(batch, ray_rngs=None)
        b = model.forward(permuted, ray_rngs=None)
        np.testing.assert_allclose(a["fine"].semantic_logits.data,
                                   b["fine"].semantic_logits.data, atol=1e-9)
        np.testing.assert_allclose(a["fine"].color.data, b["fine"].color.data,
                                   atol=1e-9)

    def test_named_params_unique_and_complete(self):
        model = SemanticRayModel(CFG, seed=0)
        table = model.named_params()
        assert len(table) == len(model.params())
        assert "cra.position_embedding" in table

    @pytest.mark.parametrize("variant", ["none", "intra_only", "cross_only"])
    def test_variants_change_output(self, variant, tiny_dataset):
        scene = tiny_dataset.train[0]
        full = SemanticRayModel(CFG, seed=2)
        ablated = SemanticRayModel(
            ModelConfig(**{**CFG.to_dict(), "variant": variant}), seed=2)
        batch = _batch(scene)
        a = full.forward(batch, ray_rngs=None)
        b = ablated.forward(batch, ray_rngs=None)
        assert not np.allclose(a["fine"].semantic_logits.data,
                               b["fine"].semantic_logits.data)


class TestSampleDepths:
    def test_midpoints(self):
        z = sample_depths(1.0, 3.0, 2, 4)
        np.testing.assert_allclose(z, [[1.25, 1.75, 2.25, 2.75]] * 2)

    def test_stratified_within_bins(self):
        rngs = [np.random.default_rng(s) for s in range(5)]
        z = sample_depths(1.0, 3.0, 5, 8, rngs)
        edges = np.linspace(1.0, 3.0, 9)
        assert np.all(z >= edges[:-1]) and np.all(z < edges[1:])


class TestRenderView:
    def test_full_image_shapes_and_determinism(self, tiny_dataset):
        scene = tiny_dataset.test[0]
        model = SemanticRayModel(CFG, seed=3)
        train_ids, eval_ids = holdout_split(scene.n_views)
        sem1, probs1, rgb1 = render_view(model, scene, eval_ids[0], train_ids[:3])
        sem2, probs2, rgb2 = render_view(model, scene, eval_ids[0], train_ids[:3])
        h, w = scene.cameras[0].height, scene.cameras[0].width
        assert sem1.shape == (h, w) and probs1.shape == (h, w, 3)
        assert rgb1.min() >= 0.0 and rgb1.max() <= 1.0
        np.testing.assert_array_equal(sem1, sem2)
        np.testing.assert_array_equal(rgb1, rgb2)
