"""Finite-difference verification suites for every parameterized module.

Each suite builds a deterministic scalar closure over a module's parameters
and compares tape gradients against central differences (float64, h=1e-5).
Large parameter tensors are probed at a random entry subset per seed, so
coverage accumulates across seeds while the suite stays fast.  The same
suites back ``semray gradcheck`` and the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import cra, field
from .autodiff import Param, Tensor
from .features import (ContextualSpace, FeatureExtractor, FeatureExtractorConfig,
                       STAGE_FULL, STAGE_INITIAL)
from .optim import grad_check
from .pipeline import ModelConfig, RayBatch, SemanticRayModel, ray_rngs_for, rays_for_pixels
from .scene import generate_scene, raycast_ground_truth, scene_cameras
from .train import photometric_loss, semantic_loss

MICRO_CONFIG = ModelConfig(
    num_classes=3, channels=8, heads=2, base_channels=2, num_res_blocks=1,
    use_position_embedding=True, tau=0.7, variant="full",
    n_coarse=4, n_fine=4, num_source_views=2, dtype="f64")


def _random_space(rng, b=2, m=2, n=3, c=8, stage=STAGE_FULL, masked=False):
    feats = Param("space", rng.normal(size=(b, m, n, c)))
    mask = np.ones((b, m, n), dtype=bool)
    if masked:
        mask[0, 0, :2] = False
    if masked:
        feats.data = feats.data * mask[..., None]
    return ContextualSpace(feats, mask, stage)


def check_primitives(seed, h, tol):
    rng = np.random.default_rng(seed)
    a = Param("a", rng.normal(size=(5, 7)))
    b = Param("b", rng.normal(size=(7, 3)))

    def f():
        y = ad.softmax(ad.matmul(a, b), axis=-1)
        y = y * ad.sigmoid(ad.elu(ad.matmul(a, b)))
        y = ad.variance(y, axis=0) + ad.cumsum(ad.mean(y, axis=0), 0)
        return ad.sum_(ad.exp(y * 0.3) + ad.log(ad.clamp_min(y + 2.0, 1e-12)))

    return grad_check(f, [a, b], h=h, tol=tol)


def check_conv_bilinear(seed, h, tol):
    rng = np.random.default_rng(seed)
    x = Param("x", rng.normal(size=(1, 8, 8, 2)))
    w = Param("w", rng.normal(size=(3, 3, 2, 3)) * 0.3)
    bias = Param("bias", rng.normal(size=(3,)) * 0.1)
    coords = Param("coords", rng.uniform(0.6, 2.2, size=(6, 2)))

    def f():
        y = ad.conv2d(x, w, bias, stride=2, padding=1)
        y = ad.upsample2x(y)
        s = ad.bilinear_sample(y[0], coords)
        return ad.sum_(s * s) + 0.1 * ad.sum_(ad.relu(y))

    return grad_check(f, [x, w, bias, coords], h=h, tol=tol)


def check_feature_extractor(seed, h, tol, entries=2):
    rng = np.random.default_rng(seed)
    net = FeatureExtractor(FeatureExtractorConfig(2, 8), rng)
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, 8, 8, 3)))
    probe = rng.normal(size=(1, 4, 4, 8))

    def f():
        return ad.sum_(net(image) * probe)

    return grad_check(f, net.params(), h=h, tol=tol, max_entries_per_param=entries,
                      rng=np.random.default_rng(seed + 1))


def check_cra(seed, h, tol, entries=4):
    rng = np.random.default_rng(seed)
    cfg = cra.AttentionConfig(heads=2, channels=8)
    intra_w = cra.ProjectionWeights("intra", 8, rng)
    cross_w = cra.ProjectionWeights("cross", 8, rng)
    pe = Param("pe", rng.normal(0.0, 0.1, size=(3, 8)))
    space = _random_space(rng, stage=STAGE_INITIAL, masked=True)
    probe = rng.normal(size=space.features.shape)

    def f():
        refined = cra.cross_view_sparse(
            cra.intra_view_radial(space, intra_w, cfg, pe), cross_w, cfg)
        return ad.sum_(refined.features * probe)

    params = intra_w.params() + cross_w.params() + [pe, space.features]
    return grad_check(f, params, h=h, tol=tol, max_entries_per_param=entries,
                      rng=np.random.default_rng(seed + 1))


def check_field_heads(seed, h, tol, entries=4):
    rng = np.random.default_rng(seed)
    space = _random_space(rng, masked=True)
    b, m, n, c = space.features.shape
    deltas = rng.normal(size=(b, m, n, 4)) * 0.2
    src_rgb = rng.uniform(size=(b, m, n, 3))
    z = np.sort(rng.uniform(0.5, 4.0, size=(b, n)), axis=-1)
    weight_net = field.SemanticWeightNet(c, rng)
    geometry = field.GeometryNet(c, rng)
    color = field.ColorBlendHead(c, rng)
    sem_head_w = Param("sem_head", rng.normal(size=(c, 3)) / np.sqrt(c))

    def f():
        w = weight_net(space, deltas)
        s = field.construct_semantic_ray(space, w)
        sigma = geometry(space)
        rendered = field.render_semantic(s, lambda x: ad.matmul(x, sem_head_w),
                                         sigma, z, 4.5)
        rgb = field.render_color(color(space, deltas, src_rgb), sigma, z, 4.5)
        return (ad.sum_(rendered.semantic_logits * rendered.class_probs)
                + ad.sum_(rgb * rgb) + ad.sum_(rendered.expected_depth))

    params = (weight_net.params() + geometry.params() + color.params()
              + [sem_head_w, space.features])
    return grad_check(f, params, h=h, tol=tol, max_entries_per_param=entries,
                      rng=np.random.default_rng(seed + 1))


def micro_pipeline_closure(seed, batch_rays=4):
    """Loss closure of the full micro model on a tiny in-memory scene.

    Hierarchical resampling is disabled: fine-depth placement is a
    non-differentiated sampling choice, so the check runs both passes on
    depths that do not move with the parameters.
    """
    scene = generate_scene("room", MICRO_CONFIG.num_classes, seed)
    cams = scene_cameras(scene, 3, 16, 16, seed)
    rng = np.random.default_rng(seed + 7)
    rgb_q, sem_q, _ = raycast_ground_truth(scene, cams[0], 16, 16)
    sources = []
    for cam in cams[1:1 + MICRO_CONFIG.num_source_views]:
        rgb, _, _ = raycast_ground_truth(scene, cam, 16, 16)
        sources.append(rgb)
    flat = rng.choice(16 * 16, size=batch_rays, replace=False)
    pixels = np.stack([flat % 16, flat // 16], axis=-1).astype(np.float64)
    origins, dirs = rays_for_pixels(cams[0], pixels)
    batch = RayBatch(origins, dirs, scene.t_near, scene.t_far,
                     np.stack(sources), cams[1:1 + MICRO_CONFIG.num_source_views])
    gt_sem = sem_q.reshape(-1)[flat]
    gt_rgb = rgb_q.reshape(-1, 3)[flat]
    model = SemanticRayModel(MICRO_CONFIG, seed)

    def f():
        rngs = ray_rngs_for(seed, np.arange(batch_rays))
        out = model.forward(batch, ray_rngs=rngs, hierarchical=False)
        l_sem = semantic_loss(out["coarse"].class_probs, out["fine"].class_probs,
                              gt_sem, MICRO_CONFIG.num_classes)
        l_photo = (photometric_loss(out["coarse"].color, gt_rgb)
                   + photometric_loss(out["fine"].color, gt_rgb))
        return l_sem + l_photo

    return f, model


def check_micro_pipeline(seed, h, tol, entries=1):
    f, model = micro_pipeline_closure(seed)
    return grad_check(f, model.params(), h=h, tol=tol,
                      max_entries_per_param=entries,
                      rng=np.random.default_rng(seed + 1))


SUITES = (
    ("primitives", check_primitives),
    ("conv_bilinear", check_conv_bilinear),
    ("feature_extractor", check_feature_extractor),
    ("cra", check_cra),
    ("field_heads", check_field_heads),
    ("micro_pipeline", check_micro_pipeline),
)


def gradient_suite(seeds=3, tol=1e-4, h=1e-5, seed_base=100):
    """Run every suite across ``seeds`` seeds; yields (name, report)."""
    out = []
    for s in range(seeds):
        for name, fn in SUITES:
            out.append((f"{name}[seed{s}]", fn(seed_base + s, h, tol)))
    return out
