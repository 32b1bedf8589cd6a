"""End-to-end model: images + query rays in, rendered semantics/color out.

Orchestrates feature extraction, reprojection, cross-reprojection attention,
view reweighting, density estimation and two-pass (coarse then fine)
quadrature.  The feature extractor, direction MLP, attention weights and
the view-weight net are shared between the passes; each pass owns its
geometry net, semantic head and color head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import cra, field, geometry
from .autodiff import Param, Tensor
from .errors import ConfigError
from .features import (FeatureExtractor, FeatureExtractorConfig, STAGE_FULL,
                       STAGE_INTRA, build_contextual_space, make_view_dir_mlp)
from .layers import Linear

CRA_VARIANTS = ("full", "intra_only", "cross_only", "none")


@dataclass
class ModelConfig:
    num_classes: int = 4
    channels: int = 32
    heads: int = 4
    base_channels: int = 8
    num_res_blocks: int = 1
    use_position_embedding: bool = True
    tau: float = 0.7
    variant: str = "full"
    n_coarse: int = 32
    n_fine: int = 32
    num_source_views: int = 4
    dtype: str = "f64"

    def __post_init__(self):
        if self.variant not in CRA_VARIANTS:
            raise ConfigError(f"variant must be one of {CRA_VARIANTS}, got {self.variant!r}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 semantic classes")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RayBatch:
    """Constant-side inputs of one forward pass (nothing here carries grad)."""

    origins: np.ndarray          # (B, 3)
    directions: np.ndarray       # (B, 3)
    t_near: float
    t_far: float
    source_images: np.ndarray    # (m, H, W, 3)
    source_cams: list


class SemanticRayModel:
    """All trainable state plus the two-pass forward renderer."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        dt = cfg.np_dtype
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
        fx_cfg = FeatureExtractorConfig(cfg.base_channels, cfg.channels, cfg.num_res_blocks)
        self.extractor = FeatureExtractor(fx_cfg, rng, dt)
        self.dir_mlp = make_view_dir_mlp(cfg.channels, rng, dt)
        self.attn_cfg = cra.AttentionConfig(cfg.heads, cfg.channels,
                                            cfg.use_position_embedding)
        self.intra_weights = cra.ProjectionWeights("cra.intra", cfg.channels, rng, dt)
        self.cross_weights = cra.ProjectionWeights("cra.cross", cfg.channels, rng, dt)
        self.position_embedding = Param(
            "cra.position_embedding",
            rng.normal(0.0, 0.02, size=(cfg.n_coarse + cfg.n_fine, cfg.channels)), dt)
        self.weight_net = field.SemanticWeightNet(cfg.channels, rng, dt, cfg.tau)
        self.heads = {}
        for pass_name in ("coarse", "fine"):
            self.heads[pass_name] = {
                "geometry": field.GeometryNet(cfg.channels, rng, dt, name=f"{pass_name}.geometry"),
                "semantic": Linear(f"{pass_name}.semantic", cfg.channels, cfg.num_classes, rng, dt),
                "color": field.ColorBlendHead(cfg.channels, rng, dt, name=f"{pass_name}.color"),
            }

    # -- parameter plumbing -------------------------------------------------

    def params(self):
        out = self.extractor.params() + self.dir_mlp.params()
        out += self.intra_weights.params() + self.cross_weights.params()
        out.append(self.position_embedding)
        out += self.weight_net.params()
        for pass_name in ("coarse", "fine"):
            h = self.heads[pass_name]
            out += h["geometry"].params() + h["semantic"].params() + h["color"].params()
        return out

    def named_params(self):
        table = {}
        for p in self.params():
            if p.name in table:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            table[p.name] = p
        return table

    def load_state(self, arrays):
        table = self.named_params()
        for name, param in table.items():
            for key, slot in ((name, "data"), (f"{name}.m1", "moment1"),
                              (f"{name}.m2", "moment2")):
                if key not in arrays:
                    raise ConfigError(f"checkpoint missing tensor {key!r}")
                arr = arrays[key]
                if arr.shape != param.data.shape or arr.dtype != param.data.dtype:
                    raise ConfigError(
                        f"checkpoint tensor {key!r} is {arr.dtype}{arr.shape}, "
                        f"model expects {param.data.dtype}{param.data.shape}")
                if slot == "data":
                    param.data[...] = arr
                else:
                    setattr(param, slot, arr.copy())
        return self

    def set_step_count(self, step_count):
        for p in self.params():
            p.step_count = step_count

    # -- forward ------------------------------------------------------------

    def refine(self, space):
        """Apply the configured attention variant to the initial space."""
        v = self.cfg.variant
        if v == "none":
            return space.promoted(STAGE_FULL)
        if v == "cross_only":
            return cra.cross_view_sparse(space.promoted(STAGE_INTRA),
                                         self.cross_weights, self.attn_cfg)
        refined = cra.intra_view_radial(space, self.intra_weights, self.attn_cfg,
                                        self.position_embedding)
        if v == "intra_only":
            return refined.promoted(STAGE_FULL)
        return cra.cross_view_sparse(refined, self.cross_weights, self.attn_cfg)

    def _ray_context(self, batch, fmaps, z):
        """Project samples into every source view and assemble the space."""
        pts = batch.origins[:, None, :] + z[..., None] * batch.directions[:, None, :]
        m = len(batch.source_cams)
        coords = np.empty((m, *z.shape, 2))
        mask = np.empty((m, *z.shape), dtype=bool)
        deltas = np.empty((m, *z.shape, 4))
        rgb = np.empty((m, *z.shape, 3))
        for j, cam in enumerate(batch.source_cams):
            coords[j], mask[j], _ = geometry.project_points(cam, pts)
            to_sample = pts - cam.center
            d_src = to_sample / np.linalg.norm(to_sample, axis=-1, keepdims=True)
            deltas[j] = np.concatenate(
                [batch.directions[:, None, :] - d_src,
                 np.sum(d_src * batch.directions[:, None, :], axis=-1, keepdims=True)],
                axis=-1)
            rgb[j] = _lookup_rgb(batch.source_images[j], coords[j], mask[j])
        h, w = batch.source_images.shape[1:3]
        space = build_contextual_space(fmaps, coords, mask, deltas, self.dir_mlp, (h, w))
        return space, np.moveaxis(deltas, 0, 1), np.moveaxis(rgb, 0, 1)

    def _render_pass(self, pass_name, batch, fmaps, z):
        space, deltas, src_rgb = self._ray_context(batch, fmaps, z)
        refined = self.refine(space)
        heads = self.heads[pass_name]
        view_w = self.weight_net(refined, deltas)
        sem_features = field.construct_semantic_ray(refined, view_w)
        sigma = heads["geometry"](refined)
        wtuple = field.render_weights(sigma, z, batch.t_far)
        rendered = field.render_semantic(sem_features, heads["semantic"], sigma, z,
                                         batch.t_far, weights=wtuple)
        colors = heads["color"](refined, deltas, src_rgb)
        rendered.color = field.render_color(colors, sigma, z, batch.t_far, weights=wtuple)
        return rendered

    def forward(self, batch, ray_rngs=None, hierarchical=True):
        """Render a ray batch through the coarse and fine passes.

        ``ray_rngs`` (one Generator per ray) drives stratified coarse depths
        and the fine-depth draws; None gives the deterministic midpoint path
        used by evaluation.  Returns {"coarse", "fine", "z_coarse", "z_fine"}.
        """
        cfg = self.cfg
        b = batch.origins.shape[0]
        images = Tensor(np.asarray(batch.source_images, dtype=cfg.np_dtype))
        fmaps = self.extractor(images)
        z_c = sample_depths(batch.t_near, batch.t_far, b, cfg.n_coarse, ray_rngs)
        coarse = self._render_pass("coarse", batch, fmaps, z_c)
        if hierarchical:
            z_extra = field.hierarchical_sample(coarse.render_weights.data, z_c,
                                                batch.t_far, cfg.n_fine, ray_rngs)
        else:
            z_extra = sample_depths(batch.t_near, batch.t_far, b, cfg.n_fine, ray_rngs)
        z_f = field.merge_depths(z_c, z_extra)
        fine = self._render_pass("fine", batch, fmaps, z_f)
        return {"coarse": coarse, "fine": fine, "z_coarse": z_c, "z_fine": z_f}


def sample_depths(t_near, t_far, n_rays, n_samples, ray_rngs=None):
    """Stratified (or midpoint, when rngs is None) depths per ray."""
    edges = np.linspace(t_near, t_far, n_samples + 1)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    if ray_rngs is None:
        return np.broadcast_to(lo + 0.5 * width, (n_rays, n_samples)).copy()
    u = np.stack([rng.uniform(0.0, 1.0, size=n_samples) for rng in ray_rngs])
    return lo + u * width


def ray_rngs_for(seed, ray_ids):
    """Per-ray generators seeded from (global seed, ray id)."""
    return [np.random.default_rng(np.random.SeedSequence((seed, 0xA1, int(r))))
            for r in ray_ids]


def rays_for_pixels(cam, pixels):
    """Vectorized central rays for integer/fractional pixel coords (B, 2)."""
    px = np.asarray(pixels, dtype=np.float64)
    homo = np.concatenate([px, np.ones((px.shape[0], 1))], axis=-1)
    d_cam = np.linalg.solve(cam.K, homo.T).T
    d_world = d_cam @ cam.R
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return origins, d_world


def _lookup_rgb(image, coords, mask):
    """Bilinear image lookup at (..., 2) coords, zero where masked."""
    h, w, _ = image.shape
    x = np.clip(coords[..., 0], 0.0, w - 1.0)
    y = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    flat = image.reshape(-1, 3)
    idx = y0 * w + x0
    out = ((1 - fy) * ((1 - fx) * flat[idx] + fx * flat[idx + 1])
           + fy * ((1 - fx) * flat[idx + w] + fx * flat[idx + w + 1]))
    return out * mask[..., None]


def render_view(model, scene_data, view_id, source_ids, chunk=1024):
    """Render a full camera view without gradients (deterministic).

    Returns (class_map (H, W), class_probs (H, W, L), rgb (H, W, 3)).
    """
    cam = scene_data.cameras[view_id]
    spec = scene_data.spec
    h, w = cam.height, cam.width
    src_images = np.stack([scene_data.rgb[i] for i in source_ids]).astype(model.cfg.np_dtype)
    src_cams = [scene_data.cameras[i] for i in source_ids]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    probs = np.empty((h * w, model.cfg.num_classes))
    rgb = np.empty((h * w, 3))
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        origins, dirs = rays_for_pixels(cam, pixels[sl])
        batch = RayBatch(origins, dirs, spec.t_near, spec.t_far, src_images, src_cams)
        out = model.forward(batch, ray_rngs=None, hierarchical=True)
        probs[sl] = out["fine"].class_probs.data
        rgb[sl] = np.clip(out["fine"].color.data, 0.0, 1.0)
    class_map = probs.argmax(axis=-1).reshape(h, w).astype(np.int32)
    return class_map, probs.reshape(h, w, -1), rgb.reshape(h, w, 3)
