"""Per-view contextual feature extraction and the 3D contextual space.

A weight-shared convolutional U-Net turns each source image into a dense
feature map at half input resolution; a tiny MLP embeds per-sample view
direction differences.  Sampling every source view's map at the query ray's
reprojections and adding the direction embedding yields the (m, N, C)
contextual feature block per ray (batched here as (B, m, N, C)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param
from .errors import ConfigError, ShapeError
from .layers import MLP

STAGE_INITIAL = "initial"
STAGE_INTRA = "intra_refined"
STAGE_FULL = "fully_refined"
_STAGE_ORDER = (STAGE_INITIAL, STAGE_INTRA, STAGE_FULL)


@dataclass
class FeatureExtractorConfig:
    base_channels: int = 8
    out_channels: int = 32
    num_res_blocks: int = 1
    instance_norm_eps: float = 1e-5


@dataclass
class ContextualSpace:
    """Feature block around one ray batch: (B, m, N, C) plus validity mask."""

    features: ad.Tensor          # (B, m, N, C)
    mask: np.ndarray             # (B, m, N) bool, False where out of bounds
    stage: str = STAGE_INITIAL

    def promoted(self, stage):
        """Mark an ablated pipeline stage as done without refining features."""
        if _STAGE_ORDER.index(stage) < _STAGE_ORDER.index(self.stage):
            raise ShapeError(f"cannot demote contextual space {self.stage} -> {stage}")
        return ContextualSpace(self.features, self.mask, stage)


class InstanceNorm:
    """Per-image, per-channel normalization over space with a learned affine."""

    def __init__(self, name, channels, dtype, eps=1e-5):
        self.gamma = Param(f"{name}.gamma", np.ones(channels), dtype=dtype)
        self.beta = Param(f"{name}.beta", np.zeros(channels), dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return ad.instance_norm(x, self.gamma, self.beta, self.eps)

    def params(self):
        return [self.gamma, self.beta]


class ConvLayer:
    def __init__(self, name, c_in, c_out, kernel, stride, rng, dtype,
                 norm=True, activation=None, eps=1e-5):
        std = np.sqrt(2.0 / (kernel * kernel * c_in))
        self.w = Param(f"{name}.w", rng.normal(0.0, std, size=(kernel, kernel, c_in, c_out)),
                       dtype=dtype)
        self.b = Param(f"{name}.b", np.zeros(c_out), dtype=dtype)
        self.stride = stride
        self.padding = kernel // 2
        self.norm = InstanceNorm(f"{name}.in", c_out, dtype, eps) if norm else None
        self.activation = activation

    def __call__(self, x):
        y = ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
        if self.norm is not None:
            y = self.norm(y)
        if self.activation == "relu":
            y = ad.relu(y)
        return y

    def params(self):
        out = [self.w, self.b]
        if self.norm is not None:
            out += self.norm.params()
        return out


class ResBlock:
    """conv-norm-relu, conv-norm, plus a (possibly strided 1x1) skip."""

    def __init__(self, name, c_in, c_out, stride, rng, dtype, eps=1e-5):
        self.conv1 = ConvLayer(f"{name}.c1", c_in, c_out, 3, stride, rng, dtype,
                               activation="relu", eps=eps)
        self.conv2 = ConvLayer(f"{name}.c2", c_out, c_out, 3, 1, rng, dtype, eps=eps)
        if c_in == c_out and stride == 1:
            self.skip = None
        else:
            self.skip = ConvLayer(f"{name}.skip", c_in, c_out, 1, stride, rng, dtype, eps=eps)

    def __call__(self, x):
        y = self.conv2(self.conv1(x))
        s = x if self.skip is None else self.skip(x)
        return ad.relu(y + s)

    def params(self):
        out = self.conv1.params() + self.conv2.params()
        if self.skip is not None:
            out += self.skip.params()
        return out


class FeatureExtractor:
    """Scaled ResUNet: stride-2 stem, two strided stages, decode to H/2.

    Channel plan with base b: 3 -> b -> 2b -> 4b -> decode -> out_channels,
    skip-connected at the /4 and /2 resolutions.  The same weights process
    every source view, keeping the source set permutation-equivariant.
    """

    def __init__(self, cfg, rng, dtype=np.float64, name="extractor"):
        b, c, eps = cfg.base_channels, cfg.out_channels, cfg.instance_norm_eps
        n = cfg.num_res_blocks
        self.cfg = cfg
        self.stem = ConvLayer(f"{name}.stem", 3, b, 7, 2, rng, dtype, activation="relu", eps=eps)
        self.enc1 = [ResBlock(f"{name}.enc1.{i}", b if i == 0 else 2 * b, 2 * b,
                              2 if i == 0 else 1, rng, dtype, eps) for i in range(n)]
        self.enc2 = [ResBlock(f"{name}.enc2.{i}", 2 * b if i == 0 else 4 * b, 4 * b,
                              2 if i == 0 else 1, rng, dtype, eps) for i in range(n)]
        self.mid = [ResBlock(f"{name}.mid.{i}", 4 * b, 4 * b, 1, rng, dtype, eps)
                    for i in range(n)]
        self.dec1a = ConvLayer(f"{name}.dec1a", 4 * b, 2 * b, 3, 1, rng, dtype, eps=eps)
        self.dec1b = ConvLayer(f"{name}.dec1b", 4 * b, 2 * b, 3, 1, rng, dtype, eps=eps)
        self.dec2a = ConvLayer(f"{name}.dec2a", 2 * b, b, 3, 1, rng, dtype, eps=eps)
        self.dec2b = ConvLayer(f"{name}.dec2b", 2 * b, c, 3, 1, rng, dtype, eps=eps)
        self.final = ConvLayer(f"{name}.final", c, c, 1, 1, rng, dtype, eps=eps)

    def __call__(self, images):
        """(V, H, W, 3) in [0,1] -> (V, H/2, W/2, out_channels)."""
        images = ad.as_tensor(images)
        _, h, w, _ = images.shape
        if h < 8 or w < 8 or h % 8 or w % 8:
            raise ConfigError(f"image size {h}x{w} must be a multiple of 8 and >= 8")
        x0 = self.stem(images)                     # (V, H/2, W/2, b)
        x1 = x0
        for block in self.enc1:
            x1 = block(x1)                         # (V, H/4, W/4, 2b)
        x2 = x1
        for block in self.enc2:
            x2 = block(x2)                         # (V, H/8, W/8, 4b)
        for block in self.mid:
            x2 = block(x2)
        y = ad.upsample2x(self.dec1a(x2))          # (V, H/4, W/4, 2b)
        y = self.dec1b(ad.concat([y, x1], axis=-1))
        y = ad.upsample2x(self.dec2a(y))           # (V, H/2, W/2, b)
        y = self.dec2b(ad.concat([y, x0], axis=-1))
        return self.final(y)

    def params(self):
        out = self.stem.params()
        for group in (self.enc1, self.enc2, self.mid):
            for block in group:
                out += block.params()
        for layer in (self.dec1a, self.dec1b, self.dec2a, self.dec2b, self.final):
            out += layer.params()
        return out


def make_view_dir_mlp(out_channels, rng, dtype=np.float64, name="dir_mlp"):
    """Embeds the 4-d direction difference (delta vector, dot) to C dims."""
    return MLP(name, (4, 16, out_channels), rng, dtype, activation="elu")


def feature_coords(pixel_coords, scale=2.0):
    """Map image pixel coords to feature-map coords at 1/scale resolution.

    Integer-centered convention on both grids: feature cell j covers image
    pixels [scale*j, scale*(j+1)), so x_f = (x + 0.5)/scale - 0.5.
    """
    return (np.asarray(pixel_coords) + 0.5) / scale - 0.5


def build_contextual_space(fmaps, coords, mask, deltas, dir_mlp, image_hw):
    """Assemble the initial (B, m, N, C) contextual feature block.

    ``fmaps`` is the (m, Hf, Wf, C) stack of source feature maps; ``coords``
    (m, B, N, 2) are image-space reprojection coords with ``mask`` (m, B, N)
    and direction differences ``deltas`` (m, B, N, 4).  Each entry is the
    bilinearly sampled feature plus the direction embedding, zeroed exactly
    where masked.

    Views are gathered one map at a time (bit-exact view-permutation
    equivariance); the direction embedding and masking run batched over
    all views at once.
    """
    fmaps = ad.as_tensor(fmaps)
    m, hf, wf, c = fmaps.shape
    if coords.shape[0] != m or mask.shape[0] != m or deltas.shape[0] != m:
        raise ShapeError(f"inconsistent view counts: fmaps {m}, coords {coords.shape[0]}, "
                         f"mask {mask.shape[0]}, deltas {deltas.shape[0]}")
    scale = image_hw[0] / hf
    dtype = fmaps.dtype
    fc = feature_coords(coords, scale).astype(dtype)
    sampled = ad.stack([ad.bilinear_sample(fmaps[j], ad.Tensor(fc[j]))
                        for j in range(m)], axis=0)                 # (m, B, N, C)
    emb = dir_mlp(ad.Tensor(deltas.astype(dtype)))                  # (m, B, N, C)
    feats = (sampled + emb) * mask[..., None].astype(dtype)
    feats = ad.transpose(feats, (1, 0, 2, 3))                       # (B, m, N, C)
    return ContextualSpace(feats, np.moveaxis(mask, 0, 1).copy(), STAGE_INITIAL)
