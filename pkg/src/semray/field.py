"""Semantic ray construction and volume rendering.

The refined contextual space is collapsed to one feature sequence per ray
by a per-view reweighting vector constrained to stay near uniform, turned
into per-sample semantic logits, densities and blended colors, and
composited along the ray with the standard emission-absorption quadrature
T(z_k) * (1 - exp(-sigma_k * delta_k)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cra import AttentionConfig, ProjectionWeights, multi_head_attention
from .errors import ConfigError, ContractError
from .features import STAGE_FULL
from .layers import MLP, Linear

GEO_ATTN_DIM = 16
PROB_FLOOR = 1e-12


def view_weight_blend(tau, m):
    """Blend factor beta for pulling scores toward the uniform simplex point.

    w = (1 - beta)/m + beta * p with p on the simplex lands strictly inside
    (tau/m, 1/(tau*m)) for every input because beta is kept strictly below
    both 1 - tau and (1 - tau)/(tau * (m - 1)).
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    if m < 2:
        return 0.0
    return 0.99 * min(1.0 - tau, (1.0 - tau) / (tau * (m - 1)))


class SemanticWeightNet:
    """Scores each (view, sample) feature and pools to per-view weights."""

    def __init__(self, channels, rng, dtype=np.float64, tau=0.7, name="weight_net"):
        self.tau = tau
        self.mlp = MLP(name, (channels + 4, 16, 8, 1), rng, dtype, activation="elu",
                       final_activation="sigmoid")

    def __call__(self, space, deltas, tau=None):
        """(B, m) reweighting vector, strictly inside the tau constraint set.

        ``deltas`` is the (B, m, N, 4) view-direction-difference block.
        Scores are pooled over each view's unmasked samples; views masked
        everywhere pool to the minimal score 0.  Normalizing the pooled
        scores to a simplex point and blending toward uniform keeps every
        weight in (tau/m, 1/(tau*m)) with the weights summing to one.
        """
        if space.stage != STAGE_FULL:
            raise ContractError(f"view weights need the fully refined space, got {space.stage}")
        tau = self.tau if tau is None else tau
        b, m, n, _ = space.features.shape
        dtype = space.features.dtype
        if m < 2:
            return Tensor(np.ones((b, m), dtype=dtype))
        x = ad.concat([space.features, Tensor(deltas.astype(dtype))], axis=-1)
        scores = ad.reshape(self.mlp(x), (b, m, n))
        maskf = space.mask.astype(dtype)
        denom = np.maximum(maskf.sum(axis=2), 1.0)
        pooled = ad.sum_(scores * maskf, axis=2) * (1.0 / denom)      # (B, m)
        total = ad.sum_(pooled, axis=1, keepdims=True)
        p = (pooled + PROB_FLOOR) / (total + m * PROB_FLOOR)
        beta = view_weight_blend(tau, m)
        return p * beta + (1.0 - beta) / m

    def params(self):
        return self.mlp.params()


def construct_semantic_ray(space, view_weights):
    """Convex combination of the m refined view rows: (B, N, C) features."""
    if space.stage != STAGE_FULL:
        raise ContractError(f"semantic ray needs the fully refined space, got {space.stage}")
    w = view_weights if isinstance(view_weights, Tensor) else Tensor(view_weights)
    return ad.sum_(space.features * ad.reshape(w, (*w.shape, 1, 1)), axis=1)


def masked_view_stats(features, mask):
    """Mean and population variance over the view axis of (B, m, N, C).

    Masked views are excluded and samples visible in no view get zero mean
    and variance.  Identical features across the unmasked views give
    exactly zero variance: the mean's rounding residue (~1 ulp) is squared
    into ~1e-32 garbage, so entries whose unmasked values have zero spread
    are clamped by a constant indicator (where the true gradient is zero
    anyway, variance being quadratic around an identical configuration).
    """
    b, m, n, c = features.shape
    maskf = mask.astype(features.dtype)[..., None]
    u = maskf / np.maximum(maskf.sum(axis=1, keepdims=True), 1.0)
    mean = ad.sum_(features * u, axis=1)                              # (B, N, C)
    centered = (features - ad.reshape(mean, (b, 1, n, c))) * maskf
    x = features.data
    hi = np.where(mask[..., None], x, -np.inf).max(axis=1)
    lo = np.where(mask[..., None], x, np.inf).min(axis=1)
    spread = (hi > lo).astype(features.dtype)
    var = ad.sum_(centered * centered * u, axis=1) * spread
    return mean, var


class GeometryNet:
    """Per-sample density from cross-view statistics of the refined space.

    Features are gated by a learned per-token scalar, reduced to masked
    cross-view mean and variance, refined by attention along the ray, and
    mapped through a ReLU head so sigma >= 0; samples visible in no view
    are forced to zero density.
    """

    def __init__(self, channels, rng, dtype=np.float64, name="geometry"):
        self.feat = Linear(f"{name}.feat", channels, channels, rng, dtype)
        self.gate = Linear(f"{name}.gate", channels, 1, rng, dtype)
        self.fuse = MLP(f"{name}.fuse", (2 * channels, channels, GEO_ATTN_DIM), rng,
                        dtype, activation="elu")
        self.attn_cfg = AttentionConfig(heads=4, channels=GEO_ATTN_DIM,
                                        use_radial_position_embedding=False)
        self.attn = ProjectionWeights(f"{name}.attn", GEO_ATTN_DIM, rng, dtype)
        self.mid = Linear(f"{name}.mid", GEO_ATTN_DIM, GEO_ATTN_DIM, rng, dtype)
        self.head = Linear(f"{name}.head", GEO_ATTN_DIM, 1, rng, dtype)
        # start with a small positive density so the ReLU head is not born
        # dead and early transmittance reaches the far plane
        self.head.b.data[...] = 0.3

    def __call__(self, space):
        if space.stage != STAGE_FULL:
            raise ContractError(f"density needs the fully refined space, got {space.stage}")
        b, n = space.features.shape[0], space.features.shape[2]
        dtype = space.features.dtype
        valid = space.mask.any(axis=1)                                # (B, N)
        gated = ad.elu(self.feat(space.features)) * ad.sigmoid(self.gate(space.features))
        mean, var = masked_view_stats(gated, space.mask)
        g = self.fuse(ad.concat([mean, var], axis=-1))                # (B, N, 16)
        g = multi_head_attention(g, self.attn, self.attn_cfg, key_mask=valid)
        g = ad.elu(self.mid(g))
        sigma = ad.relu(ad.reshape(self.head(g), (b, n)))
        return sigma * valid.astype(dtype)

    def params(self):
        return (self.feat.params() + self.gate.params() + self.fuse.params()
                + self.attn.params() + self.mid.params() + self.head.params())


class ColorBlendHead:
    """Blends the m reprojected source colors per sample with learned logits."""

    def __init__(self, channels, rng, dtype=np.float64, name="color"):
        self.mlp = MLP(name, (channels + 4, 16, 1), rng, dtype, activation="elu")

    def __call__(self, space, deltas, source_rgb):
        """(B, N, 3) per-sample colors.

        ``source_rgb`` (B, m, N, 3) holds each view's image sampled at the
        reprojections, zeroed where masked.  Masked views get a -1e9 blend
        logit; a sample visible in no view blends uniformly over zeros and
        therefore contributes black.
        """
        if space.stage != STAGE_FULL:
            raise ContractError(f"color blending needs the fully refined space, got {space.stage}")
        b, m, n, _ = space.features.shape
        dtype = space.features.dtype
        x = ad.concat([space.features, Tensor(deltas.astype(dtype))], axis=-1)
        logits = ad.reshape(self.mlp(x), (b, m, n))
        bias = np.where(space.mask, 0.0, -1e9).astype(dtype)
        blend = ad.softmax(logits + bias, axis=1)                     # (B, m, N)
        rgb = Tensor(np.where(space.mask[..., None], source_rgb, 0.0).astype(dtype))
        return ad.sum_(rgb * ad.reshape(blend, (b, m, n, 1)), axis=1)

    def params(self):
        return self.mlp.params()


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@dataclass
class RenderedRay:
    """Everything rendered for a ray batch (fields are Tensors, (B, ...))."""

    semantic_logits: Tensor            # (B, L)
    class_probs: Tensor                # (B, L)
    transmittance: Tensor              # (B, N)
    render_weights: Tensor             # (B, N) = T * alpha
    expected_depth: Tensor             # (B,)
    color: Tensor = None               # (B, 3) when a color head ran


def sample_intervals(z, t_far):
    """delta_k = z_{k+1} - z_k with the last interval closing to t_far."""
    z = np.asarray(z)
    return np.concatenate([z[..., 1:] - z[..., :-1],
                           np.maximum(t_far - z[..., -1:], 0.0)], axis=-1)


def render_weights(sigma, z, t_far):
    """Transmittance and per-sample quadrature weights along each ray.

    Returns (T, alpha, weights) with T_k = exp(-sum_{k'<k} sigma_k' delta_k')
    and weights_k = T_k * (1 - exp(-sigma_k delta_k)); the weights sum to
    1 - T_{N+1} <= 1 by telescoping.
    """
    sigma = ad.as_tensor(sigma)
    delta = Tensor(sample_intervals(z, t_far).astype(sigma.dtype))
    a = sigma * delta
    accum = ad.cumsum(a, axis=-1)
    trans = ad.exp(a - accum)                     # exclusive cumulative sum
    alpha = 1.0 - ad.exp(-a)
    return trans, alpha, trans * alpha


def composite(values, weights):
    """Quadrature sum over samples: (B, N, D) x (B, N) -> (B, D)."""
    values = ad.as_tensor(values)
    b, n = weights.shape
    return ad.sum_(values * ad.reshape(weights, (b, n, 1)), axis=1)


def render_semantic(features, semantic_head, sigma, z, t_far, weights=None):
    """Composite per-sample semantic logits along the ray (quadrature of the
    emission-absorption model), then normalize to class probabilities."""
    z = np.asarray(z)
    if z.shape[-1] < 2 or np.any(np.diff(z, axis=-1) < 0):
        raise ContractError("render needs >= 2 ascending sample depths")
    if weights is None:
        trans, _alpha, weights = render_weights(sigma, z, t_far)
    else:
        trans, _alpha, weights = weights
    logits_per_sample = semantic_head(features)
    logits = composite(logits_per_sample, weights)
    probs = ad.softmax(logits, axis=-1)
    depth = ad.sum_(weights * Tensor(z.astype(weights.dtype)), axis=-1)
    return RenderedRay(logits, probs, trans, weights, depth)


def render_color(colors, sigma, z, t_far, weights=None):
    """Composite per-sample colors: sigma == 0 renders black."""
    if weights is None:
        _trans, _alpha, weights = render_weights(sigma, z, t_far)
    else:
        _trans, _alpha, weights = weights
    return composite(colors, weights)


# ---------------------------------------------------------------------------
# hierarchical sampling
# ---------------------------------------------------------------------------


def hierarchical_sample(coarse_weights, z_coarse, t_far, n_fine, rngs=None,
                        support_floor=0.01):
    """Inverse-CDF draws from the coarse render-weight histogram.

    Bin k spans [z_k, z_{k+1}) (the last bin closes at t_far).  A uniform
    floor of ``support_floor`` times the total mass, spread over the bins,
    keeps every bin sampleable; rays whose weights are all zero fall back
    to a stratified-uniform histogram.  ``rngs`` supplies one Generator per
    ray; None uses stratum midpoints (the deterministic evaluation path).
    Sampling is not differentiated: the result is plain depths.
    """
    w = np.asarray(coarse_weights, dtype=np.float64)
    z = np.asarray(z_coarse, dtype=np.float64)
    b, n = w.shape
    edges = np.concatenate([z, np.full((b, 1), t_far)], axis=-1)
    w = np.maximum(w, 0.0)
    total = w.sum(axis=-1, keepdims=True)
    p = np.where(total > 0.0, w + (support_floor / n) * total, 1.0)
    p /= p.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(p, axis=-1)], axis=-1)
    strata = np.arange(n_fine) / n_fine
    out = np.empty((b, n_fine))
    for i in range(b):
        u = strata + (rngs[i].uniform(0.0, 1.0, size=n_fine) if rngs is not None
                      else 0.5) / n_fine
        idx = np.clip(np.searchsorted(cdf[i], u, side="right") - 1, 0, n - 1)
        frac = (u - cdf[i, idx]) / p[i, idx]
        out[i] = edges[i, idx] + frac * (edges[i, idx + 1] - edges[i, idx])
    return out


def merge_depths(z_coarse, z_fine):
    """Sorted union of coarse and fine depths per ray."""
    return np.sort(np.concatenate([z_coarse, z_fine], axis=-1), axis=-1)
