"""Cross-reprojection attention over the (B, m, N, C) contextual space.

The refinement runs two cheap attentions instead of one dense pass over all
m*N tokens: first along each reprojected ray within a view (sequence length
N, applied per view), then across views at each fixed sample (sequence
length m, applied per sample, with out-of-bounds views masked).  A dense
single-pass baseline over the flattened token sequence is kept for cost
comparisons and ablations, together with an analytic FLOPs / activation
model of all variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param
from .errors import ConfigError, ContractError
from .features import (STAGE_FULL, STAGE_INITIAL, STAGE_INTRA, ContextualSpace)

MASK_LOGIT_BIAS = -1e9


@dataclass
class AttentionConfig:
    heads: int = 4
    channels: int = 32
    use_radial_position_embedding: bool = True

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def head_dim(self):
        return self.channels // self.heads


class ProjectionWeights:
    """Bias-free query/key/value/output projection matrices, all C x C."""

    def __init__(self, name, dim, rng, dtype=np.float64):
        std = 1.0 / np.sqrt(dim)
        self.wq = Param(f"{name}.wq", rng.normal(0.0, std, (dim, dim)), dtype=dtype)
        self.wk = Param(f"{name}.wk", rng.normal(0.0, std, (dim, dim)), dtype=dtype)
        self.wv = Param(f"{name}.wv", rng.normal(0.0, std, (dim, dim)), dtype=dtype)
        self.wo = Param(f"{name}.wo", rng.normal(0.0, std, (dim, dim)), dtype=dtype)

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo]


def _split_heads(x, heads):
    s, t, c = x.shape
    x = ad.reshape(x, (s, t, heads, c // heads))
    return ad.transpose(x, (0, 2, 1, 3))          # (S, H, T, dk)


def _merge_heads(x):
    s, h, t, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (s, t, h * dk))


def multi_head_attention(tokens, weights, cfg, key_mask=None):
    """Scaled dot-product attention over (S, T, C) token sequences.

    Masked tokens (``key_mask`` False) get a -1e9 additive logit bias as
    keys, so their attention weight underflows to zero, and their output
    rows are zeroed as queries.  With a single token the softmax collapses
    to 1 and the op reduces to the value/output projection composition.
    """
    tokens = ad.as_tensor(tokens)
    if tokens.ndim != 3:
        raise ConfigError(f"attention expects (S, T, C) tokens, got {tokens.shape}")
    # fold the 1/sqrt(d_k) scale into the (small) query projection instead
    # of rescaling the (large) logit tensor
    q = _split_heads(ad.matmul(tokens, weights.wq * (1.0 / np.sqrt(cfg.head_dim))),
                     cfg.heads)
    k = _split_heads(ad.matmul(tokens, weights.wk), cfg.heads)
    v = _split_heads(ad.matmul(tokens, weights.wv), cfg.heads)
    logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, MASK_LOGIT_BIAS).astype(tokens.dtype)
        logits = logits + bias[:, None, None, :]
    attn = ad.softmax(logits, axis=-1)
    out = ad.matmul(_merge_heads(ad.matmul(attn, v)), weights.wo)
    if key_mask is not None:
        out = out * key_mask[:, :, None].astype(tokens.dtype)
    return out


def intra_view_radial(space, weights, cfg, position_embedding=None):
    """Refine each view's radial feature row with attention over its N samples.

    Views are independent sequences; a learned per-depth-index embedding is
    added before attention when enabled.  Out-of-bounds samples participate
    as zero tokens (the cross-view stage re-masks them).
    """
    if space.stage != STAGE_INITIAL:
        raise ContractError(f"intra-view attention needs the initial space, got {space.stage}")
    b, m, n, c = space.features.shape
    x = ad.reshape(space.features, (b * m, n, c))
    if cfg.use_radial_position_embedding and position_embedding is not None:
        pe = position_embedding
        if pe.shape[0] < n:
            raise ConfigError(f"position embedding covers {pe.shape[0]} samples, need {n}")
        x = x + pe[:n]
    out = multi_head_attention(x, weights, cfg)
    return ContextualSpace(ad.reshape(out, (b, m, n, c)), space.mask, STAGE_INTRA)


def cross_view_sparse(space, weights, cfg):
    """Refine each sample's cross-view column with attention over the m views.

    Columns are independent sequences; views whose reprojection of a sample
    is out of bounds are masked out of that column's attention.
    """
    if space.stage != STAGE_INTRA:
        raise ContractError(f"cross-view attention needs the intra-refined space, got {space.stage}")
    b, m, n, c = space.features.shape
    x = ad.reshape(ad.transpose(space.features, (0, 2, 1, 3)), (b * n, m, c))
    key_mask = np.moveaxis(space.mask, 1, 2).reshape(b * n, m)
    out = multi_head_attention(x, weights, cfg, key_mask=key_mask)
    out = ad.transpose(ad.reshape(out, (b, n, m, c)), (0, 2, 1, 3))
    return ContextualSpace(out, space.mask, STAGE_FULL)


def dense_attention_reference(space, weights, cfg):
    """Single attention over all m*N tokens: the costly baseline."""
    if space.stage != STAGE_INITIAL:
        raise ContractError(f"dense attention needs the initial space, got {space.stage}")
    b, m, n, c = space.features.shape
    x = ad.reshape(space.features, (b, m * n, c))
    key_mask = space.mask.reshape(b, m * n)
    out = multi_head_attention(x, weights, cfg, key_mask=key_mask)
    return ContextualSpace(ad.reshape(out, (b, m, n, c)), space.mask, STAGE_FULL)


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------

COST_CONVENTION = (
    "flops = multiply-accumulate count of the four CxC token projections "
    "(4*T*C^2 per sequence) plus the attention-logit matmul Q K^T (T^2*C); "
    "softmax and the value aggregation matmul are not counted. "
    "activation_elements = tensors retained for the backward pass: input, "
    "Q, K, V, per-head context and output tokens (6*T*C per sequence) plus "
    "attention logits and softmax output (2*H*T^2)."
)

VARIANTS = ("dense", "intra_only", "cross_only", "full")


@dataclass
class CostEntry:
    flops: int
    activation_elements: int


@dataclass
class CostReport:
    rays: int
    samples: int
    views: int
    channels: int
    heads: int
    entries: dict
    convention: str = COST_CONVENTION

    def ratio(self, a, b, field="flops"):
        return getattr(self.entries[a], field) / getattr(self.entries[b], field)


def _attention_cost(sequences, length, channels, heads):
    s, t, c, h = int(sequences), int(length), int(channels), int(heads)
    flops = s * (4 * t * c * c + t * t * c)
    acts = s * (6 * t * c + 2 * h * t * t)
    return CostEntry(flops, acts)


def cost_model(rays, samples, views, channels, heads, variant):
    """Analytic cost of one attention variant under COST_CONVENTION.

    ``full`` is defined as the exact sum of the two stages it concatenates,
    so flops(full) == flops(intra_only) + flops(cross_only) identically.
    """
    if min(rays, samples, views, channels, heads) <= 0:
        raise ConfigError("cost model dimensions must be positive")
    if channels % heads:
        raise ConfigError(f"channels {channels} not divisible by heads {heads}")
    if variant == "dense":
        return _attention_cost(rays, views * samples, channels, heads)
    if variant == "intra_only":
        return _attention_cost(rays * views, samples, channels, heads)
    if variant == "cross_only":
        return _attention_cost(rays * samples, views, channels, heads)
    if variant == "full":
        intra = cost_model(rays, samples, views, channels, heads, "intra_only")
        cross = cost_model(rays, samples, views, channels, heads, "cross_only")
        return CostEntry(intra.flops + cross.flops,
                         intra.activation_elements + cross.activation_elements)
    raise ConfigError(f"unknown attention variant {variant!r}")


def full_cost_report(rays, samples, views, channels, heads=4):
    entries = {v: cost_model(rays, samples, views, channels, heads, v) for v in VARIANTS}
    return CostReport(rays, samples, views, channels, heads, entries)


def format_cost_table(report):
    lines = [
        f"attention cost for input {report.rays} x {report.samples} x "
        f"{report.views} x {report.channels} (heads={report.heads})",
        f"{'variant':<12} {'GFLOPs':>10} {'Melems':>10} {'flops/full':>11}",
    ]
    full = report.entries["full"]
    for name in VARIANTS:
        e = report.entries[name]
        lines.append(f"{name:<12} {e.flops / 1e9:>10.3f} "
                     f"{e.activation_elements / 1e6:>10.1f} "
                     f"{e.flops / full.flops:>11.3f}")
    lines.append(f"convention: {report.convention}")
    return "\n".join(lines)


def cost_csv(report):
    rows = ["variant,flops,activation_elements"]
    for name in VARIANTS:
        e = report.entries[name]
        rows.append(f"{name},{e.flops},{e.activation_elements}")
    return "\n".join(rows) + "\n"
