import hypothesis
import numpy as np
import pytest

from semray.runtime import tune_allocator

tune_allocator()

hypothesis.settings.register_profile(
    "semray", deadline=None, max_examples=40, derandomize=True,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("semray")


def naive_attention(tokens, wq, wk, wv, wo, heads, key_mask=None):
    """O(T^2) two-loop reference for multi-head scaled dot-product attention.

    Independent of the vectorized implementation: per head and per query it
    builds the softmax weights scalar by scalar.
    """
    s, t, c = tokens.shape
    dk = c // heads
    out = np.zeros_like(tokens)
    for b in range(s):
        q = tokens[b] @ wq
        k = tokens[b] @ wk
        v = tokens[b] @ wv
        ctx = np.zeros((t, c))
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            for i in range(t):
                logits = np.empty(t)
                for j in range(t):
                    logits[j] = q[i, sl] @ k[j, sl] / np.sqrt(dk)
                    if key_mask is not None and not key_mask[b, j]:
                        logits[j] += -1e9
                e = np.exp(logits - logits.max())
                w = e / e.sum()
                for j in range(t):
                    ctx[i, sl] += w[j] * v[j, sl]
        out[b] = ctx @ wo
    if key_mask is not None:
        out *= key_mask[:, :, None]
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """One 4-class room scene with 8 views at 32x32, loaded from disk."""
    from semray.scene import load_dataset, make_dataset
    root = tmp_path_factory.mktemp("tiny_data")
    manifest = make_dataset(2, 8, 32, 32, seed=5, out_dir=str(root),
                            class_count=4, template="room", n_test=1)
    return load_dataset(manifest)
