"""Small parameterized building blocks shared by the network modules."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Param

_ACTIVATIONS = {"elu": ad.elu, "relu": ad.relu, "sigmoid": ad.sigmoid, None: None}


class Linear:
    """Affine map on the last axis: x @ w + b."""

    def __init__(self, name, d_in, d_out, rng, dtype=np.float64, gain=1.0):
        std = gain / np.sqrt(d_in)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, size=(d_in, d_out)), dtype=dtype)
        self.b = Param(f"{name}.b", np.zeros(d_out), dtype=dtype)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def params(self):
        return [self.w, self.b]


class MLP:
    """Stack of Linear layers with an activation between (and optionally
    after) them, e.g. dims (4, 16, 32) -> 4->16->32."""

    def __init__(self, name, dims, rng, dtype=np.float64, activation="elu",
                 final_activation=None):
        self.layers = [
            Linear(f"{name}.{i}", dims[i], dims[i + 1], rng, dtype)
            for i in range(len(dims) - 1)
        ]
        self.act = _ACTIVATIONS[activation]
        self.final_act = _ACTIVATIONS[final_activation]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 and self.act is not None:
                x = self.act(x)
        if self.final_act is not None:
            x = self.final_act(x)
        return x

    def params(self):
        return [p for layer in self.layers for p in layer.params()]
