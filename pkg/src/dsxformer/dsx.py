"""Dual-pooling spectral squeeze-expansion (DSX) channel recalibration.

A token matrix ``F`` (``N x d``, optionally with leading batch axes) is
squeezed to one descriptor per channel by summing its mean and max over the
tokens.  A two-layer gate expands the descriptor to ``r*d`` units (ReLU),
compresses it back to ``d`` (sigmoid) and the resulting per-channel weights
in ``(0, 1)`` multiply every token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .initializers import glorot_uniform
from .tensor import Tensor


@dataclass
class DSXParams:
    W1: Tensor  # (r*d, d)
    b1: Tensor  # (r*d,)
    W2: Tensor  # (d, r*d)
    b2: Tensor  # (d,)
    r: int = 2

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"expansion ratio r must be >= 1, got {self.r}")
        d = self.W2.shape[0]
        expected = {"W1": (self.r * d, d), "b1": (self.r * d,), "W2": (d, self.r * d), "b2": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(
                    f"DSX {name} has shape {getattr(self, name).shape}, expected {shape} (d={d}, r={self.r})"
                )

    @property
    def d(self):
        return self.W2.shape[0]

    @classmethod
    def init(cls, d, r=2, rng=None, dtype=np.float32):
        """Glorot-uniform weights, zero biases (initial gate sits near 0.5)."""
        rng = rng if rng is not None else np.random.default_rng()
        hidden = r * d
        return cls(
            W1=Tensor(glorot_uniform(rng, (hidden, d)), dtype=dtype),
            b1=Tensor(np.zeros(hidden), dtype=dtype),
            W2=Tensor(glorot_uniform(rng, (d, hidden)), dtype=dtype),
            b2=Tensor(np.zeros(d), dtype=dtype),
            r=r,
        )

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def token_mean(F):
    """Mean over the token axis, summed in sorted order.

    Sorting first makes the floating-point result independent of token
    order, so the gate is exactly invariant to token permutations.
    """
    n = F.shape[-2]
    out = np.sort(F.data, axis=-2).sum(axis=-2) / np.asarray(n, dtype=F.dtype)

    def backward(g):
        return (np.broadcast_to(g[..., None, :] / n, F.shape).astype(F.dtype),)

    return T._result(out, (F,), backward, "token_mean")


def dual_pool_squeeze(F):
    """Per-channel ``mean + max`` over the token axis (second to last)."""
    if F.shape[-2] == 0:
        raise DataError("dual_pool_squeeze needs at least one token")
    return token_mean(F) + F.max(axis=-2)


def expand_compress(z, p):
    """Gate ``sigmoid(W2 relu(W1 z + b1) + b2)`` for descriptor(s) ``z`` of length d."""
    if z.shape[-1] != p.d:
        raise DimensionError(f"descriptor length {z.shape[-1]} does not match DSX width {p.d}")
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, -1))
    h = T.relu(z @ p.W1.T + p.b1)
    s = T.sigmoid(h @ p.W2.T + p.b2)
    return T.reshape(s, (-1,)) if single else s


def recalibrate(F, s):
    """Scale every token's channels by the gate ``s`` (broadcast over tokens)."""
    if s.shape[-1] != F.shape[-1]:
        raise DimensionError(f"gate length {s.shape[-1]} does not match channel count {F.shape[-1]}")
    if s.ndim == 1:
        return F * s
    return F * T.reshape(s, s.shape[:-1] + (1, s.shape[-1]))


def dsx_forward(F, p):
    s = expand_compress(dual_pool_squeeze(F), p)
    return recalibrate(F, s)
