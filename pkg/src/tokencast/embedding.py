"""Channel-as-token embedding, forecast head, per-window normalization.

Each channel's whole lookback is one token: (channels, lookback) maps to
(channels, dim) through a two-layer MLP applied to every token row
independently, so tokens never mix here and channel order is irrelevant.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import rng
from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


class NormStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def instance_normalize(x: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, NormStats]:
    """Shift/scale each window's channel rows to zero mean, unit deviation.

    Stats come from the lookback alone and are treated as constants by the
    gradient tape; only the affine de-normalization of the forecast is
    differentiated.
    """
    mean = x.mean(axis=-1, keepdims=True)
    std = np.maximum(x.std(axis=-1, keepdims=True), eps)
    return (x - mean) / std, NormStats(mean=mean, std=std)


def denormalize(pred: Tensor, stats: NormStats) -> Tensor:
    out = T.mul(pred, Tensor(np.broadcast_to(stats.std, pred.shape).copy()))
    return T.add(out, Tensor(np.broadcast_to(stats.mean, pred.shape).copy()))


class TsEmbedder:
    """Two linear layers with SiLU between, applied per channel token."""

    def __init__(self, lookback: int, dim: int, seed: int):
        if lookback < 1 or dim < 1:
            raise ShapeError(f"embedder needs positive dims, got {lookback}, {dim}")
        self.lookback = lookback
        self.dim = dim
        hidden = 2 * dim
        gen = rng.generator(seed, "embedder")
        self.w1 = T.parameter(rng.gaussian(gen, (lookback, hidden), INIT_STD))
        self.b1 = T.parameter(np.zeros(hidden))
        self.w2 = T.parameter(rng.gaussian(gen, (hidden, dim), INIT_STD))
        self.b2 = T.parameter(np.zeros(dim))

    def embed(self, x: Tensor) -> Tensor:
        """(..., channels, lookback) -> (..., channels, dim)."""
        if x.shape[-1] != self.lookback:
            raise ShapeError(
                f"embedder configured for lookback {self.lookback}, got {x.shape[-1]}"
            )
        h = T.silu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def params(self, prefix: str = "embedder") -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


class OutputHead:
    """Linear map from final token states to the forecast horizon."""

    def __init__(self, dim: int, horizon: int, seed: int):
        gen = rng.generator(seed, "head")
        self.dim = dim
        self.horizon = horizon
        self.weight = T.parameter(rng.gaussian(gen, (dim, horizon), INIT_STD))
        self.bias = T.parameter(np.zeros(horizon))

    def project(self, h: Tensor) -> Tensor:
        """(..., channels, dim) -> (..., channels, horizon)."""
        if h.shape[-1] != self.dim:
            raise ShapeError(f"head configured for dim {self.dim}, got {h.shape[-1]}")
        return T.add(T.matmul(h, self.weight), self.bias)

    def params(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
