"""Channel (feature-dimension) and spatial (positional-dimension) attention.

Both gates squeeze the feature map to pooled statistics, pass them through
a small learned network, and apply a sigmoid mask back onto the map. The
channel gate shares one bottleneck MLP between its average- and max-pooled
descriptors; the spatial gate concatenates per-position channel mean/max
maps and runs a single 7x7 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ChannelAttnParams",
    "SpatialAttnParams",
    "channel_attention",
    "spatial_attention",
    "cbam_refine",
]

SPATIAL_KERNEL = 7


@dataclass
class ChannelAttnParams:
    """Shared bottleneck MLP: w0 squeezes C -> C/r, w1 expands back."""

    w0: Tensor
    w1: Tensor
    reduction: int

    @classmethod
    def create(cls, channels: int, reduction: int, rng) -> "ChannelAttnParams":
        if channels % reduction != 0:
            raise ConfigError(
                f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        w0 = Tensor(rng.truncated_normals(hidden * channels, 0.02).reshape(channels, hidden))
        w1 = Tensor(rng.truncated_normals(channels * hidden, 0.02).reshape(hidden, channels))
        return cls(w0=w0, w1=w1, reduction=reduction)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w0": self.w0, f"{prefix}.w1": self.w1}


@dataclass
class SpatialAttnParams:
    """One 7x7 convolution from the 2 pooled maps down to a single mask."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng) -> "SpatialAttnParams":
        w = rng.truncated_normals(2 * SPATIAL_KERNEL * SPATIAL_KERNEL, 0.02)
        # Positive bias starts the gate mostly open (sigmoid(2) ~ 0.88), so
        # a fresh block is not attenuated to a quarter before the gates
        # have learned anything; it closes wherever training wants it to.
        return cls(
            weight=Tensor(w.reshape(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)),
            bias=Tensor(np.full(1, 2.0)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


def _bottleneck(pooled: Tensor, p: ChannelAttnParams) -> Tensor:
    row = T.reshape(pooled, (1, pooled.data.shape[0]))
    hidden = T.relu(T.matmul(row, p.w0))
    return T.reshape(T.matmul(hidden, p.w1), (pooled.data.shape[0],))


def channel_attention(f: Tensor, p: ChannelAttnParams) -> tuple[Tensor, Tensor]:
    """Per-channel gate from pooled descriptors; returns (gate, gated map).

    Average- and max-pooled channel vectors each pass the same w0 -> ReLU
    -> w1 bottleneck; their sum is squashed to a gate in (0, 1)^C that
    scales the [C, H, W] input across all positions.
    """
    c = f.data.shape[0]
    if c % p.reduction != 0:
        raise ConfigError(f"channels {c} not divisible by reduction {p.reduction}")
    avg = _bottleneck(T.global_avg_pool(f), p)
    mx = _bottleneck(T.global_max_pool(f), p)
    gate = T.sigmoid(T.add(avg, mx))
    gated = T.mul(T.reshape(gate, (c, 1, 1)), f)
    return gate, gated


def spatial_attention(f: Tensor, p: SpatialAttnParams) -> tuple[Tensor, Tensor]:
    """Per-position gate from channel statistics; returns (gate, gated map).

    The per-position channel mean and max stack to a [2, H, W] map, a 7x7
    reflect-padded convolution reduces it to one channel, and the sigmoid
    of that plane scales every input channel.
    """
    expected = (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)
    if p.weight.data.shape != expected:
        raise ConfigError(
            f"spatial gate kernel must be {expected}, got {p.weight.data.shape}")
    pooled = T.concat([T.channel_mean(f), T.channel_max(f)], axis=0)
    gate = T.sigmoid(T.conv2d(pooled, p.weight, p.bias))
    return gate, T.mul(gate, f)


def cbam_refine(f: Tensor, cp: ChannelAttnParams, sp: SpatialAttnParams) -> Tensor:
    """Channel gate first, spatial gate second, in that fixed order."""
    _, after_channel = channel_attention(f, cp)
    _, refined = spatial_attention(after_channel, sp)
    return refined
