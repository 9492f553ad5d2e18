"""Spatial pyramid pooling over square feature maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    ConvParams,
    Tensor,
    avg_pool_clipped,
    bilinear_resize,
    concat_channels,
    conv2d,
)


@dataclass
class SppConfig:
    levels: list[int] = field(default_factory=lambda: [1, 2, 3, 6])
    in_channels: int = 8
    reduced_channels: int | None = None

    def __post_init__(self):
        self.levels = [int(v) for v in self.levels]
        if not self.levels:
            raise ConfigError("spp levels must be non-empty")
        if any(v < 1 for v in self.levels) or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError(f"spp levels must be positive and strictly increasing, got {self.levels}")
        if self.reduced_channels is None:
            self.reduced_channels = max(1, self.in_channels // len(self.levels))
        if self.reduced_channels < 1:
            raise ConfigError("reduced_channels must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.levels) * self.reduced_channels


def spp_bin_geometry(n: int, l: int) -> tuple[int, int, int]:
    """Kernel, stride and output bins for pooling an n-wide axis into ~l bins.

    kernel = stride = ceil(n / l) and out = ceil(n / kernel). ``out`` drifts
    below ``l`` when ``l`` is close to ``n`` (e.g. n=7, l=6 gives 4 bins).
    """
    if n < 1 or l < 1:
        raise ValueError(f"n and l must be positive, got n={n}, l={l}")
    k = math.ceil(n / l)
    return k, k, math.ceil(n / k)


def init_level_convs(config: SppConfig, rng: np.random.Generator, dtype=np.float32) -> list[ConvParams]:
    std = math.sqrt(2.0 / config.in_channels)
    convs = []
    for _ in config.levels:
        w = rng.standard_normal((config.reduced_channels, config.in_channels, 1, 1)) * std
        convs.append(ConvParams(Tensor(w.astype(dtype), True), Tensor(np.zeros(config.reduced_channels, dtype), True)))
    return convs


def spp_forward(feature: Tensor, config: SppConfig, level_convs: list[ConvParams]) -> Tensor:
    """Pool at every level, reduce channels, upsample and concatenate.

    Output channels are ``[feature, branch_1, ..., branch_L]``; spatial size
    is unchanged.
    """
    if feature.data.ndim != 4:
        raise ShapeError(f"spp input must be rank-4, got {feature.shape}")
    _, c, h, w = feature.shape
    if h != w:
        raise ShapeError(f"spp needs a square feature map, got height {h} and width {w}")
    if c != config.in_channels:
        raise ShapeError(f"spp input channel axis is {c}, config expects {config.in_channels}")
    if len(level_convs) != len(config.levels):
        raise ShapeError(f"{len(level_convs)} level convs for {len(config.levels)} levels")
    branches = [feature]
    for level, conv in zip(config.levels, level_convs):
        kernel, stride, _ = spp_bin_geometry(h, level)
        pooled = avg_pool_clipped(feature, kernel, stride)
        reduced = conv2d(pooled, conv)
        branches.append(bilinear_resize(reduced, h, w))
    return concat_channels(branches)
