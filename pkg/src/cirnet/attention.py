"""Spatial and channel attention and the self-modality refinement unit.

``SmarUnit`` builds a rank-1 spatial-channel attention tensor (CA column times
SA row), multiplies it into its input, adds the input back, and convolves.
The ``mode`` switch swaps the 3D tensor for the ablation variants.
"""
from __future__ import annotations

import numpy as np

from .nn_ops import ConvBnRelu, Module, channel_max, channel_mean, fan_in_uniform, global_avg_pool, linear, relu, sigmoid
from .tensor import Tensor, add, concat_channels, matmul, mul, reshape

SMAR_MODES = ("3d", "ca_only", "sa_only", "sa_ca", "no_residual")


class SpatialAttention(Module):
    """sigmoid(conv3x3([mean_c(x), max_c(x)])) -> (N, 1, H, W)."""

    def __init__(self, rng: np.random.Generator | None = None, zero: bool = False):
        self.conv = ConvBnRelu(2, 1, 3, bn=False, activation="none", rng=rng, zero=zero)

    def logits(self, x: Tensor) -> Tensor:
        return self.conv(concat_channels([channel_mean(x), channel_max(x)]))

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))


class ChannelAttention(Module):
    """Squeeze-excitation gate: sigmoid(fc2(relu(fc1(gap(x))))) -> (N, C, 1, 1)."""

    def __init__(self, channels: int, reduction: int = 4,
                 rng: np.random.Generator | None = None, zero: bool = False):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.channels, self.reduction = channels, reduction
        if zero or rng is None:
            w1, w2 = np.zeros((hidden, channels)), np.zeros((channels, hidden))
        else:
            w1 = fan_in_uniform(rng, (hidden, channels), channels)
            w2 = fan_in_uniform(rng, (channels, hidden), hidden)
        self.fc1 = Tensor(w1, requires_grad=True)
        self.fc2 = Tensor(w2, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        if c != self.channels:
            raise ValueError(f"ChannelAttention expects {self.channels} channels, got {c}")
        squeezed = reshape(global_avg_pool(x), (n, c))
        gate = linear(relu(linear(squeezed, self.fc1)), self.fc2)
        return reshape(sigmoid(gate), (n, c, 1, 1))


def spatial_attention(x: Tensor, sa: SpatialAttention) -> Tensor:
    return sa(x)


def channel_attention(x: Tensor, ca: ChannelAttention) -> Tensor:
    return ca(x)


def combine_3d(ca_map: Tensor, sa_map: Tensor) -> Tensor:
    """Per batch item, the (C x 1) by (1 x HW) product reshaped to (N, C, H, W)."""
    n, c = ca_map.shape[:2]
    h, w = sa_map.shape[2:]
    col = reshape(ca_map, (n, c, 1))
    row = reshape(sa_map, (n, 1, h * w))
    return reshape(matmul(col, row), (n, c, h, w))


def attention_3d(x: Tensor, sa: SpatialAttention, ca: ChannelAttention) -> Tensor:
    return combine_3d(ca(x), sa(x))


class SmarUnit(Module):
    def __init__(self, channels: int, reduction: int = 4, mode: str = "3d",
                 rng: np.random.Generator | None = None):
        if mode not in SMAR_MODES:
            raise ValueError(f"unknown smAR mode {mode!r}; expected one of {SMAR_MODES}")
        self.channels = channels
        self.mode = mode
        self.sa = SpatialAttention(rng)
        self.ca = ChannelAttention(channels, reduction, rng)
        self.out_conv = ConvBnRelu(channels, channels, 3, rng=rng)

    def pre_conv(self, x: Tensor) -> Tensor:
        """The attended-plus-residual tensor that feeds ``out_conv``."""
        if x.shape[1] != self.channels:
            raise ValueError(f"smAR expects {self.channels} channels, got {x.shape[1]}")
        if self.mode == "sa_ca":
            xs = mul(x, self.sa(x))
            return add(mul(xs, self.ca(xs)), x)
        if self.mode == "ca_only":
            att = self.ca(x)
        elif self.mode == "sa_only":
            att = self.sa(x)
        else:
            att = attention_3d(x, self.sa, self.ca)
        attended = mul(att, x)
        return attended if self.mode == "no_residual" else add(attended, x)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.out_conv(self.pre_conv(x), training)


def smar_refine(x: Tensor, unit: SmarUnit, training: bool = False) -> Tensor:
    return unit(x, training)
