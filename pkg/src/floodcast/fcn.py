"""Convolutional branch: three temporal conv blocks (conv -> batch norm ->
ReLU), one dropout after the last block, then global average pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node, Rng
from .errors import ConfigurationError, DimensionError

BN_MOMENTUM = 0.99
BN_EPSILON = 0.001


@dataclass
class ConvBlockParams:
    kernels: Node   # (C_out, C_in, K)
    bias: Node      # (C_out,)
    bn_gamma: Node  # (C_out,)
    bn_beta: Node   # (C_out,)
    bn_state: BatchNormState

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    def trainable(self) -> tuple[Node, ...]:
        return (self.kernels, self.bias, self.bn_gamma, self.bn_beta)


def init_conv_block(c_in: int, c_out: int, kernel_size: int, rng: Rng) -> ConvBlockParams:
    scale = 1.0 / math.sqrt(c_in * kernel_size)
    return ConvBlockParams(
        kernels=Node(rng.normal((c_out, c_in, kernel_size), scale=scale)),
        bias=Node(np.zeros(c_out)),
        bn_gamma=Node(np.ones(c_out)),
        bn_beta=Node(np.zeros(c_out)),
        bn_state=BatchNormState.initial(c_out),
    )


def conv_block(params: ConvBlockParams, x: Node, mode: str) -> Node:
    """conv -> batch norm (momentum 0.99, epsilon 0.001) -> ReLU."""
    y = ad.conv1d(x, params.kernels, params.bias)
    if y.data.ndim == 2:
        y = ad.reshape(y, (1,) + y.shape)
    s = ad.batchnorm(y, params.bn_gamma, params.bn_beta, params.bn_state,
                     mode, BN_MOMENTUM, BN_EPSILON)
    return ad.relu(s)


def global_avg_pool(x: Node) -> Node:
    """Mean over the time axis: (B, C, T) -> (B, C)."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects (B, C, T), got {x.shape}")
    if x.shape[2] == 0:
        raise DimensionError("global_avg_pool: empty time axis")
    return ad.mean_axis(x, axis=2)


def dropout(x: Node, rate: float, mode: str, rng: Rng | None = None) -> Node:
    """Inverted dropout: train mode zeroes entries with probability ``rate``
    and scales survivors by 1/(1-rate); infer mode is the identity."""
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if mode != "train":
        raise ConfigurationError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ConfigurationError("dropout in train mode needs an Rng")
    mask = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return ad.mul_const(x, mask)
