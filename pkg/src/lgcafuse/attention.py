"""Channel attention and the frequency-splitting attention-pooled downsampler.

The LGCA layer splits a feature map into its Gaussian-blurred low-frequency
half and the residual high-frequency half, concatenates them (doubling the
channel count), re-weights channels with a squeeze-and-excitation gate,
restores the channel count with a 1x1 convolution + ReLU, and average-pools.
Plain average/max pooling are kept alongside for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .conv import (
    ConvParams,
    GaussianKernel,
    avg_pool2d,
    conv2d,
    gaussian_blur,
    global_avg_pool,
    max_pool2d,
)
from .tensor import (
    Tensor,
    concat_channels,
    linear,
    relu,
    scale_channels,
    sigmoid,
    sub,
)

SE_REDUCTION = 16


class PoolingMode(str, Enum):
    LGCA = "lgca"
    AVERAGE = "average"
    MAX = "max"


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Weight init: U(-b, b) with b = sqrt(3 / fan_in)."""
    bound = np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zero_bias(c_out: int, dtype) -> Tensor:
    return Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True)


@dataclass
class SEBlockParams:
    """Squeeze-and-excitation gate over `channels` feature maps."""

    channels: int
    reduction: int
    w_reduce: Tensor  # (width, channels, 1, 1)
    b_reduce: Tensor
    w_expand: Tensor  # (channels, width, 1, 1)
    b_expand: Tensor

    @property
    def squeeze_width(self) -> int:
        return self.w_reduce.shape[0]

    def named_tensors(self, prefix: str):
        return [
            (f"{prefix}.w_reduce", self.w_reduce),
            (f"{prefix}.b_reduce", self.b_reduce),
            (f"{prefix}.w_expand", self.w_expand),
            (f"{prefix}.b_expand", self.b_expand),
        ]


def init_se_block(rng: np.random.Generator, channels: int, reduction: int = SE_REDUCTION,
                  dtype=np.float32) -> SEBlockParams:
    width = max(1, channels // reduction)
    return SEBlockParams(
        channels=channels,
        reduction=reduction,
        w_reduce=fan_in_uniform(rng, (width, channels, 1, 1), channels, dtype),
        b_reduce=_zero_bias(width, dtype),
        w_expand=fan_in_uniform(rng, (channels, width, 1, 1), width, dtype),
        b_expand=_zero_bias(channels, dtype),
    )


def se_forward(x: Tensor, p: SEBlockParams) -> Tensor:
    """Gate each channel by sigmoid(W2 relu(W1 gap(x))); output shape = input shape."""
    if x.shape[1] != p.channels:
        raise ValueError(f"se_forward: input has {x.shape[1]} channels, block expects {p.channels}")
    z = global_avg_pool(x)
    gate = sigmoid(linear(relu(linear(z, p.w_reduce, p.b_reduce)), p.w_expand, p.b_expand))
    return scale_channels(x, gate)


@dataclass
class LGCALayerParams:
    """One attention-pooled downsampling layer over `channels` feature maps."""

    channels: int
    se: SEBlockParams          # over the 2*channels concatenation
    restore: ConvParams        # 1x1 conv, 2*channels -> channels
    gaussian: GaussianKernel

    def named_tensors(self, prefix: str):
        return self.se.named_tensors(f"{prefix}.se") + [
            (f"{prefix}.restore.weight", self.restore.weight),
            (f"{prefix}.restore.bias", self.restore.bias),
        ]


def init_lgca_layer(rng: np.random.Generator, channels: int, dtype=np.float32) -> LGCALayerParams:
    c2 = 2 * channels
    se = init_se_block(rng, c2, dtype=dtype)
    restore = ConvParams(
        weight=fan_in_uniform(rng, (channels, c2, 1, 1), c2, dtype),
        bias=_zero_bias(channels, dtype),
        stride=1,
        padding=0,
    )
    return LGCALayerParams(channels=channels, se=se, restore=restore, gaussian=GaussianKernel())


def lgca_forward(x: Tensor, p: LGCALayerParams) -> Tensor:
    """Blur/residual split, SE gating, 1x1 restore + ReLU, 2x2 average pool.

    (n, C, h, w) -> (n, C, h/2, w/2); h and w must be even.
    """
    if x.shape[1] != p.channels:
        raise ValueError(f"lgca_forward: input has {x.shape[1]} channels, layer expects {p.channels}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"lgca_forward: spatial dims must be even, got {x.shape[2]}x{x.shape[3]}")
    low = gaussian_blur(x, p.gaussian)
    high = sub(x, low)
    cat = concat_channels(low, high)
    assert cat.shape[1] == 2 * p.channels
    gated = se_forward(cat, p.se)
    restored = relu(conv2d(gated, p.restore))
    assert restored.shape[1] == p.channels
    return avg_pool2d(restored)


def pool_dispatch(x: Tensor, mode: PoolingMode, params: LGCALayerParams | None = None) -> Tensor:
    """Route to the configured pooling; all modes halve h and w, keep channels."""
    mode = PoolingMode(mode)
    if mode is PoolingMode.LGCA:
        if params is None:
            raise ValueError("pool_dispatch: lgca mode needs layer parameters")
        return lgca_forward(x, params)
    if mode is PoolingMode.AVERAGE:
        return avg_pool2d(x)
    return max_pool2d(x)
