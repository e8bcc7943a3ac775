"""Structured convolution blocks: DropBlock, LKA, scalable ReLU, DWF-Conv and D2BR-Conv."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .nn import BatchNorm2d, Conv2d, Module, Parameter
from .tensor import Tensor, as_tensor

RELU_SCALE_FLOOR = 1e-3


@dataclass
class DropBlockParams:
    block_size: int = 7
    drop_prob: float = 0.1
    training: bool = True

    def __post_init__(self):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError(f"block_size must be an odd positive int, got {self.block_size}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")


def dropblock_mask(shape, block_size: int, drop_prob: float, rng: np.random.Generator,
                   return_seeds: bool = False):
    """Sample a keep-mask (1 = keep) of NCHW ``shape``.

    Block seeds are drawn on an (H+bs-1) x (W+bs-1) grid; the seed at (a, b)
    zeroes map rows a-bs+1..a and columns b-bs+1..b, clipped to the map. Every
    pixel is then covered by exactly bs^2 seed positions, so with seed rate
    drop_prob / bs^2 each pixel is dropped with probability ~drop_prob,
    uniformly over the map including its borders.
    """
    n, c, h, w = shape
    bs = block_size
    gamma = drop_prob / (bs * bs)
    seeds = rng.random((n, c, h + bs - 1, w + bs - 1)) < gamma
    rows = sliding_window_view(seeds, bs, axis=2).any(axis=-1)
    blocked = sliding_window_view(rows, bs, axis=3).any(axis=-1)
    mask = (~blocked).astype(np.float64)
    return (mask, seeds) if return_seeds else mask


def dropblock(x, p: DropBlockParams, rng: np.random.Generator | None = None) -> Tensor:
    """Zero square regions per channel and rescale survivors by total / kept."""
    x = as_tensor(x)
    h, w = x.shape[2:]
    if p.block_size > min(h, w):
        raise ValueError(f"block_size {p.block_size} exceeds feature map size {h}x{w}")
    if not p.training or p.drop_prob == 0.0:
        return x
    if rng is None:
        raise ValueError("dropblock in training mode needs a random generator")
    mask = dropblock_mask(x.shape, p.block_size, p.drop_prob, rng)
    kept = mask.sum()
    scale = mask * (mask.size / kept) if kept > 0 else mask
    return ops.mul(x, scale)


def scalable_relu(x, scale) -> Tensor:
    """``scale[c] * max(0, x[n, c, h, w])``."""
    x, scale = as_tensor(x), as_tensor(scale)
    if scale.shape != (x.shape[1],):
        raise ops.ShapeError(f"scalable_relu: scale {scale.shape} does not match {x.shape[1]} channels")
    return ops.mul(ops.relu(x), ops.reshape(scale, (1, -1, 1, 1)))


def lka(x, dw_w, dw_b, dil_w, dil_b, pw_w, pw_b) -> Tensor:
    """Large-kernel attention: x * PW1x1(DW7x7,d=3(DW5x5(x)))."""
    x = as_tensor(x)
    c = x.shape[1]
    attn = ops.conv2d(x, dw_w, dw_b, pad=2, groups=c)
    attn = ops.conv2d(attn, dil_w, dil_b, pad=9, dilation=3, groups=c)
    attn = ops.conv2d(attn, pw_w, pw_b)
    return ops.mul(x, attn)


class DropBlock(Module):
    def __init__(self, block_size=7, drop_prob=0.1):
        super().__init__()
        self.params = DropBlockParams(block_size, drop_prob)

    def forward(self, x, rng=None):
        p = DropBlockParams(self.params.block_size, self.params.drop_prob, self.training)
        return dropblock(x, p, rng)


class LKA(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.dw = Conv2d(channels, channels, 5, rng, groups=channels)
        self.dw_dilated = Conv2d(channels, channels, 7, rng, dilation=3, groups=channels)
        self.pw = Conv2d(channels, channels, 1, rng)

    def forward(self, x):
        return lka(x, self.dw.w, self.dw.b, self.dw_dilated.w, self.dw_dilated.b,
                   self.pw.w, self.pw.b)


class ScalableReLU(Module):
    def __init__(self, channels):
        super().__init__()
        self.scale = Parameter(np.ones(channels), min_value=RELU_SCALE_FLOOR)

    def forward(self, x):
        return scalable_relu(x, self.scale)


class DWFConv(Module):
    """[conv3x3 -> BN -> scalable ReLU -> LKA x lka_repeats] applied twice."""

    def __init__(self, in_ch, out_ch, rng, lka_repeats=1):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.act1 = ScalableReLU(out_ch)
        self.lka1 = [LKA(out_ch, rng) for _ in range(lka_repeats)]
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.act2 = ScalableReLU(out_ch)
        self.lka2 = [LKA(out_ch, rng) for _ in range(lka_repeats)]
        self.in_ch = in_ch

    def forward(self, x, rng=None):
        _check_channels(x, self.in_ch, "DWF-Conv")
        for conv, bn, act, lkas in ((self.conv1, self.bn1, self.act1, self.lka1),
                                    (self.conv2, self.bn2, self.act2, self.lka2)):
            x = act(bn(conv(x)))
            for layer in lkas:
                x = layer(x)
        return x


class D2BRConv(Module):
    """[conv3x3 -> DropBlock -> BN -> ReLU] applied twice."""

    def __init__(self, in_ch, out_ch, rng, block_size=7, drop_prob=0.1):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, bias=False)
        self.drop1 = DropBlock(block_size, drop_prob)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.drop2 = DropBlock(block_size, drop_prob)
        self.bn2 = BatchNorm2d(out_ch)
        self.in_ch = in_ch

    def forward(self, x, rng=None):
        _check_channels(x, self.in_ch, "D2BR-Conv")
        x = ops.relu(self.bn1(self.drop1(self.conv1(x), rng)))
        return ops.relu(self.bn2(self.drop2(self.conv2(x), rng)))


class DoubleConv(Module):
    """Plain U-Net block, [conv3x3 -> BN -> ReLU] twice; used by ablation baselines."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.in_ch = in_ch

    def forward(self, x, rng=None):
        _check_channels(x, self.in_ch, "DoubleConv")
        x = ops.relu(self.bn1(self.conv1(x)))
        return ops.relu(self.bn2(self.conv2(x)))


def _check_channels(x, expected, block):
    if x.ndim != 4 or x.shape[1] != expected:
        raise ops.ShapeError(f"{block}: expected N x {expected} x H x W input, got {x.shape}")
