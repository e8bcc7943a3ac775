"""Spatial-shift MLP skip connector with split attention.

Channel-last tensors (N x H x W x C) are used inside the link. The shift
schedules treat axis 1 and axis 2 exactly as the slice patterns name them:
each channel quarter copies a one-step-offset slice onto itself, and the
boundary line that receives nothing keeps its original value.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import Linear, Module
from .tensor import Tensor, as_tensor, make_result

_TO_LOW = (slice(None, -1), slice(1, None))   # dest[:L-1] <- src[1:]
_TO_HIGH = (slice(1, None), slice(None, -1))  # dest[1:] <- src[:L-1]

# (axis, (dest, src)) for the four channel quarters
SS1_SCHEDULE = ((1, _TO_LOW), (1, _TO_HIGH), (2, _TO_LOW), (2, _TO_HIGH))
SS2_SCHEDULE = ((2, _TO_LOW), (2, _TO_HIGH), (1, _TO_LOW), (1, _TO_HIGH))


def channel_quarters(c: int, strict: bool = True) -> list[slice]:
    """Slices for the four channel groups; floor boundaries when not strict."""
    if strict and c % 4:
        raise ValueError(f"spatial shift needs channels divisible by 4, got {c}")
    b = [0, c // 4, c // 2, 3 * c // 4, c]
    return [slice(b[i], b[i + 1]) for i in range(4)]


def _index(axis, spatial, chans):
    idx = [slice(None)] * 4
    idx[axis] = spatial
    idx[3] = chans
    return tuple(idx)


def _spatial_shift(x, schedule, strict: bool) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ops.ShapeError(f"spatial shift expects N x H x W x C, got {x.shape}")
    quarters = channel_quarters(x.shape[3], strict)
    moves = [(_index(axis, dest, q), _index(axis, src, q))
             for q, (axis, (dest, src)) in zip(quarters, schedule)]
    out = x.data.copy()
    overwritten = np.zeros(x.shape, dtype=bool)
    for dest, src in moves:
        out[dest] = x.data[src]
        overwritten[dest] = True

    def backward(g):
        gx = np.where(overwritten, 0.0, g)
        for dest, src in moves:
            gx[src] += g[dest]
        return (gx,)

    return make_result(out, (x,), backward)


def spatial_shift_ss1(x, strict: bool = True) -> Tensor:
    return _spatial_shift(x, SS1_SCHEDULE, strict)


def spatial_shift_ss2(x, strict: bool = True) -> Tensor:
    return _spatial_shift(x, SS2_SCHEDULE, strict)


class SplitAttention(Module):
    def __init__(self, channels: int, rng, k: int = 3):
        super().__init__()
        hidden = max(1, channels // 2)
        self.mlp_a1 = Linear(channels, hidden, rng)
        self.mlp_a2 = Linear(hidden, k * channels, rng)
        self.k = k

    def forward(self, parts):
        return split_attention(parts, self)


def split_attention(parts, weights: SplitAttention, return_weights: bool = False):
    """Fuse k branches with per-channel softmax weights from a pooled MLP.

    ``parts`` is a list of k tensors of shape N x n x C, or one N x k x n x C
    tensor. Returns the N x n x C weighted sum (and the N x k x C weights).
    """
    if isinstance(parts, (list, tuple)):
        shapes = {as_tensor(p).shape for p in parts}
        if len(shapes) != 1:
            raise ops.ShapeError(f"split attention parts differ in shape: {sorted(shapes)}")
        stacked = ops.stack(parts, axis=1)
    else:
        stacked = as_tensor(parts)
    if stacked.ndim != 4:
        raise ops.ShapeError(f"split attention expects N x k x n x C, got {stacked.shape}")
    n, k, _, c = stacked.shape
    if k != weights.k:
        raise ops.ShapeError(f"split attention built for k={weights.k}, got {k} parts")
    pooled = ops.mean(stacked, axis=(1, 2))
    hat = weights.mlp_a2(ops.gelu(weights.mlp_a1(pooled)))
    bar = ops.softmax(ops.reshape(hat, (n, k, c)), axis=1)
    out = ops.sum(ops.mul(stacked, ops.reshape(bar, (n, k, 1, c))), axis=1)
    return (out, bar) if return_weights else out


class S2MLPLink(Module):
    """mlp1 (C -> 3C) -> [SS1, SS2, identity] -> split attention -> mlp2 (C -> C)."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.mlp1 = Linear(channels, 3 * channels, rng)
        self.attn = SplitAttention(channels, rng, k=3)
        self.mlp2 = Linear(channels, channels, rng)
        self.channels = channels

    def forward(self, x, rng=None):
        return s2_mlp_link_forward(x, self)


def s2_mlp_link_forward(x, params: S2MLPLink) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ops.ShapeError(f"S2-MLP link built for {params.channels} channels, got {x.shape}")
    n, c, h, w = x.shape
    # Quarter boundaries fall back to floor division for widths not divisible by 4.
    strict = c % 4 == 0
    expanded = params.mlp1(ops.transpose(x, (0, 2, 3, 1)))
    f1 = spatial_shift_ss1(expanded[..., :c], strict)
    f2 = spatial_shift_ss2(expanded[..., c:2 * c], strict)
    f3 = expanded[..., 2 * c:]
    parts = ops.reshape(ops.stack([f1, f2, f3], axis=1), (n, 3, h * w, c))
    fused = params.mlp2(split_attention(parts, params.attn))
    return ops.transpose(ops.reshape(fused, (n, h, w, c)), (0, 3, 1, 2))
