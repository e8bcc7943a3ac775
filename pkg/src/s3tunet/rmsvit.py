"""Residual multi-branch-attention superpixel transformer (RM-SViT).

Tokens are the H*W positions of an N x C x H x W map. Super tokens start as
grid-cell means, are refined by soft association (softmax of scaled dot
products, optionally restricted to the 3x3 neighbouring cells), pass through
residual multi-head self-attention, and are mapped back onto the tokens
through the final association.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor, as_tensor


@dataclass
class RmSvitConfig:
    grid: tuple[int, int] = (8, 8)
    n_iter: int = 1
    heads: int = 4
    sparse: bool = True
    detach_iterations: bool = False

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"grid must be two positive ints, got {self.grid}")
        if self.n_iter < 0:
            raise ValueError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")


@dataclass
class SuperTokenState:
    S: Tensor               # N x m x C super-token features
    Q: Tensor | None        # N x n x m association, None before the first associate
    grid: tuple[int, int]   # cell size (h, w)
    cells: tuple[int, int]  # (H/h, W/w)
    iter: int = 0

    @property
    def m(self) -> int:
        return self.cells[0] * self.cells[1]


def supertoken_grid(height: int, width: int, grid) -> tuple[int, int]:
    """Number of cells along H and W; their product is the super-token count m."""
    h, w = grid
    if height % h or width % w:
        raise ValueError(f"grid {h}x{w} does not divide the {height}x{width} feature map")
    return height // h, width // w


def flatten_tokens(F) -> Tensor:
    """N x C x H x W -> N x (H*W) x C, row-major over positions."""
    F = as_tensor(F)
    n, c, h, w = F.shape
    return ops.transpose(ops.reshape(F, (n, c, h * w)), (0, 2, 1))


def neighborhood_mask(height: int, width: int, grid, sparse: bool = True) -> np.ndarray:
    """Boolean (n, m) mask: token i may associate with super token j.

    With ``sparse`` only the 3x3 block of cells around the token's own cell
    is allowed; otherwise every super token is.
    """
    gh, gw = supertoken_grid(height, width, grid)
    if not sparse:
        return np.ones((height * width, gh * gw), dtype=bool)
    ys, xs = np.divmod(np.arange(height * width), width)
    cy, cx = ys // grid[0], xs // grid[1]
    sy, sx = np.divmod(np.arange(gh * gw), gw)
    return (np.abs(cy[:, None] - sy[None, :]) <= 1) & (np.abs(cx[:, None] - sx[None, :]) <= 1)


def init_supertokens(F, grid) -> SuperTokenState:
    F = as_tensor(F)
    n, c, height, width = F.shape
    gh, gw = supertoken_grid(height, width, grid)
    h, w = grid
    cells = ops.reshape(F, (n, c, gh, h, gw, w)).mean(axis=(3, 5))
    S = ops.transpose(ops.reshape(cells, (n, c, gh * gw)), (0, 2, 1))
    return SuperTokenState(S=S, Q=None, grid=(h, w), cells=(gh, gw))


def associate(X, S_prev, mask=None) -> Tensor:
    """Q[i, j] = softmax_j(X_i . S_j / sqrt(C)) over the allowed super tokens."""
    X, S_prev = as_tensor(X), as_tensor(S_prev)
    d = X.shape[-1]
    logits = ops.mul(ops.matmul(X, ops.transpose(S_prev, (0, 2, 1))), 1.0 / np.sqrt(d))
    return ops.softmax(logits, axis=-1, mask=mask)


def update_supertokens(Q, X, S_prev=None) -> Tensor:
    """S = Q_hat^T X with Q_hat the column-normalised association.

    Columns with zero total mass keep the previous super token.
    """
    Q, X = as_tensor(Q), as_tensor(X)
    mass = Q.data.sum(axis=1)  # N x m
    empty = mass == 0.0
    col_sum = ops.sum(Q, axis=1)
    if empty.any():
        col_sum = ops.where(empty, 1.0, col_sum)
    S = ops.div(ops.matmul(ops.transpose(Q, (0, 2, 1)), X), ops.reshape(col_sum, mass.shape + (1,)))
    if empty.any():
        if S_prev is None:
            raise ValueError("a super token received no mass and no previous value was given")
        S = ops.where(empty[..., None], S_prev, S)
    return S


def token_upsample(Q, S_refined, height: int, width: int) -> Tensor:
    """X_out[i] = sum_j Q[i, j] S_refined[j], folded back to N x C x H x W."""
    out = ops.matmul(Q, S_refined)
    n, _, c = out.shape
    return ops.reshape(ops.transpose(out, (0, 2, 1)), (n, c, height, width))


class RMBA(Module):
    """Residual multi-head self-attention over super tokens.

    Q, K, V are linear maps of S; heads are concatenated, projected by a 1x1
    convolution over the super-token grid, added to S and layer-normalised.
    """

    def __init__(self, channels: int, heads: int, rng):
        super().__init__()
        if channels % heads:
            raise ValueError(f"heads={heads} does not divide channels={channels}")
        self.q = Linear(channels, channels, rng)
        # A key bias adds q.b to every score in a row, which softmax cancels.
        self.k = Linear(channels, channels, rng, bias=False)
        self.v = Linear(channels, channels, rng)
        self.proj = Conv2d(channels, channels, 1, rng)
        self.norm = LayerNorm(channels)
        self.heads = heads

    def forward(self, S, cells=None):
        return rmba(S, self, cells)


def rmba(S, weights: RMBA, cells=None) -> Tensor:
    S = as_tensor(S)
    n, m, c = S.shape
    heads = weights.heads
    if c % heads:
        raise ValueError(f"heads={heads} does not divide channels={c}")
    dh = c // heads
    gh, gw = cells if cells is not None else (m, 1)

    def split(t):
        return ops.transpose(ops.reshape(t, (n, m, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(weights.q(S)), split(weights.k(S)), split(weights.v(S))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ops.matmul(ops.softmax(scores, axis=-1), v)
    attn = ops.reshape(ops.transpose(attn, (0, 2, 1, 3)), (n, m, c))
    grid_map = ops.reshape(ops.transpose(attn, (0, 2, 1)), (n, c, gh, gw))
    projected = ops.transpose(ops.reshape(weights.proj(grid_map), (n, c, m)), (0, 2, 1))
    return weights.norm(ops.add(projected, S))


class RMSViT(Module):
    def __init__(self, channels: int, cfg: RmSvitConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.rmba = RMBA(channels, cfg.heads, rng)

    def forward(self, F, rng=None):
        return rm_svit_forward(F, self.cfg, self)


def rm_svit_forward(F, cfg: RmSvitConfig, weights: RMSViT, return_state: bool = False):
    F = as_tensor(F)
    height, width = F.shape[2:]
    state = init_supertokens(F, cfg.grid)
    X = flatten_tokens(F)
    mask = neighborhood_mask(height, width, cfg.grid, cfg.sparse)
    for _ in range(cfg.n_iter):
        Q = associate(X, state.S, mask)
        S = update_supertokens(Q, X, state.S)
        if cfg.detach_iterations:
            S = S.detach()
        state.Q, state.S, state.iter = Q, S, state.iter + 1
    state.Q = associate(X, state.S, mask)
    refined = rmba(state.S, weights.rmba, state.cells)
    out = token_upsample(state.Q, refined, height, width)
    return (out, state) if return_state else out
