"""Walk through one refinement of the super-token attention block on a toy map.

Builds an 8x8 feature map with a bright square in one corner, pools it into
a 2x2 grid of super tokens, then shows how the sparse association, the
column-normalised update and the token upsampling move information around.

    python3 demos/supertoken_walkthrough.py
"""

import numpy as np

from s3tunet.rmsvit import (RMSViT, RmSvitConfig, associate, flatten_tokens, init_supertokens,
                            neighborhood_mask, rm_svit_forward, token_upsample, update_supertokens)

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

C, H, W = 4, 8, 8
F = 0.1 * rng.standard_normal((1, C, H, W))
F[:, :, :3, :3] += 1.0  # bright patch in the top-left cell

cfg = RmSvitConfig(grid=(4, 4), n_iter=1, heads=2)
S0 = init_supertokens(F, cfg.grid).S
print("initial super tokens (cell means), one row per cell:")
print(S0.data[0])

X = flatten_tokens(F)
mask = neighborhood_mask(H, W, cfg.grid, cfg.sparse)
Q = associate(X, S0, mask)
print("\nassociation of pixel (0, 0) and pixel (7, 7) with the four super tokens:")
print(Q.data[0, [0, H * W - 1]])

S1 = update_supertokens(Q, X, S0)
print("\nshift of each super token after one update:")
print(np.linalg.norm(S1.data[0] - S0.data[0], axis=1))

back = token_upsample(Q, S1, H, W)
print("\nchannel 0 after mapping super tokens back to pixels:")
print(back.data[0, 0])

block = RMSViT(C, cfg, rng)
out, state = rm_svit_forward(F, cfg, block, return_state=True)
print(f"\nfull block: {state.m} super tokens, output shape {out.shape}, "
      f"rows of Q sum to 1 within {np.abs(state.Q.data.sum(-1) - 1).max():.1e}")
