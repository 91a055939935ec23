# %% [markdown]
# # Inside one decoding step
#
# The decoder turns the current context (last node, remaining capacity) into
# a distribution over the next node. This script takes one step apart and
# checks the attention output against a hand-written per-head sum.

# %%
import math

import numpy as np

from reld import init_params, keyed_rng
from reld.generate import GenConfig, sample_instance
from reld.model import ModelConfig, decode_step, encode
from reld.vrp import RolloutState, apply_move, feasible_mask

cfg = ModelConfig(d_h=32, heads=4, layers=2, d_ff=64)
params = init_params(cfg, keyed_rng(1))
inst = sample_instance(GenConfig(size_range=(8, 8), seed=5), keyed_rng(5))

emb = encode(inst, params, cfg)
state = apply_move(inst, apply_move(inst, RolloutState.initial(inst), 3), 6)
mask = feasible_mask(inst, state)
print("at node", state.last_node, "with capacity", state.remaining_capacity, "feasible:", np.flatnonzero(mask))

# %%
probs, out = decode_step(emb, state, inst, params, cfg, details=True)
print("probabilities:", np.round(probs, 3))

# %% [markdown]
# The same attention output, written as a double loop over heads and
# feasible nodes.

# %%
H = emb.H.data[0]
a = params.arrays()
dk = cfg.d_h // cfg.heads
hc = np.append(H[state.last_node], state.remaining_capacity)
glimpse = np.zeros(cfg.d_h)
feasible = np.flatnonzero(mask)
for s in range(cfg.heads):
    cols = slice(s * dk, (s + 1) * dk)
    q = hc @ a["dec.Wq"][:, cols]
    scores = np.array([q @ (H[i] @ a["dec.Wk"][:, cols]) for i in feasible]) / math.sqrt(dk)
    u = np.exp(scores - scores.max())
    u /= u.sum()
    for ui, i in zip(u, feasible):
        glimpse += ui * (H[i] @ a["dec.Wv"][:, cols]) @ a["dec.Wo"][cols, :]

print("max difference:", np.abs(out.glimpse.data.reshape(-1) - glimpse).max())

# %% [markdown]
# Each decoder option in isolation: how far does the distribution move
# when one flag is flipped with everything else fixed?

# %%
for flag in ("use_idt", "use_ff_query", "use_dist_heuristic"):
    other = ModelConfig(**{**cfg.to_dict(), flag: False})
    p2 = init_params(other, keyed_rng(1))
    q = decode_step(encode(inst, p2, other), state, inst, p2, other)
    tv = 0.5 * np.abs(q - probs).sum()
    print(f"without {flag:18s} total variation {tv:.3f}")
