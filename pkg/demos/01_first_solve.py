# %% [markdown]
# # Solving a small CVRP instance
#
# We sample a random instance, solve it with an untrained model, and compare
# against the exact dynamic-programming oracle. Nothing here needs a trained
# checkpoint; the point is to see the moving parts.

# %%
import numpy as np

from reld import exact_solve, init_params, keyed_rng, preset, rollout, solve
from reld.generate import GenConfig, sample_instance
from reld.vrp import validate_solution

inst = sample_instance(GenConfig(size_range=(10, 10), seed=3), keyed_rng(3))
print(f"{inst.n} customers, capacity {inst.capacity}, total demand {inst.demands.sum()}")

# %% [markdown]
# Two decoders of the same width: the plain attention baseline and the
# light-decoder variant with the identity residual, the query feed-forward
# block and the log-distance term switched on.

# %%
models = {}
for name in ("pomo", "reld"):
    cfg = preset(name, d_h=32, heads=4, layers=3, d_ff=64)
    models[name] = (cfg, init_params(cfg, keyed_rng(0)))

# %% [markdown]
# A greedy rollout starts one trajectory from each customer (K = N here).
# Every trajectory is a full feasible solution.

# %%
for name, (cfg, params) in models.items():
    batch = rollout(inst, params, cfg)
    costs = batch.costs[0]
    assert all(not validate_solution(inst, t.nodes) for t in batch.trajectories())
    print(f"{name:5s} K={batch.k} best={costs.min():.4f} mean={costs.mean():.4f} worst={costs.max():.4f}")

# %% [markdown]
# The exact oracle is practical up to 12 customers.

# %%
best = exact_solve(inst)
print("optimal", round(best.cost, 4), "routes", best.routes)

for name, (cfg, params) in models.items():
    for augment in (False, True):
        t = solve(inst, params, cfg, augment=augment)
        gap = 100 * (t.cost / best.cost - 1)
        print(f"{name:5s} augment={augment!s:5s} cost={t.cost:.4f} gap={gap:5.2f}%")

# %% [markdown]
# Even untrained, the distance term makes the light decoder lean toward
# nearby customers, which already gives short tours. The baseline without
# it behaves close to a random policy.

# %%
print("distance matrix row of the depot:", np.round(inst.distance_matrix()[0, 1:], 3))
