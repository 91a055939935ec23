# %% [markdown]
# # A short training run
#
# REINFORCE with the shared mean baseline on CVRP10-20. The defaults here
# take a few minutes; pass a larger epoch count to get closer to the desk
# preset (configs/desk.yaml, about half an hour).
#
#     python demos/03_short_training.py [epochs]

# %%
import json
import sys
from pathlib import Path

import numpy as np

from reld import TrainConfig, evaluate, init_params, keyed_rng, preset, read_instances, train
from reld.generate import GenConfig, TriangularRoute

ROOT = Path(__file__).resolve().parents[1]
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 4

model = preset("reld", d_h=64, heads=8, layers=3, d_ff=256)
cfg = TrainConfig(
    epochs=epochs,
    instances_per_epoch=1280,
    batch_size=32,
    learning_rate=1e-3,
    lr_decay_epochs=(),
    seed=1,
    gen=GenConfig(size_range=(10, 20), capacity_mode=TriangularRoute(3, 6, 25)),
)

# %% [markdown]
# The held-out set has exact reference costs, so gaps are to the optimum.

# %%
heldout = read_instances(ROOT / "data" / "heldout_cvrp10.jsonl")[:50]
refs = [json.loads(l)["cost"] for l in (ROOT / "data" / "heldout_cvrp10_refs.jsonl").read_text().splitlines()][:50]

before = evaluate(init_params(model, keyed_rng(cfg.seed, 0)), model, heldout, references=refs)
print("untrained:", before.summary())

# %%
report = train(cfg, model)

# %%
after = evaluate(report.params, model, heldout, references=refs)
print("trained:  ", after.summary())
costs = [e.mean_cost for e in report.epochs]
print("training mean cost per epoch:", np.round(costs, 3))
