# %% [markdown]
# # Embeddings from a larger graph
#
# Extra random customers are encoded together with each instance but are
# never visited. If decoding leans mostly on the static embeddings, the tours
# should survive this perturbation. Uses the cached desk checkpoint when the
# acceptance run has produced one, else a quickly trained small model.

# %%
import json
from pathlib import Path

from reld import TrainConfig, extension_probe, load_checkpoint, preset, read_instances, train
from reld.generate import GenConfig

ROOT = Path(__file__).resolve().parents[1]
cached = sorted((ROOT / "tests" / ".cache").glob("desk-*/epoch*.ckpt"))
if cached:
    ck = load_checkpoint(cached[-1])
    cfg, params = ck.cfg, ck.params
    print("using", cached[-1].relative_to(ROOT))
else:
    cfg = preset("reld", d_h=32, heads=4, layers=2, d_ff=64)
    params = train(TrainConfig(epochs=2, instances_per_epoch=640, gen=GenConfig(size_range=(10, 20))), cfg).params

# %%
insts = read_instances(ROOT / "data" / "heldout_cvrp10.jsonl")[:30]
refs = [json.loads(l)["cost"] for l in (ROOT / "data" / "heldout_cvrp10_refs.jsonl").read_text().splitlines()][:30]

for delta, rep in extension_probe(params, cfg, insts, [0.0, 0.5, 1.0], references=refs).items():
    print(f"delta={delta:<4g} {rep.summary()}")
