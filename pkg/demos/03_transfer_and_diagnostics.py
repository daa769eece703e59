"""
Transfer across topologies and what the hidden layers encode
============================================================

Train one model per topology plus a joint one, fill the cross-topology
transfer matrix, then look inside the joint model: error by load level,
error by bus degree, a PCA of the activations and a linear probe for total
load.
"""

import numpy as np

from opflab import diagnostics as dg
from opflab.dataset import fixture_path, load_case
from opflab.gnn import ModelConfig
from opflab.powerflow import build_dataset
from opflab.trainer import TrainConfig, finetune, train

data = {
    "case3": build_dataset(load_case(fixture_path("case3.json")), 150, seed=0),
    "case5": build_dataset(load_case(fixture_path("case5.json")), 200, seed=0),
    "case9": build_dataset(load_case(fixture_path("case9.m")), 200, seed=0),
}
model = ModelConfig("hgt", layers=2, hidden=16, heads=2)


def fit(topologies, steps=400):
    cfg = TrainConfig(topologies, "mse", model, steps=steps, batch_size=16, lr=3e-3, eval_every=steps)
    return train(cfg, data)[0]


checkpoints = {"case3": fit(("case3",)), "case5": fit(("case5",)), "joint": fit(("case3", "case5"))}

# %%
# Transfer matrix.  case9 is never seen in training, so its cells are
# zero-shot and use normalisation statistics fitted on case9 itself.
print("model   eval     opf_sol_err      viol  zero_shot")
for c in dg.transfer_matrix(checkpoints, data):
    print(f"{c.model:6s}  {c.eval_topology:6s} {c.opf_sol_err:12.5f} {c.viol:9.5f}  {c.zero_shot}")

# a short fine-tune on case9 usually closes most of the zero-shot gap
tuned, log = finetune(checkpoints["joint"], data["case9"],
                      TrainConfig(("case9",), "mse", model, steps=200, batch_size=16, lr=3e-3, eval_every=50))
print("fine-tune on case9:", [(r["step"], round(r["viol_total"], 5)) for r in log.records])

# %%
# Error by load level and by bus degree on case9.
for row in dg.load_stratified_error(tuned, data["case9"], n_bins=4, split="train"):
    print(f"load {row['lo']:.3f}-{row['hi']:.3f}: n={row['count']:3d} error {row['mean_error']:.5f}")
deg = dg.degree_error_correlation(tuned, data["case9"], split="train")
print("degree / error correlation:", round(deg["pearson_r"], 3))

# %%
# PCA of the last hidden layer and a per-layer probe for total load.
pc = dg.activation_pca(tuned, data["case9"], k=2, split="train")
print("explained variance ratio:", np.round(pc["explained_ratio"], 3))
print("corr(PC1, total load):", round(dg.pearson_r(pc["projections"][:, 0], pc["total_load"]), 3))
acts, load = dg.collect_activations(tuned, data["case9"], split="train")
print("probe R^2 per layer:", np.round(dg.linear_probe(acts, load), 3))
