"""Dense, soft-MoE and sparse-MoE heads trained on the same synthetic clusters.

The heads have roughly matched parameter counts; the table mirrors the
accuracy / epoch-to-threshold layout (M_A, ETT, V_A, ETT).  Takes ~10 s.
"""

# %%
import numpy as np

from moe_lab import ModelConfig, TrainConfig, build, normalize, split, synth_clusters, train

ds = synth_clusters(seed=0, classes=4, clusters_per_class=2, dim=16, n_per_class=200, spread=0.8)
tr, va, te = normalize(*split(ds, (0.7, 0.15, 0.15), seed=0))
print(f"train {len(tr)}  val {len(va)}  test {len(te)}")

# %%
shared = dict(input_dim=16, backbone_hidden=(32,), feature_dim=32, num_classes=4)
heads = {
    "dense": dict(head="dense", dense_hidden=72),
    "soft": dict(head="soft", num_experts=8, expert_hidden=8),
    "sparse": dict(head="sparse", num_experts=8, expert_hidden=8, k=2),
}
results = {}
for name, head in heads.items():
    model = build(ModelConfig(**shared, **head))
    results[name] = (model, train(model, tr, va, TrainConfig(epochs=30, batch_size=32)))

print(f"\n{'head':8s}{'params':>8s}{'M_A':>8s}{'ETT':>5s}{'V_A':>8s}{'ETT':>5s}")
for name, (model, m) in results.items():
    s = m.summary
    print(f"{name:8s}{model.head_param_count:8d}{100 * s['M_A']:8.2f}{s['ETT_M_A']:5d}"
          f"{100 * s['V_A']:8.2f}{s['ETT_V_A']:5d}")

# %% How evenly did the sparse gate spread the work?
util = results["sparse"][1].rows[-1].utilization
entropy = -(util * np.log(util)).sum()
print("\nsparse utilisation", np.round(util, 3))
print(f"entropy {entropy:.3f} of max ln 8 = {np.log(8):.3f}")
