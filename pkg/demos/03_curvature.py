"""Sharpness of a trained sparse MoE: lambda_max, Hessian trace and an eigen-sweep.

Hessian-vector products are forward-over-reverse; the Hessian is never built.
The sweep re-runs the gate at every point, so it also counts routing flips.
"""

# %%
import numpy as np

from moe_lab import ModelConfig, TrainConfig, build, normalize, split, synth_clusters, train
from moe_lab import curvature

ds = synth_clusters(seed=0, classes=4, clusters_per_class=2, dim=16, n_per_class=200, spread=0.8)
tr, va, te = normalize(*split(ds, (0.7, 0.15, 0.15), seed=0))
model = build(ModelConfig(input_dim=16, backbone_hidden=(32,), feature_dim=32, head="sparse",
                          num_experts=8, expert_hidden=8, k=2, num_classes=4))
metrics = train(model, tr, va, TrainConfig(epochs=30, batch_size=32))
model = model.with_params(metrics.best_params)

# %%
for part in (tr, te):
    rep = curvature.analyze(model, part, samples=50, alphas=np.linspace(-1, 1, 11))
    print(f"{part.split:5s} lambda_max {rep.lambda_max:9.4f} ({rep.lambda_iters} iters)   "
          f"trace {rep.trace:9.3f} +- {rep.trace_stderr:.3f}")

# %% Loss and routing along the dominant eigenvector (last split analysed)
# The weights minimise the *training* loss, so on the test split the sweep need
# not bottom out at alpha = 0; the flip column shows where routing changes.
print(f"\n{'alpha':>7s}{'loss':>10s}{'flips':>7s}")
for alpha, loss, flips in rep.sweep:
    print(f"{alpha:7.2f}{loss:10.4f}{flips:7d}")
