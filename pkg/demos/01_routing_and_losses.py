"""Routing and load balancing, one piece at a time.

Run with ``python3 demos/01_routing_and_losses.py``.
"""

# %% Soft routing mixes every expert
import numpy as np

from moe_lab import autodiff as ad
from moe_lab import moe
from moe_lab.autodiff import Tensor
from moe_lab.rng import Rng

logits = np.array([[3.0, 1.0, 2.0]])
print("softmax weights      ", np.round(ad.softmax(Tensor(logits)).data, 4))

# %% Top-k keeps the k largest logits and renormalises over them only
sel, w = moe.topk_weights(logits, k=2)
print("top-2 experts        ", sel[0], "weights", np.round(w[0], 4))

# %% The noisy gate standardises its logits, then adds softplus-scaled noise while training
rng = Rng(0, "demo")
h = rng.normal((6, 5))
w_gate, b_gate, w_noise = rng.normal((5, 4)), np.zeros(4), 0.5 * rng.normal((5, 4))
train_route = moe.gate_noisy_topk(h, w_gate, b_gate, w_noise, k=2, rng=Rng(1), training=True)
eval_route = moe.gate_noisy_topk(h, w_gate, b_gate, w_noise, k=2)
print("selected (train)     ", train_route.decision.selected.tolist())
print("selected (eval)      ", eval_route.decision.selected.tolist())

# %% Balancing losses: KL to uniform, CV^2 of importance, CV^2 of smooth load
collapsed = np.array([[1.0, 0, 0, 0]] * 4)
print("KL(collapsed)        ", moe.loss_kl_uniform(collapsed).item(), "= ln 4 =", np.log(4))
print("importance(collapsed)", moe.loss_importance(collapsed).item())
print("importance(balanced) ", moe.loss_importance(np.full((4, 4), 0.25)).item())
r = train_route
print("load loss            ", moe.loss_load(r.clean, r.noise_std, r.noisy, 2).item())

# %% The load term is a probability: re-drawing one expert's noise reproduces it
p = moe.load_probabilities(r.clean, r.noise_std, r.noisy, 2).data[0]
draws = np.repeat(r.noisy.data[:1], 50_000, axis=0)
draws[:, 0] = r.clean.data[0, 0] + r.noise_std.data[0, 0] * Rng(2).normal(50_000)
print(f"P(expert 0 in top-2) analytic {p[0]:.4f}  monte carlo "
      f"{(moe.select_topk(draws, 2) == 0).any(axis=1).mean():.4f}")
