"""Gating, expert combination and load-balancing losses.

Three routing modes are supported:

* ``soft``: every expert is evaluated and mixed with ``softmax(h @ W_g + b_g)``.
* ``sparse``: noisy top-k.  Gate logits are standardised per input (zero
  mean, unit variance across experts) before noise ``eps * softplus(h @ W_noise)``
  is added in training mode.  The k largest noisy logits are kept and
  renormalised with a softmax; only those experts run.
* ``hard``: sparse routing with ``k = 1``.

The top-k choice is a constant of the graph: gradients reach the gate only
through the kept softmax weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InternalError, NumericError, UsageError

STD_EPS = 1e-6
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class GateDecision:
    """Routing outcome for a batch; every array has a leading batch axis.

    ``clean_logits`` are the logits noise is added to (standardised in
    sparse/hard mode).  ``weights`` is zero outside ``selected``.
    """

    mode: str
    clean_logits: np.ndarray
    noise_std: np.ndarray | None
    noisy_logits: np.ndarray
    selected: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.weights.shape[0]

    @property
    def num_experts(self) -> int:
        return self.weights.shape[1]

    def selected_sets(self):
        return [frozenset(row.tolist()) for row in self.selected]


class Routing(NamedTuple):
    """A :class:`GateDecision` plus the differentiable tensors behind it."""

    decision: GateDecision
    weights: Tensor
    kept: Tensor
    clean: Tensor
    noise_std: Tensor | None
    noisy: Tensor


def select_topk(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    values = np.atleast_2d(values)
    return np.argsort(-values, axis=-1, kind="stable")[:, :k]


def topk_weights(noisy_logits, k: int):
    """Selected experts and renormalised combination weights for given logits."""
    z = np.atleast_2d(np.asarray(noisy_logits, dtype=np.float64))
    if not 1 <= k <= z.shape[1]:
        raise ConfigError(f"k={k} must lie in [1, {z.shape[1]}]")
    sel = select_topk(z, k)
    rows = np.arange(z.shape[0])[:, None]
    kept = z[rows, sel]
    e = np.exp(kept - kept.max(axis=1, keepdims=True))
    w = np.zeros_like(z)
    w[rows, sel] = e / e.sum(axis=1, keepdims=True)
    return sel, w


def standardize(z: Tensor) -> Tensor:
    """Per-row zero mean, unit variance (population) with ``1e-6`` added to the std."""
    centered = z - ad.mean(z, axis=-1, keepdims=True)
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    return centered / (ad.sqrt(var + VAR_FLOOR) + STD_EPS)


def _linear(h, w, b=None):
    out = ad.matmul(h, w)
    return out if b is None else out + b


def gate_soft(h, w_gate, b_gate=None) -> Routing:
    h = ad._as_tensor(h)
    if h.ndim != 2 or h.shape[1] != ad._as_tensor(w_gate).shape[0]:
        raise UsageError(f"gate_soft: features {h.shape} do not match gate {np.shape(w_gate)}")
    logits = _linear(h, w_gate, b_gate)
    weights = ad.softmax(logits)
    b, n = weights.shape
    decision = GateDecision(
        mode="soft", clean_logits=logits.data, noise_std=None, noisy_logits=logits.data,
        selected=np.tile(np.arange(n), (b, 1)), weights=weights.data,
    )
    return Routing(decision, weights, weights, logits, None, logits)


def gate_noisy_topk(h, w_gate, b_gate, w_noise, k: int, rng=None, training=False) -> Routing:
    """Noisy top-k gate.  ``rng`` supplies the noise and is required when training."""
    h = ad._as_tensor(h)
    n = ad._as_tensor(w_gate).shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must lie in [1, {n}]")
    if h.ndim != 2 or h.shape[1] != ad._as_tensor(w_gate).shape[0]:
        raise UsageError(f"gate: features {h.shape} do not match gate {ad._as_tensor(w_gate).shape}")
    clean = standardize(_linear(h, w_gate, b_gate))
    noise_std = ad.softplus(ad.matmul(h, w_noise)) if w_noise is not None else None
    if training:
        if rng is None:
            raise UsageError("training-mode gating needs an rng for the noise")
        if noise_std is None:
            raise ConfigError("training-mode gating needs a noise weight matrix")
        noisy = clean + ad.randn(rng, clean.shape) * noise_std
    else:
        noisy = clean
    sel = select_topk(noisy.data, k)
    rows = np.arange(h.shape[0])[:, None]
    kept = ad.softmax(noisy[rows, sel])
    weights = ad.scatter(noisy.shape, (rows, sel), kept)
    decision = GateDecision(
        mode="hard" if k == 1 else "sparse", clean_logits=clean.data,
        noise_std=None if noise_std is None else noise_std.data,
        noisy_logits=noisy.data, selected=sel, weights=weights.data,
    )
    return Routing(decision, weights, kept, clean, noise_std, noisy)


def combine(weights, expert_outputs: Mapping[int, Tensor], selected=None) -> Tensor:
    """``y = sum_i weights[:, i] * E_i`` over the experts present in ``expert_outputs``.

    Every expert in ``selected`` (default: those with any nonzero weight)
    must have an output.
    """
    weights = ad._as_tensor(weights)
    if weights.ndim == 1:
        weights = ad.reshape(weights, (1, -1))
        expert_outputs = {i: ad.reshape(ad._as_tensor(o), (1, -1)) for i, o in expert_outputs.items()}
    needed = np.unique(selected) if selected is not None else np.flatnonzero(weights.data.any(axis=0))
    missing = [int(i) for i in needed if int(i) not in expert_outputs]
    if missing:
        raise InternalError(f"combine: no output for selected experts {missing}")
    y = None
    for i in sorted(expert_outputs):
        term = weights[:, i:i + 1] * expert_outputs[i]
        y = term if y is None else y + term
    if y is None:
        raise InternalError("combine: no expert outputs")
    return y


def dispatch_combine(h: Tensor, routing: Routing, experts: list[Callable[[Tensor], Tensor]],
                     num_classes: int) -> Tensor:
    """Run each expert only on the rows routed to it and scatter weighted outputs back."""
    sel = routing.decision.selected
    b = sel.shape[0]
    y = None
    for i, expert in enumerate(experts):
        rows, slots = np.nonzero(sel == i)
        if rows.size == 0:
            continue
        out = expert(h[rows])
        w = ad.reshape(routing.kept[rows, slots], (rows.size, 1))
        term = ad.scatter((b, num_classes), rows, out * w)
        y = term if y is None else y + term
    if y is None:
        raise InternalError("dispatch_combine: empty batch")
    return y


# -- load-balancing losses --------------------------------------------------

def _check_rows(weights: Tensor, op: str):
    err = np.abs(weights.data.sum(axis=1) - 1.0)
    if err.size and err.max() > 1e-6:
        raise NumericError(f"{op}: routing rows not normalised (max deviation {err.max():.3g})")


def loss_kl_uniform(weights) -> Tensor:
    """KL(mean routing || uniform) = sum_i p_i ln(p_i N), with 0 ln 0 = 0."""
    weights = ad._as_tensor(weights)
    _check_rows(weights, "loss_kl_uniform")
    n = weights.shape[1]
    p = ad.mean(weights, axis=0)
    safe = ad.where(p.data > 0, p, 1.0)
    return ad.sum(p * ad.log(safe * float(n)))


def cv_squared(x: Tensor) -> Tensor:
    """Squared coefficient of variation with population variance."""
    m = ad.mean(x)
    if m.item() == 0.0:
        raise NumericError("cv_squared: zero mean")
    d = x - m
    return ad.mean(d * d) / (m * m)


def loss_importance(weights) -> Tensor:
    weights = ad._as_tensor(weights)
    _check_rows(weights, "loss_importance")
    importance = ad.sum(weights, axis=0)
    if not importance.data.any():
        raise NumericError("loss_importance: all-zero importance")
    return cv_squared(importance)


def load_probabilities(clean: Tensor, noise_std: Tensor, noisy: Tensor, k: int) -> Tensor:
    """P(expert i stays in the top k when only its own noise is redrawn).

    ``Phi((clean_i - t_i) / sigma_i)`` where ``t_i`` is the k-th largest noisy
    logit among the other experts.
    """
    if np.any(noise_std.data <= 0):
        raise NumericError("load: noise std must be positive")
    b, n = clean.shape
    if k >= n:
        return Tensor(np.ones((b, n)))
    order = np.argsort(-noisy.data, axis=-1, kind="stable")
    rows = np.arange(b)
    inside = np.zeros((b, n), dtype=bool)
    inside[rows[:, None], order[:, :k]] = True
    thr_in = ad.reshape(noisy[rows, order[:, k]], (b, 1))
    thr_out = ad.reshape(noisy[rows, order[:, k - 1]], (b, 1))
    threshold = ad.where(inside, thr_in, thr_out)
    return ad.ndtr((clean - threshold) / noise_std)


def loss_load(clean: Tensor, noise_std: Tensor, noisy: Tensor, k: int) -> Tensor:
    """CV^2 of the smooth per-expert load ``sum_x P(x, i)``."""
    load = ad.sum(load_probabilities(clean, noise_std, noisy, k), axis=0)
    if not load.data.any():
        raise NumericError("loss_load: all-zero load")
    return cv_squared(load)


# -- statistics -------------------------------------------------------------

@dataclass
class RoutingStats:
    utilization: np.ndarray      # (N,) mean weight per expert
    class_expert: np.ndarray     # (C, N) mean weight per expert given the label
    class_counts: np.ndarray     # (C,)

    def entropy(self) -> float:
        p = self.utilization[self.utilization > 0]
        return float(-(p * np.log(p)).sum())


def routing_stats(decisions, labels, num_classes=None) -> RoutingStats:
    """Utilisation vector and class-conditional routing matrix.

    Rows of ``class_expert`` for classes with no inputs are left at zero.
    """
    if isinstance(decisions, GateDecision):
        decisions, labels = [decisions], [labels]
    decisions = list(decisions)
    if not decisions:
        raise UsageError("routing_stats needs at least one decision")
    w = np.concatenate([d.weights for d in decisions])
    y = np.concatenate([np.atleast_1d(np.asarray(lab, dtype=np.int64)) for lab in labels])
    if y.shape[0] != w.shape[0]:
        raise UsageError(f"{w.shape[0]} routing rows but {y.shape[0]} labels")
    c = int(num_classes if num_classes is not None else y.max() + 1)
    counts = np.bincount(y, minlength=c)
    sums = np.zeros((c, w.shape[1]))
    np.add.at(sums, y, w)
    matrix = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return RoutingStats(w.mean(axis=0), matrix, counts)
