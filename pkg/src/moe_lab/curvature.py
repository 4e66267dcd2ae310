"""Sharpness diagnostics: dominant Hessian eigenpair, Hutchinson trace, eigen-sweeps.

All routines work on an :class:`Objective`, a scalar loss of a flat parameter
vector.  Hessian-vector products come from :func:`moe_lab.autodiff.hvp`; the
Hessian itself is never formed.  For sparse heads the HVP sees the top-k
selection as fixed, while :func:`eigen_sweep` re-runs the gate at every
perturbed point, so routing changes show up there and only there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import NumericError, UsageError
from .model import Model
from .rng import Rng

DEFAULT_ALPHAS = np.linspace(-1.0, 1.0, 41)


@dataclass
class Objective:
    params: np.ndarray
    fn: Callable[[Tensor], Tensor]

    @property
    def dim(self) -> int:
        return self.params.size

    def loss(self, vector=None) -> float:
        with ad.no_grad():
            return self.fn(Tensor(self.params if vector is None else vector)).item()

    def grad(self, vector=None) -> np.ndarray:
        return ad.value_and_grad(self.fn, self.params if vector is None else vector)[1]

    def hvp(self, v) -> np.ndarray:
        return ad.hvp(self.fn, self.params, v)


def task_objective(model: Model, ds: Dataset) -> Objective:
    """Mean eval-mode cross-entropy over the whole split (balancing losses excluded)."""
    if len(ds) == 0:
        raise UsageError("curvature needs a nonempty split")
    return Objective(model.params.vector.copy(), model.objective(ds.x, ds.y, include_aux=False))


def quadratic_objective(diag, center=None) -> Objective:
    """``0.5 * sum(diag * theta**2)``: a Hessian known in closed form, for checks."""
    diag = np.asarray(diag, dtype=np.float64)
    return Objective(np.zeros_like(diag) if center is None else np.asarray(center, dtype=np.float64),
                     lambda t: 0.5 * ad.sum(t * t * diag))


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float
    converged: bool


def lambda_max(obj: Objective, tol=1e-3, max_iters=200, seed=0) -> EigenResult:
    """Power iteration for the dominant Hessian eigenpair.

    Stops when successive Rayleigh quotients differ by less than ``tol``
    relative; an unconverged result is returned with ``converged=False``.
    """
    v = Rng(seed, "power-iteration").normal(obj.dim)
    v /= np.linalg.norm(v)
    prev = None
    lam, residual, it = 0.0, np.inf, 0
    for it in range(1, max_iters + 1):
        w = obj.hvp(v)
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise NumericError("lambda_max: Hessian-vector product vanished")
        residual = float(np.linalg.norm(w - lam * v) / abs(lam)) if lam else np.inf
        if prev is not None and abs(lam - prev) < tol * abs(lam):
            return EigenResult(lam, v, it, residual, True)
        prev = lam
        v = w / norm
    return EigenResult(lam, v, it, residual, False)


@dataclass
class TraceResult:
    estimate: float
    stderr: float
    samples: int
    values: np.ndarray = field(repr=False)


def hessian_trace(obj: Objective, samples=100, seed=0) -> TraceResult:
    """Hutchinson estimate ``mean(z^T H z)`` with Rademacher probes ``z``."""
    if samples < 2:
        raise UsageError("hessian_trace needs at least 2 samples")
    rng = Rng(seed, "hutchinson")
    vals = np.array([z @ obj.hvp(z) for z in (rng.rademacher(obj.dim) for _ in range(samples))])
    return TraceResult(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples)), samples, vals)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise UsageError(f"direction must have unit norm, got {np.linalg.norm(v)}")
    return v


def eigen_sweep(obj: Objective, v, alphas=DEFAULT_ALPHAS):
    """``[(alpha, loss(theta + alpha * v))]``; ``obj.params`` is never modified."""
    v = _unit(v)
    return [(float(a), obj.loss(obj.params + a * v)) for a in alphas]


def routing_flip_count(model: Model, v, alphas, ds: Dataset):
    """Per alpha, how many inputs change their eval-mode expert set at ``theta + alpha * v``."""
    if model.config.head not in ("sparse", "hard"):
        raise UsageError(f"routing flips are defined for sparse/hard heads, not {model.config.head!r}")
    v = _unit(v)
    base = model.params.vector
    ref = model.decide(ds.x).selected_sets()
    out = []
    for a in alphas:
        sets = model.decide(ds.x, base + a * v).selected_sets()
        out.append(sum(s != r for s, r in zip(sets, ref)))
    return out


@dataclass
class CurvatureReport:
    split: str
    split_size: int
    lambda_max: float
    lambda_iters: int
    lambda_residual: float
    converged: bool
    trace: float
    trace_stderr: float
    trace_samples: int
    eigenvector: np.ndarray = field(repr=False)
    sweep: list = field(default_factory=list)      # (alpha, loss, flips or None)
    seed: int = 0
    loss_tag: str = "task"


def analyze(model: Model, ds: Dataset, tol=1e-3, max_iters=200, samples=100,
            alphas=DEFAULT_ALPHAS, seed=0, sweep=True) -> CurvatureReport:
    obj = task_objective(model, ds)
    eig = lambda_max(obj, tol, max_iters, seed)
    tr = hessian_trace(obj, samples, seed)
    rows = []
    if sweep:
        losses = eigen_sweep(obj, eig.vector, alphas)
        flips = (routing_flip_count(model, eig.vector, alphas, ds)
                 if model.config.head in ("sparse", "hard") else [None] * len(losses))
        rows = [(a, loss, f) for (a, loss), f in zip(losses, flips)]
    return CurvatureReport(ds.split, len(ds), eig.value, eig.iterations, eig.residual,
                           eig.converged, tr.estimate, tr.stderr, tr.samples, eig.vector,
                           rows, seed)
