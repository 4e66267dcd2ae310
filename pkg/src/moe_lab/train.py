"""SGD training with momentum and coupled weight decay, per-epoch metrics and ETT."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .artifacts import atomic_write
from .data import BatchIterator, Dataset
from .errors import ConfigError, NumericError, UsageError
from .model import Model, save_checkpoint
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    schedule: str = "constant"      # "constant" or "cosine"
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid train config: {exc}") from None


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """One SGD step; returns ``(params, velocity)``.

    ``g' = g + weight_decay * theta``, ``v = momentum * v + g'``, ``theta -= lr * v``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if not (params.shape == grads.shape == velocity.shape):
        raise UsageError(f"sgd_step shape mismatch: {params.shape}, {grads.shape}, {velocity.shape}")
    if not np.isfinite(grads).all():
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NumericError(f"sgd_step: non-finite gradient at {bad.size} entries (first {bad[0]})")
    g = grads + weight_decay * params if weight_decay else grads
    velocity = momentum * velocity + g if momentum else g
    return params - lr * velocity, velocity


def epoch_to_threshold(series) -> int:
    """1-based index of the first occurrence of the series maximum."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise UsageError("epoch_to_threshold needs a nonempty series")
    return int(np.argmax(series)) + 1


def accuracy(model: Model, ds: Dataset, batch_size=1024, theta_vector=None) -> float:
    correct = 0
    for lo in range(0, len(ds), batch_size):
        logits = model.predict(ds.x[lo:lo + batch_size], theta_vector)
        correct += int((logits.argmax(axis=1) == ds.y[lo:lo + batch_size]).sum())
    return correct / max(len(ds), 1)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    task_loss: float
    aux_loss: float
    train_acc: float
    val_acc: float
    utilization: np.ndarray | None = None


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""
    best_checkpoint: str | None = None
    best_params: np.ndarray | None = None
    diverged: bool = False

    def series(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def summary(self) -> dict:
        if not self.rows:
            return {"seed": self.seed, "config_hash": self.config_hash, "epochs": 0,
                    "diverged": self.diverged}
        tr, va = self.series("train_acc"), self.series("val_acc")
        return {
            "M_A": float(tr.max()), "ETT_M_A": epoch_to_threshold(tr),
            "V_A": float(va.max()), "ETT_V_A": epoch_to_threshold(va),
            "epochs": len(self.rows), "seed": self.seed, "config_hash": self.config_hash,
            "best_checkpoint": self.best_checkpoint, "diverged": self.diverged,
        }

    def to_csv(self) -> str:
        n = max((0 if r.utilization is None else r.utilization.size) for r in self.rows) if self.rows else 0
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config_hash} seed={self.seed}\n")
        cols = ["epoch", "train_loss", "task_loss", "aux_loss", "train_acc", "val_acc"]
        buf.write(",".join(cols + [f"util_{i}" for i in range(n)]) + "\n")
        for r in self.rows:
            vals = [str(r.epoch)] + [repr(float(getattr(r, c))) for c in cols[1:]]
            if n:
                vals += [repr(float(u)) for u in r.utilization]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()


def write_run_files(metrics: RunMetrics, out_dir, extra_summary=None):
    out_dir = Path(out_dir)
    atomic_write(out_dir / "metrics.csv", metrics.to_csv())
    summary = dict(metrics.summary, **(extra_summary or {}))
    atomic_write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def train(model: Model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          out_dir=None, extra_summary=None, config_hash=None) -> RunMetrics:
    """Train ``model`` in place and return per-epoch metrics.

    The model keeps its final parameters; the best-validation parameters are
    in ``RunMetrics.best_params`` (and ``best.ckpt`` when ``out_dir`` is given).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise UsageError("train and validation splits must be nonempty")
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = RunMetrics(seed=cfg.seed, config_hash=config_hash or model.config.hash())
    batches = BatchIterator(train_set, cfg.batch_size, seed=cfg.seed)
    noise_rng = Rng(cfg.seed, "gate-noise")
    params = model.params.vector.copy()
    velocity = np.zeros_like(params)
    best_val = -1.0
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr
            if cfg.schedule == "cosine":
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
            sums = np.zeros(3)
            util = None
            seen = 0
            for xb, yb in batches.epoch(epoch):
                theta = ad.Tensor(params, requires_grad=True)
                terms = model.loss(xb, yb, theta, training=True, rng=noise_rng)
                ad.backward(terms.total)
                params, velocity = sgd_step(params, theta.grad, velocity, lr,
                                            cfg.momentum, cfg.weight_decay)
                b = len(yb)
                aux = sum(t.item() for t in terms.aux.values())
                sums += b * np.array([terms.total.item(), terms.task.item(), aux])
                seen += b
                r = terms.output.routing
                if r is not None:
                    w = r.decision.weights.sum(axis=0)
                    util = w if util is None else util + w
            model.params.vector = params
            row = EpochRow(
                epoch, *(sums / seen),
                train_acc=accuracy(model, train_set, cfg.eval_batch_size),
                val_acc=accuracy(model, val_set, cfg.eval_batch_size),
                utilization=None if util is None else util / seen,
            )
            metrics.rows.append(row)
            log.info("epoch %d loss %.4f train %.4f val %.4f", epoch, row.train_loss,
                     row.train_acc, row.val_acc)
            if row.val_acc > best_val:
                best_val = row.val_acc
                metrics.best_params = params.copy()
                if out_dir is not None:
                    ckpt = out_dir / "best.ckpt"
                    save_checkpoint(model, ckpt)
                    metrics.best_checkpoint = ckpt.name
    except NumericError:
        metrics.diverged = True
        if out_dir is not None:
            write_run_files(metrics, out_dir, extra_summary)
        raise
    if out_dir is not None:
        write_run_files(metrics, out_dir, extra_summary)
    return metrics
