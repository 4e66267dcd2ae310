"""Inference wall-clock benchmarking in eval mode without graph recording."""

from __future__ import annotations

import io
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, UsageError
from .model import FlopCount, Model
from .rng import Rng

BENCH_COLUMNS = ["model", "batch_size", "params_m", "ms_per_batch_median", "ms_iqr",
                 "img_per_s", "peak_mem_bytes"]


@dataclass(frozen=True)
class BenchConfig:
    batch_sizes: tuple = (32,)
    warmup: int = 10
    iters: int = 100
    seed: int = 0
    device: str = "cpu"
    measure_memory: bool = True

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        if self.warmup < 1 or self.iters < 10:
            raise ConfigError(f"need warmup >= 1 and iters >= 10, got {self.warmup}, {self.iters}")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.device != "cpu":
            raise ConfigError(f"only the cpu device is supported, got {self.device!r}")


@dataclass
class BenchRow:
    model: str
    batch_size: int
    params_m: float
    ms_median: float
    ms_iqr: float
    img_per_s: float
    peak_mem_bytes: int | None = None
    warmup: int = field(default=0, compare=False)
    iters: int = field(default=0, compare=False)


def eval_forward(model: Model, x) -> np.ndarray:
    """The timed call: eval-mode forward with graph recording off."""
    with ad.no_grad():
        return model.forward(x).logits.data


def _peak_bytes(model, x):
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        eval_forward(model, x)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def bench(model: Model, cfg: BenchConfig = BenchConfig(), name: str | None = None):
    """Median and IQR of ms per batch over ``cfg.iters`` runs for each batch size."""
    name = name or model.config.head
    rows = []
    for bs in cfg.batch_sizes:
        x = Rng(cfg.seed, "bench-input").child(bs).normal((bs, model.config.input_dim))
        out = eval_forward(model, x)
        if not np.isfinite(out).all():
            raise NumericError(f"bench: non-finite logits for model {name!r}")
        for _ in range(cfg.warmup):
            eval_forward(model, x)
        times = np.empty(cfg.iters)
        for i in range(cfg.iters):
            t0 = time.perf_counter_ns()
            eval_forward(model, x)
            times[i] = (time.perf_counter_ns() - t0) / 1e6
        q1, med, q3 = np.percentile(times, [25, 50, 75])
        peak = _peak_bytes(model, x) if cfg.measure_memory else None
        rows.append(BenchRow(name, bs, model.num_params / 1e6, float(med), float(q3 - q1),
                             bs * 1000.0 / float(med), peak, cfg.warmup, cfg.iters))
    return rows


def rows_to_csv(rows, config_hash="", seed=0) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash} seed={seed}\n")
    buf.write(",".join(BENCH_COLUMNS) + "\n")
    for r in rows:
        peak = "" if r.peak_mem_bytes is None else str(int(r.peak_mem_bytes))
        buf.write(f"{r.model},{r.batch_size},{r.params_m!r},{r.ms_median!r},{r.ms_iqr!r},"
                  f"{r.img_per_s!r},{peak}\n")
    return buf.getvalue()


@dataclass
class Comparison:
    reference: str
    rows: list          # dicts, one per (model, batch size)
    sparse_slower_than_soft: dict   # batch size -> bool, when both were benchmarked

    def to_csv(self) -> str:
        cols = ["model", "batch_size", "ms_per_batch_median", "img_per_s", "ms_ratio_vs_ref",
                "throughput_ratio_vs_ref", "expert_mac_ratio", "head_mac_ratio_vs_ref"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            buf.write(",".join("" if r.get(c) is None else str(r[c]) for c in cols) + "\n")
        return buf.getvalue()


def compare_report(rows, flops: dict[str, FlopCount] | None = None, reference="dense") -> Comparison:
    """Ratios of every model against ``reference`` (falls back to the first model).

    With ``flops`` (model name -> :class:`FlopCount`) the analytic expert MAC
    ratio sits next to the measured latency ratio.
    """
    by_model: dict[str, dict[int, BenchRow]] = {}
    for r in rows:
        by_model.setdefault(r.model, {})[r.batch_size] = r
    if len(by_model) < 2:
        raise UsageError("compare_report needs at least two benchmarked models")
    shapes = {(tuple(sorted(m)), next(iter(m.values())).warmup, next(iter(m.values())).iters)
              for m in by_model.values()}
    if len(shapes) != 1:
        raise UsageError("compare_report: models were benchmarked with different configs")
    ref = reference if reference in by_model else next(iter(by_model))
    out = []
    for name, per_bs in by_model.items():
        for bs, r in sorted(per_bs.items()):
            base = by_model[ref][bs]
            f, fr = (flops or {}).get(name), (flops or {}).get(ref)
            out.append({
                "model": name, "batch_size": bs,
                "ms_per_batch_median": r.ms_median, "img_per_s": r.img_per_s,
                "ms_ratio_vs_ref": r.ms_median / base.ms_median,
                "throughput_ratio_vs_ref": r.img_per_s / base.img_per_s,
                "expert_mac_ratio": None if f is None else f.active_ratio,
                "head_mac_ratio_vs_ref": None if f is None or fr is None else f.head_active / fr.head_active,
            })
    flags = {}
    if "sparse" in by_model and "soft" in by_model:
        flags = {bs: by_model["sparse"][bs].ms_median > by_model["soft"][bs].ms_median
                 for bs in by_model["sparse"]}
    return Comparison(ref, out, flags)
