"""Consolidate run directories into one set of tables and plotting-ready series."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .artifacts import atomic_write, csv_text, read_csv
from .errors import FormatError, UsageError

log = logging.getLogger(__name__)

RUN_FILES = ("summary.json", "metrics.csv", "curvature.csv", "sweep.csv",
             "class_expert.csv", "bench.csv")

REQUIRED_COLUMNS = {
    "metrics.csv": {"epoch", "train_acc", "val_acc"},
    "curvature.csv": {"metric", "split", "value", "stderr_or_residual", "iters_or_samples", "seed"},
    "sweep.csv": {"alpha", "loss"},
    "class_expert.csv": {"class"},
    "bench.csv": {"model", "batch_size", "params_m", "ms_per_batch_median", "ms_iqr",
                  "img_per_s", "peak_mem_bytes"},
}


@dataclass
class RunArtifacts:
    name: str
    path: Path
    summary: dict | None = None
    metrics: list = field(default_factory=list)
    curvature: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    class_expert: list = field(default_factory=list)
    bench: list = field(default_factory=list)
    hashes: set = field(default_factory=set)
    missing: list = field(default_factory=list)


def load_run(path) -> RunArtifacts | None:
    path = Path(path)
    if not path.is_dir() or not any((path / f).exists() for f in RUN_FILES):
        log.warning("skipping %s: no run artifacts", path)
        return None
    run = RunArtifacts(path.name, path)
    for fname in RUN_FILES:
        f = path / fname
        if not f.exists():
            run.missing.append(fname)
            continue
        if fname.endswith(".json"):
            run.summary = json.loads(f.read_text())
            if run.summary.get("config_hash"):
                run.hashes.add(run.summary["config_hash"])
            continue
        meta, rows = read_csv(f)
        absent = REQUIRED_COLUMNS[fname] - set(rows[0] if rows else REQUIRED_COLUMNS[fname])
        if absent:
            raise FormatError(f"{f} lacks columns {sorted(absent)}")
        if meta.get("config_hash"):
            run.hashes.add(meta["config_hash"])
        setattr(run, fname[:-4], rows)
    return run


@dataclass
class Report:
    files: dict          # output name -> text
    missing: dict        # run name -> list of missing artifact names
    runs: list


def build_report(run_dirs, force=False) -> Report:
    runs = [r for r in (load_run(d) for d in run_dirs) if r is not None]
    if not runs:
        raise UsageError("no completed run directories to report on")
    for r in runs:
        if len(r.hashes) > 1 and not force:
            raise UsageError(f"run {r.name!r} mixes artifacts from configs {sorted(r.hashes)}; "
                             "pass --force to merge anyway")

    acc_rows, curv_rows, eff_rows, util_rows, cx_rows, sweep_rows = [], [], [], [], [], []
    for r in runs:
        h = ",".join(sorted(r.hashes))
        if r.summary and "M_A" in r.summary:
            s = r.summary
            acc_rows.append([r.name, s["M_A"], s["ETT_M_A"], s["V_A"], s["ETT_V_A"], s.get("seed"), h])
        for row in r.curvature:
            curv_rows.append([r.name, row["metric"], row["split"], row["value"],
                              row["stderr_or_residual"], row["iters_or_samples"], row["seed"]])
        for row in r.bench:
            eff_rows.append([r.name] + [row[c] for c in ("model", "batch_size", "params_m",
                             "ms_per_batch_median", "ms_iqr", "img_per_s", "peak_mem_bytes")])
        for row in r.metrics:
            for key, val in row.items():
                if key.startswith("util_"):
                    util_rows.append([r.name, row["epoch"], key[5:], val])
        for row in r.class_expert:
            cx_rows.append([r.name] + list(row.values()))
        for row in r.sweep:
            sweep_rows.append([r.name, row["alpha"], row["loss"], row.get("flip_count", "")])

    files = {
        "accuracy.csv": csv_text(["run", "M_A", "ETT_M_A", "V_A", "ETT_V_A", "seed", "config_hash"], acc_rows),
        "curvature.csv": csv_text(["run", "metric", "split", "value", "stderr_or_residual",
                                   "iters_or_samples", "seed"], curv_rows),
        "efficiency.csv": csv_text(["run", "model", "batch_size", "params_m", "ms_per_batch_median",
                                    "ms_iqr", "img_per_s", "peak_mem_bytes"], eff_rows),
        "utilization.csv": csv_text(["run", "epoch", "expert", "mean_routing_prob"], util_rows),
        "sweep.csv": csv_text(["run", "alpha", "loss", "flip_count"], sweep_rows),
    }
    n_exp = max((len(r.class_expert[0]) - 1 for r in runs if r.class_expert), default=0)
    files["class_expert.csv"] = csv_text(["run", "class"] + [f"expert_{i}" for i in range(n_exp)], cx_rows)
    missing = {r.name: r.missing for r in runs if r.missing}
    files["report.md"] = _markdown(acc_rows, curv_rows, eff_rows, missing)
    return Report(files, missing, runs)


def _md_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(v) for v in row) + " |" for row in rows]
    return "\n".join(lines)


def _pct(v):
    return f"{100 * float(v):.2f}"


def _markdown(acc_rows, curv_rows, eff_rows, missing) -> str:
    out = ["# MoE lab report", ""]
    out += ["## Predictive performance", "",
            _md_table(["Model", "M_A (%)", "ETT(M_A)", "V_A (%)", "ETT(V_A)"],
                      [[r[0], _pct(r[1]), r[2], _pct(r[3]), r[4]] for r in acc_rows]), ""]
    if curv_rows:
        pivot: dict = {}
        for run, metric, split, value, *_ in curv_rows:
            pivot.setdefault(run, {})[f"{metric}_{split}"] = f"{float(value):.4g}"
        cols = sorted({k for d in pivot.values() for k in d})
        out += ["## Curvature at convergence", "",
                _md_table(["Model"] + cols, [[run] + [d.get(c, "") for c in cols] for run, d in pivot.items()]), ""]
    if eff_rows:
        out += ["## Inference efficiency", "",
                _md_table(["Run", "Model", "Batch", "Params (M)", "ms/batch", "img/s", "Peak mem (B)"],
                          [[r[0], r[1], r[2], f"{float(r[3]):.4f}", f"{float(r[4]):.3f}",
                            f"{float(r[6]):.0f}", r[7]] for r in eff_rows]), ""]
    if missing:
        out += ["## Missing artifacts", ""]
        out += [f"- {run}: {', '.join(files)}" for run, files in missing.items()]
        out.append("")
    return "\n".join(out)


def write_report(run_dirs, out_dir, force=False) -> Report:
    rep = build_report(run_dirs, force=force)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in rep.files.items():
        atomic_write(out_dir / name, text)
    for run, files in rep.missing.items():
        log.warning("run %s is missing %s", run, ", ".join(files))
    return rep
