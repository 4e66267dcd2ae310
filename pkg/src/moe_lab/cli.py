"""``moe-lab`` command line: train, analyze-hessian, analyze-routing, bench, report.

Exit codes: 0 ok, 2 usage, 3 config, 4 data/format, 5 numeric.  Failures
print a single ``moe-lab: error[<kind>]: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as benchmod
from . import curvature, experiment
from .artifacts import atomic_write, csv_text, run_lock
from .errors import MoELabError, UsageError
from .model import Model, build, count_flops, dumps_checkpoint, load_checkpoint
from .moe import routing_stats
from .report import write_report
from .train import TrainConfig, train

log = logging.getLogger("moe_lab")

CURVATURE_COLUMNS = ["metric", "split", "value", "stderr_or_residual", "iters_or_samples", "seed"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser():
    p = _Parser(prog="moe-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    t = sub.add_parser("train", help="train one model and write metrics + checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--data-dir")

    h = sub.add_parser("analyze-hessian", help="lambda_max, Hessian trace and eigen-sweep")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--split", action="append", choices=["train", "val", "test"])
    h.add_argument("--sweep-split", choices=["train", "val", "test"])
    h.add_argument("--out")
    h.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    h.add_argument("--data-dir")

    r = sub.add_parser("analyze-routing", help="utilisation and class-expert routing matrix")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--split", default="val", choices=["train", "val", "test"])
    r.add_argument("--out")
    r.add_argument("--data-dir")

    b = sub.add_parser("bench", help="inference latency / throughput / peak memory")
    b.add_argument("--checkpoint", action="append", default=[])
    b.add_argument("--config", action="append", default=[])
    b.add_argument("--batch-size", type=int, action="append")
    b.add_argument("--warmup", type=int)
    b.add_argument("--iters", type=int)
    b.add_argument("--out", required=True)

    rp = sub.add_parser("report", help="merge run directories into tables")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out", required=True)
    rp.add_argument("--force", action="store_true")
    return p


def _require(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} {str(path)!r} does not exist")


def _run_config_from_checkpoint(model: Model, overrides=()):
    cfg = model.extra.get("run_config")
    if cfg is None:
        cfg = experiment.resolve(model.config.to_dict())
    if overrides:
        cfg = experiment.resolve(experiment.apply_overrides(cfg, overrides), overrides)
    return cfg


def cmd_train(args):
    _require(args.config, "config file")
    cfg = experiment.load_run_config(args.config, args.overrides)
    h = experiment.run_hash(cfg)
    splits = experiment.load_splits(cfg, args.data_dir)
    model = build(cfg)
    model.extra = {"config_hash": h, "run_config": cfg}
    with run_lock(args.out) as out:
        atomic_write(out / "config.json", json.dumps(dict(cfg, config_hash=h), indent=2, sort_keys=True) + "\n")
        metrics = train(model, splits[0], splits[1], TrainConfig.from_dict(cfg["train"]), out,
                        extra_summary={"head": model.config.head, "split_seed": cfg["data"]["seed"],
                                       "data_source": splits[0].source,
                                       "overrides": cfg.get("overrides", [])},
                        config_hash=h)
        atomic_write(out / "final.ckpt", dumps_checkpoint(model))
    log.info("trained %s: V_A=%.4f", model.config.head, metrics.summary["V_A"])
    return 0


def _split(splits, name):
    return dict(zip(("train", "val", "test"), splits))[name]


def cmd_analyze_hessian(args):
    _require(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    cfg = _run_config_from_checkpoint(model, args.overrides)
    h = model.extra.get("config_hash", model.config.hash())
    c = cfg["curvature"]
    splits = experiment.load_splits(cfg, args.data_dir)
    names = args.split or ["train", "test"]
    sweep_split = args.sweep_split or names[0]
    out = Path(args.out or Path(args.checkpoint).parent)
    rows, sweep = [], None
    for name in names:
        rep = curvature.analyze(model, _split(splits, name), c["tol"], c["max_iters"], c["samples"],
                                experiment.alphas(cfg), c["seed"], sweep=(name == sweep_split))
        rows.append(["lambda_max", name, rep.lambda_max, rep.lambda_residual, rep.lambda_iters, c["seed"]])
        rows.append(["trace", name, rep.trace, rep.trace_stderr, rep.trace_samples, c["seed"]])
        if not rep.converged:
            log.warning("power iteration on %s did not converge in %d iterations", name, rep.lambda_iters)
        if rep.sweep:
            sweep = rep.sweep
    with run_lock(out):
        atomic_write(out / "curvature.csv", csv_text(CURVATURE_COLUMNS, rows, h, c["seed"]))
        if sweep is not None:
            atomic_write(out / "sweep.csv", csv_text(["alpha", "loss", "flip_count"], sweep, h, c["seed"]))
    return 0


def cmd_analyze_routing(args):
    _require(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    if model.config.head == "dense":
        raise UsageError("analyze-routing needs an MoE head, checkpoint has a dense head")
    cfg = _run_config_from_checkpoint(model)
    h = model.extra.get("config_hash", model.config.hash())
    ds = _split(experiment.load_splits(cfg, args.data_dir), args.split)
    stats = routing_stats(model.decide(ds.x), ds.y, ds.num_classes)
    out = Path(args.out or Path(args.checkpoint).parent)
    n = model.config.num_experts
    rows = [[c] + [float(v) for v in stats.class_expert[c]] for c in range(ds.num_classes)]
    with run_lock(out):
        atomic_write(out / "class_expert.csv",
                     csv_text(["class"] + [f"expert_{i}" for i in range(n)], rows, h, model.config.seed))
        summary = {"config_hash": h, "seed": model.config.seed, "split": args.split,
                   "utilization": [float(v) for v in stats.utilization],
                   "entropy": stats.entropy(), "class_counts": [int(v) for v in stats.class_counts]}
        atomic_write(out / "routing.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_bench(args):
    models = []
    for path in args.checkpoint:
        _require(path, "checkpoint")
        models.append(load_checkpoint(path))
    for path in args.config:
        _require(path, "config file")
        cfg = experiment.load_run_config(path)
        m = build(cfg)
        m.extra = {"config_hash": experiment.run_hash(cfg), "run_config": cfg}
        models.append(m)
    if not models:
        raise UsageError("bench needs at least one --checkpoint or --config")
    base = models[0].extra.get("run_config", {}).get("bench", {})
    bcfg = benchmod.BenchConfig(
        batch_sizes=tuple(args.batch_size or base.get("batch_sizes", (32,))),
        warmup=args.warmup or base.get("warmup", 10), iters=args.iters or base.get("iters", 100),
        seed=base.get("seed", 0))
    rows, flops, names = [], {}, set()
    for m in models:
        name = m.config.head
        i = 2
        while name in names:
            name, i = f"{m.config.head}_{i}", i + 1
        names.add(name)
        rows += benchmod.bench(m, bcfg, name)
        flops[name] = count_flops(m.config)
    hashes = "+".join(sorted({m.extra.get("config_hash", m.config.hash()) for m in models}))
    with run_lock(args.out) as out:
        atomic_write(out / "bench.csv", benchmod.rows_to_csv(rows, hashes, bcfg.seed))
        if len(names) >= 2:
            atomic_write(out / "compare.csv", benchmod.compare_report(rows, flops).to_csv())
    return 0


def cmd_report(args):
    write_report(args.runs, args.out, force=args.force)
    return 0


COMMANDS = {
    "train": cmd_train,
    "analyze-hessian": cmd_analyze_hessian,
    "analyze-routing": cmd_analyze_routing,
    "bench": cmd_bench,
    "report": cmd_report,
}


def dispatch(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.verb is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        return COMMANDS[args.verb](args)
    except MoELabError as exc:
        kind = type(exc).__name__.replace("Error", "").lower() or "error"
        msg = " ".join(str(exc).split())
        print(f"moe-lab: error[{kind}]: {msg}", file=sys.stderr)
        return exc.exit_code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
