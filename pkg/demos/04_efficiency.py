"""Inference cost at the original head scale: d=512 features, 10 classes.

Dense h=512 against eight experts with h=64 (soft evaluates all eight,
sparse only the top two).  Analytic MACs sit next to measured latency;
absolute times depend on the machine.
"""

# %%
from moe_lab import ModelConfig, build, count_flops
from moe_lab.bench import BenchConfig, bench, compare_report

scale = dict(input_dim=512, backbone_hidden=(), feature_dim=512, num_classes=10)
configs = {
    "dense": ModelConfig(head="dense", dense_hidden=512, **scale),
    "soft": ModelConfig(head="soft", num_experts=8, expert_hidden=64, **scale),
    "sparse": ModelConfig(head="sparse", num_experts=8, expert_hidden=64, k=2, **scale),
}
cfg = BenchConfig(batch_sizes=(1, 32, 256), warmup=5, iters=30)
rows, flops = [], {}
for name, c in configs.items():
    rows += bench(build(c), cfg, name)
    flops[name] = count_flops(c)

# %%
print(f"{'model':8s}{'batch':>6s}{'params(M)':>10s}{'ms':>9s}{'img/s':>10s}{'expert MACs':>13s}")
for r in rows:
    print(f"{r.model:8s}{r.batch_size:6d}{r.params_m:10.4f}{r.ms_median:9.3f}{r.img_per_s:10.0f}"
          f"{flops[r.model].experts_active:13d}")

comp = compare_report(rows, flops)
print("\nsparse slower than soft at batch size:", comp.sparse_slower_than_soft)
print("sparse active/total expert MACs:", flops["sparse"].active_ratio)
