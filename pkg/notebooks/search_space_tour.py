"""A walk through the search space: sample a few configurations, lower them
and look at where the work goes.

Run with ``python3 notebooks/search_space_tour.py``.
"""
from collections import Counter

from vitlat.archspace import ATTENTION, sample_arch
from vitlat.opfeatures import graph_flops, graph_intensity, graph_traffic
from vitlat.opgraph import estimate_memory, lower, op_histogram

for seed in range(5):
    cfg = sample_arch(seed)
    g = lower(cfg)
    mixers = Counter(b.token_mixer for b in cfg.blocks)
    print(f"{cfg.arch_id}  {cfg.input_height}px  first patch {cfg.first_patch():2d}  "
          f"{len(cfg.blocks)} blocks ({mixers[ATTENTION]} attention)")
    print(f"    {len(g.nodes)} ops, {graph_flops(g) / 1e6:.1f} MMACs, {graph_traffic(g) / 1e6:.1f} MB traffic, "
          f"intensity {graph_intensity(g):.1f} MAC/B, peak activations {estimate_memory(g) / 1e6:.1f} MB")
    top = sorted(op_histogram(g).items(), key=lambda kv: -kv[1])[:4]
    print("    most frequent ops:", ", ".join(f"{k} x{v}" for k, v in top))

# Work grows with the number of tokens: attention quadratically, linears linearly.
cfg = sample_arch(11)
for size in (224, 448):
    g = lower(cfg.__class__(size, size, cfg.merge_k, cfg.blocks), check=False)
    attn = sum(1 for n in g.nodes if n.kind == "MatMul")
    print(f"{size}px: {graph_flops(g) / 1e6:.0f} MMACs over {attn} attention matmuls")
