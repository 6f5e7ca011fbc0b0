# %% [markdown]
# # Throughput sweep and a slice of the ablation chain
#
# The sweep doubles the batch until the memory budget says stop and keeps
# the fastest. Absolute position tables cannot go past their length, so
# those rows come back as unsupported.

# %%
from deskbert.ablation import run_ablation_matrix, toy_ablation_spec, toy_data
from deskbert.bench import throughput_bench
from deskbert.model.config import toy_config

rope = toy_config(n_layers=2, d_model=64, n_heads=4, vocab_size=205, max_positions=256)
for cfg in (rope, rope.replace(positional="absolute")):
    rep = throughput_bench(cfg, [64, 256, 512], max_batch=4, steps=2, repeats=2, warmup=1)
    print(cfg.positional)
    print(rep.to_tsv())

# %% [markdown]
# The first two steps of the ablation chain: the baseline, then RoPE +
# SwiGLU + RMSNorm in one move. The table reports each config's metrics and
# its relative change against the parent.

# %%
report = run_ablation_matrix(toy_ablation_spec(steps=20), toy_data(), names=["M0", "M1"])
print(report.to_tsv())
