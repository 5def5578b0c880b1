"""
Choosing blocks from warm-up gradients
======================================

A few forward/backward passes over the fine-tuning data, with no weight
updates, give each block of every Q/K/V projection a score: the mean
absolute value of its summed gradient. The highest-scoring blocks across
all eligible layers are kept until the parameter budget is spent.
"""

from smt.blockmap import make_grid
from smt.data import copy_task
from smt.models import ToyTransformerConfig, build_toy_transformer
from smt.selection import AllocationPolicy, run_warmup, score_blocks
from smt.stats import allocation_summary

cfg = ToyTransformerConfig()
model = build_toy_transformer(cfg, side=16)
data = copy_task(cfg.vocab, cfg.seq_len, 512, 16, seed=1, noise=0.3)
print(f"model parameters: {model.num_params():,}")

policy = AllocationPolicy("attention_qkv", budget_fraction=0.05)
acc, sel = run_warmup(model, data.batches(epochs=None), 25, policy, side=16)
summary = allocation_summary(sel, model.num_params())
print(f"selected {summary['selected_params']:,} parameters ({summary['selected_fraction']:.2%})")
for role, share in summary["role_shares"].items():
    print(f"  {role}: {share:.1%} of the selection")
for layer, n in summary["per_layer"].items():
    print(f"  {layer:<12} {n:>5} trainable")

# %%
# Scoring the magnitude of the summed gradient lets directions that flip
# sign between batches cancel. Scoring the sum of magnitudes does not.

_, sel_abs = run_warmup(model, data.batches(epochs=None), 25, policy, side=16, mode="abs_then_sum")
a = {(k, b) for k, v in sel.blocks.items() for b in v}
b = {(k, i) for k, v in sel_abs.blocks.items() for i in v}
print(f"overlap between the two scorings: {len(a & b)} of {len(a)} blocks")

# the five strongest blocks, with their scores
scores = score_blocks(acc, {k: make_grid(*v.shape, 16) for k, v in acc.running_sum.items()})
for s in sorted(scores, key=lambda s: -s.score)[:5]:
    print(f"  {s.layer_id} block {tuple(s.idx)}: {s.score:.2e}")
