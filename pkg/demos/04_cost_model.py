"""
Where the memory and compute go
===============================

Analytic accounting for a LLaMA-7B-shaped model, the selected-fraction
ratios of SMT, and reference figures for adapters and wall-clock time.
"""

from smt import cost

arch = cost.llama_arch()
ft = cost.ft_budget(arch)
print(f"7B model: {arch.total_params / 1e9:.2f}B parameters")
print(f"  weights (bf16)          {ft.param_bytes / cost.GB:6.1f} GB")
print(f"  grads + 2 Adam moments  {(ft.grad_bytes + ft.optimizer_bytes) / cost.GB:6.1f} GB")

# %%
# Four layers of 64 x 3200, first column block of each selected: 0.5% of
# blocks and 0.5% of the input columns.

stripe, sel = cost.stripe_example()
report = cost.CostReport().add(cost.ft_budget(stripe)).add(cost.smt_budget(stripe, sel, 16))
print()
print(report.to_table())

print()
print("adapter weights SMT does not carry, 25 GB model at 1%:",
      f"{cost.lora_overhead(25 * cost.GB, 0.01) / cost.MB:.0f} MB")
for name, t in (("SMT", 16.68), ("LoRA", 17.82), ("DoRA", 18.04)):
    print(f"speedup of {name} over full fine-tuning: {cost.format_speedup(cost.speedup(243.84, t))}")
