"""Analytic FLOP and byte accounting for full fine-tuning, LoRA and SMT.

Counts cover the linear layers of a model; embedding-style tables only add
to parameter, gradient and optimizer bytes under full fine-tuning.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .blockmap import BlockIndex, col_block_cover, make_grid
from .layers import LayerRole
from .selection import ATTN_QKV

# elementwise operations per parameter in one bias-corrected Adam update
ADAM_FLOPS_PER_PARAM = 14
GB = 1e9
MB = 1e6


@dataclass(frozen=True)
class LinearSpec:
    name: str
    role: str
    d: int
    k: int

    @property
    def params(self) -> int:
        return self.d * self.k


@dataclass(frozen=True)
class AttentionSpec:
    """Shape of the attention score path, which has no weights of its own."""

    n_layers: int
    seq_len: int
    d_model: int
    n_heads: int

    def fwd_flops(self, tokens: int) -> int:
        # QK^T and AV products plus ~5 ops per softmax entry, per sequence
        seqs = tokens // self.seq_len
        t = self.seq_len
        per_layer = 2 * 2 * t * t * self.d_model + 5 * self.n_heads * t * t
        return seqs * self.n_layers * per_layer


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LinearSpec, ...]
    dtype_bytes: int = 2
    tokens: int = 1
    extra_params: int = 0
    optimizer: str = "adam"
    attention: AttentionSpec | None = None

    def __post_init__(self):
        for s in self.layers:
            if s.d <= 0 or s.k <= 0:
                raise ValueError(f"layer {s.name!r} has non-positive dimensions {s.d}x{s.k}")
        if self.tokens <= 0 or self.dtype_bytes <= 0:
            raise ValueError("tokens and dtype_bytes must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    @property
    def linear_params(self) -> int:
        return sum(s.params for s in self.layers)

    @property
    def total_params(self) -> int:
        return self.linear_params + self.extra_params

    def with_tokens(self, n: int) -> "ArchSpec":
        return ArchSpec(self.layers, self.dtype_bytes, n, self.extra_params, self.optimizer, self.attention)

    @property
    def attention_flops(self) -> int:
        return 0 if self.attention is None else self.attention.fwd_flops(self.tokens)


@dataclass
class MethodCost:
    method: str
    trainable_params: int
    param_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    fwd_flops: int
    bwd_dx_flops: int
    bwd_dw_flops: int
    update_flops: int
    # reported for completeness, identical across methods and left out of ratios
    attention_flops: int = 0

    COUNTERS = ("param_bytes", "grad_bytes", "optimizer_bytes", "activation_bytes",
                "fwd_flops", "bwd_dx_flops", "bwd_dw_flops", "update_flops")

    def ratios(self, baseline: "MethodCost") -> dict[str, float]:
        out = {}
        for key in self.COUNTERS:
            base = getattr(baseline, key)
            out[key] = getattr(self, key) / base if base else 0.0
        return out


@dataclass
class CostReport:
    rows: dict[str, MethodCost] = field(default_factory=dict)
    baseline: str = "full_ft"

    def add(self, row: MethodCost) -> "CostReport":
        self.rows[row.method] = row
        return self

    def ratios(self) -> dict[str, dict[str, float]]:
        base = self.rows[self.baseline]
        return {name: row.ratios(base) for name, row in self.rows.items()}

    def to_records(self) -> list[str]:
        ratios = self.ratios() if self.baseline in self.rows else {}
        lines = []
        for name, row in self.rows.items():
            rec = asdict(row)
            if name in ratios:
                rec["ratios"] = ratios[name]
            lines.append(json.dumps(rec, sort_keys=True))
        return lines

    @classmethod
    def from_records(cls, lines: Iterable[str], baseline: str = "full_ft") -> "CostReport":
        report = cls(baseline=baseline)
        for line in lines:
            rec = json.loads(line)
            rec.pop("ratios", None)
            report.add(MethodCost(**rec))
        return report

    def to_table(self) -> str:
        ratios = self.ratios() if self.baseline in self.rows else {}
        names = list(self.rows)
        head = f"{'counter':<18}" + "".join(f"{n:>18}" for n in names)
        lines = [head, "-" * len(head)]
        for key in ("trainable_params",) + MethodCost.COUNTERS + ("attention_flops",):
            cells = []
            for n in names:
                v = getattr(self.rows[n], key)
                r = ratios.get(n, {}).get(key) if key != "attention_flops" else None
                cells.append(f"{v:>11,d}" + (f" {100 * r:5.1f}%" if r is not None else "       "))
            lines.append(f"{key:<18}" + "".join(f"{c:>18}" for c in cells))
        return "\n".join(lines)


def ft_budget(arch: ArchSpec, master_weight_bytes: int = 0) -> MethodCost:
    """Full fine-tuning: every parameter has a gradient and two Adam moments.

    ``master_weight_bytes`` adds a per-parameter full-precision copy to the
    optimizer bytes, as in mixed-precision setups.
    """
    p = arch.total_params
    b = arch.dtype_bytes
    n = arch.tokens
    dense = sum(2 * n * s.d * s.k for s in arch.layers)
    return MethodCost(
        method="full_ft",
        trainable_params=p,
        param_bytes=p * b,
        grad_bytes=p * b,
        optimizer_bytes=2 * p * b + p * master_weight_bytes,
        activation_bytes=b * n * sum(s.k for s in arch.layers),
        fwd_flops=dense,
        bwd_dx_flops=dense,
        bwd_dw_flops=dense,
        update_flops=ADAM_FLOPS_PER_PARAM * p,
        attention_flops=arch.attention_flops,
    )


def smt_budget(arch: ArchSpec, selections: Mapping[str, Iterable[BlockIndex]], side: int) -> MethodCost:
    """SMT: weight-gradient, cache, optimizer and update cost scale with selected blocks."""
    by_name = {s.name: s for s in arch.layers}
    unknown = set(selections) - set(by_name)
    if unknown:
        raise KeyError(f"selection names layers missing from the architecture: {sorted(unknown)}")
    b = arch.dtype_bytes
    n = arch.tokens
    selected = 0
    cover = 0
    dw = 0
    dx = 0
    for name, blocks in selections.items():
        blocks = list(blocks)
        if not blocks:
            continue
        spec = by_name[name]
        grid = make_grid(spec.d, spec.k, side)
        for idx in blocks:
            if not grid.contains(idx):
                raise IndexError(f"block {tuple(idx)} outside the grid of layer {name!r}")
        m = len(set(map(tuple, blocks)))
        selected += m * side * side
        cover += len(col_block_cover(blocks))
        dw += 2 * n * side * side * m
        dx += 2 * n * spec.d * spec.k
    return MethodCost(
        method="smt",
        trainable_params=selected,
        param_bytes=arch.total_params * b,
        grad_bytes=selected * b,
        optimizer_bytes=2 * selected * b,
        activation_bytes=b * n * side * cover,
        fwd_flops=sum(2 * n * s.d * s.k for s in arch.layers),
        bwd_dx_flops=dx,
        bwd_dw_flops=dw,
        update_flops=ADAM_FLOPS_PER_PARAM * selected,
        attention_flops=arch.attention_flops,
    )


def lora_budget(arch: ArchSpec, rank: int, roles=ATTN_QKV) -> MethodCost:
    """LoRA adapters of rank ``rank`` on every layer whose role is in ``roles``."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    roles = {LayerRole(r).value for r in roles}
    b = arch.dtype_bytes
    n = arch.tokens
    r = rank
    adapted = [s for s in arch.layers if s.role in roles]
    trainable = sum(r * (s.d + s.k) for s in adapted)
    base = sum(2 * n * s.d * s.k for s in arch.layers)
    return MethodCost(
        method="lora",
        trainable_params=trainable,
        param_bytes=(arch.total_params + trainable) * b,
        grad_bytes=trainable * b,
        optimizer_bytes=2 * trainable * b,
        activation_bytes=b * n * sum(s.k + r for s in adapted),
        fwd_flops=base + sum(2 * n * r * (s.k + s.d) + n * s.d for s in adapted),
        bwd_dx_flops=sum(2 * n * s.d * s.k + 2 * n * r * (s.d + s.k) for s in adapted),
        bwd_dw_flops=sum(2 * n * r * (s.d + s.k) for s in adapted),
        update_flops=ADAM_FLOPS_PER_PARAM * trainable,
        attention_flops=arch.attention_flops,
    )


def lora_overhead(model_param_bytes: float, trainable_fraction: float) -> float:
    """Resident adapter bytes that SMT avoids at the same trainable fraction."""
    if not 0.0 <= trainable_fraction <= 1.0:
        raise ValueError(f"trainable_fraction must be in [0, 1], got {trainable_fraction}")
    return trainable_fraction * model_param_bytes


def speedup(t_baseline: float, t_method: float) -> float:
    if t_baseline <= 0 or t_method <= 0:
        raise ValueError("times must be positive")
    return t_baseline / t_method


def format_speedup(ratio: float) -> str:
    return f"{ratio:.1f}x"


def llama_arch(n_layers: int = 32, d_model: int = 4096, d_ff: int = 11008, vocab: int = 32000,
               dtype_bytes: int = 2, tokens: int = 1) -> ArchSpec:
    """LLaMA-7B-shaped linear layers; embedding and norm weights go to ``extra_params``."""
    layers = []
    for i in range(n_layers):
        for short, role, d, k in (
            ("q", "AttnQ", d_model, d_model),
            ("k", "AttnK", d_model, d_model),
            ("v", "AttnV", d_model, d_model),
            ("o", "AttnO", d_model, d_model),
            ("gate", "MlpIn", d_ff, d_model),
            ("up", "MlpIn", d_ff, d_model),
            ("down", "MlpOut", d_model, d_ff),
        ):
            layers.append(LinearSpec(f"layers.{i}.{short}", role, d, k))
    layers.append(LinearSpec("head", "Head", vocab, d_model))
    norms = (2 * n_layers + 1) * d_model
    return ArchSpec(tuple(layers), dtype_bytes, tokens, vocab * d_model + norms)


def arch_from_model(model, tokens: int, dtype_bytes: int = 8) -> ArchSpec:
    layers = tuple(
        LinearSpec(name, layer.role.value if hasattr(layer.role, "value") else str(layer.role), *layer.weight.shape)
        for name, layer in model.linears.items()
    )
    extra = sum(t.size for t in model.tables.values())
    cfg = getattr(model, "cfg", None)
    attn = None
    if cfg is not None and hasattr(cfg, "n_heads"):
        attn = AttentionSpec(cfg.n_layers, cfg.seq_len, cfg.d_model, cfg.n_heads)
    return ArchSpec(layers, dtype_bytes, tokens, extra, attention=attn)


def stripe_example(rows_blocks: int = 4, col_blocks: int = 200, side: int = 16, n_layers: int = 4,
                   tokens: int = 32) -> tuple[ArchSpec, dict[str, list[BlockIndex]]]:
    """Layers of ``col_blocks`` column blocks with the first column block selected.

    The selected share of blocks and the cached share of input columns both
    equal ``1 / col_blocks``, so every SMT reduction ratio equals that value.
    """
    d, k = rows_blocks * side, col_blocks * side
    layers = tuple(LinearSpec(f"layers.{i}.v", "AttnV", d, k) for i in range(n_layers))
    arch = ArchSpec(layers, dtype_bytes=2, tokens=tokens)
    sel = {s.name: [BlockIndex(i, 0) for i in range(rows_blocks)] for s in layers}
    return arch, sel
