"""Warm-up gradient accumulation, block scoring and budgeted block selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .blockmap import BlockGrid, BlockIndex, make_grid
from .layers import LayerRole
from .tensor import Tape, backward

ATTN_QKV = frozenset({LayerRole.ATTN_Q, LayerRole.ATTN_K, LayerRole.ATTN_V})
MLP = frozenset({LayerRole.MLP_IN, LayerRole.MLP_OUT})

POLICY_ROLES = {
    "attention_qkv": ATTN_QKV,
    "mlp_only": MLP,
    "q_only": frozenset({LayerRole.ATTN_Q}),
    "k_only": frozenset({LayerRole.ATTN_K}),
    "v_only": frozenset({LayerRole.ATTN_V}),
}

# warm-up lengths used for the large (commonsense-style) and small (math-style) tasks
WARMUP_PRESETS = {"large": 100, "small": 25}

SCORE_MODES = ("sum_then_abs", "abs_then_sum")


class EmptyWarmupError(RuntimeError):
    """Blocks were scored before any warm-up iteration ran."""


class TruncatedWarmupError(RuntimeError):
    def __init__(self, completed: int, requested: int):
        super().__init__(f"data stream ended after {completed} of {requested} warm-up iterations")
        self.completed = completed
        self.requested = requested


class EmptySelectionWarning(UserWarning):
    """The parameter budget is smaller than a single block."""


class GradAccumulator:
    """Running sums of weight gradients for the tracked layers."""

    def __init__(self, shapes: Mapping[str, tuple[int, int]] | None = None):
        self.running_sum: dict[str, np.ndarray] = {}
        self.abs_sum: dict[str, np.ndarray] = {}
        self.iterations_seen: dict[str, int] = {}
        for layer_id, shape in (shapes or {}).items():
            self.track(layer_id, shape)

    def track(self, layer_id: str, shape: tuple[int, int]) -> None:
        self.running_sum[layer_id] = np.zeros(shape)
        self.abs_sum[layer_id] = np.zeros(shape)
        self.iterations_seen[layer_id] = 0

    def accumulate(self, layer_id: str, dw) -> "GradAccumulator":
        if layer_id not in self.running_sum:
            raise KeyError(f"layer {layer_id!r} is not tracked")
        dw = np.asarray(getattr(dw, "data", dw), dtype=np.float64)
        if dw.shape != self.running_sum[layer_id].shape:
            raise ValueError(
                f"gradient shape {dw.shape} does not match tracked shape {self.running_sum[layer_id].shape} of {layer_id!r}"
            )
        self.running_sum[layer_id] += dw
        self.abs_sum[layer_id] += np.abs(dw)
        self.iterations_seen[layer_id] += 1
        return self


def accumulate(acc: GradAccumulator, layer_id: str, dw) -> GradAccumulator:
    return acc.accumulate(layer_id, dw)


@dataclass(frozen=True)
class BlockScore:
    layer_id: str
    idx: BlockIndex
    score: float
    side: int
    role: str | None = None

    @property
    def params(self) -> int:
        return self.side * self.side


def score_blocks(acc: GradAccumulator, grids: Mapping[str, BlockGrid], mode: str = "sum_then_abs",
                 roles: Mapping[str, str] | None = None) -> list[BlockScore]:
    """Mean absolute accumulated gradient of every block of every tracked layer.

    ``sum_then_abs`` takes the magnitude of the signed running sum;
    ``abs_then_sum`` uses the sum of per-iteration magnitudes instead.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    source = acc.running_sum if mode == "sum_then_abs" else acc.abs_sum
    out = []
    for layer_id in sorted(source):
        if layer_id not in grids:
            raise KeyError(f"no block grid for tracked layer {layer_id!r}")
        if acc.iterations_seen[layer_id] == 0:
            raise EmptyWarmupError(f"layer {layer_id!r} has no accumulated warm-up gradients")
        g = grids[layer_id]
        mag = np.abs(source[layer_id]) if mode == "sum_then_abs" else source[layer_id]
        if mag.shape != (g.rows_d, g.cols_k):
            raise ValueError(f"grid {g} does not match accumulated shape {mag.shape}")
        l = g.side_l
        means = mag.reshape(g.n_row_blocks, l, g.n_col_blocks, l).mean(axis=(1, 3))
        role = None if roles is None else _role_value(roles.get(layer_id))
        for i in range(g.n_row_blocks):
            for j in range(g.n_col_blocks):
                out.append(BlockScore(layer_id, BlockIndex(i, j), float(means[i, j]), l, role))
    return out


def _role_value(role) -> str | None:
    if role is None:
        return None
    return LayerRole(role).value


@dataclass(frozen=True)
class AllocationPolicy:
    """Which layer roles may receive blocks and what share of the model they get.

    ``budget_fraction`` is the trainable share of all model parameters. The
    ``mixed`` variant splits it into separately ranked MLP and attention pools.
    ``roles`` overrides the eligible roles of a single-pool variant.
    """

    variant: str = "attention_qkv"
    budget_fraction: float = 0.01
    mlp_fraction: float = 0.0
    attn_fraction: float = 0.0
    roles: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.variant != "mixed" and self.variant not in POLICY_ROLES:
            raise ValueError(f"unknown allocation policy {self.variant!r}")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ValueError(f"budget_fraction must be in (0, 1], got {self.budget_fraction}")
        if self.variant == "mixed":
            if min(self.mlp_fraction, self.attn_fraction) < 0:
                raise ValueError("mixed pool fractions must be nonnegative")
            if not np.isclose(self.mlp_fraction + self.attn_fraction, self.budget_fraction, rtol=1e-9, atol=1e-12):
                raise ValueError("mlp_fraction + attn_fraction must equal budget_fraction")
        if self.roles is not None:
            object.__setattr__(self, "roles", tuple(LayerRole(r).value for r in self.roles))

    def pools(self) -> list[tuple[frozenset[str], float]]:
        if self.variant == "mixed":
            return [
                (frozenset(r.value for r in MLP), self.mlp_fraction),
                (frozenset(r.value for r in ATTN_QKV), self.attn_fraction),
            ]
        roles = self.roles if self.roles is not None else [r.value for r in POLICY_ROLES[self.variant]]
        return [(frozenset(roles), self.budget_fraction)]

    @property
    def eligible_roles(self) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for roles, _ in self.pools():
            out |= roles
        return out

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "budget_fraction": self.budget_fraction}
        if self.variant == "mixed":
            d.update(mlp_fraction=self.mlp_fraction, attn_fraction=self.attn_fraction)
        if self.roles is not None:
            d["roles"] = list(self.roles)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AllocationPolicy":
        d = dict(d)
        if "roles" in d and d["roles"] is not None:
            d["roles"] = tuple(d["roles"])
        return cls(**d)


@dataclass
class BlockSelection:
    blocks: dict[str, list[BlockIndex]]
    grids: dict[str, BlockGrid] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.blocks = {k: sorted(BlockIndex(*b) for b in v) for k, v in self.blocks.items()}

    def for_layer(self, layer_id: str) -> list[BlockIndex]:
        return self.blocks.get(layer_id, [])

    def selected_layers(self) -> list[str]:
        return [k for k, v in self.blocks.items() if v]

    def block_params(self, layer_id: str) -> int:
        if layer_id in self.grids:
            return self.grids[layer_id].block_params
        side = self.provenance.get("side")
        if side is None:
            raise KeyError(f"no grid known for layer {layer_id!r}")
        return side * side

    @property
    def param_count(self) -> int:
        return sum(len(v) * self.block_params(k) for k, v in self.blocks.items() if v)

    @property
    def is_empty(self) -> bool:
        return not any(self.blocks.values())

    @property
    def status(self) -> str:
        return "empty" if self.is_empty else "ok"

    def role_shares(self) -> dict[str, float]:
        """Fraction of selected parameters held by each layer role."""
        total = self.param_count
        shares: dict[str, float] = {}
        for k, v in self.blocks.items():
            if not v:
                continue
            role = self.roles.get(k, "unknown")
            shares[role] = shares.get(role, 0.0) + len(v) * self.block_params(k)
        return {r: (c / total if total else 0.0) for r, c in sorted(shares.items())}

    def layer_map(self) -> dict[str, int]:
        """Selected parameters per layer, including layers left frozen."""
        return {k: len(v) * self.block_params(k) if v else 0 for k, v in sorted(self.blocks.items())}


def _sort_key(s: BlockScore):
    return (-s.score, s.layer_id, s.idx[0], s.idx[1])


def select_top(scores: Iterable[BlockScore], policy: AllocationPolicy, total_params: int,
               grids: Mapping[str, BlockGrid] | None = None) -> BlockSelection:
    """Greedy highest-score-first selection under the policy's parameter budget.

    Ranking is global across the eligible layers of each pool. Selection
    stops at the first block that would push the pool past its budget, so the
    budget is never exceeded. Ties break on (layer_id, row_block, col_block).
    """
    scores = list(scores)
    pools = policy.pools()
    eligible = [s for s in scores if s.role is None or s.role in policy.eligible_roles]
    if not eligible:
        raise ValueError(f"no scored blocks are eligible under policy {policy.variant!r}")

    chosen: dict[str, list[BlockIndex]] = {}
    roles: dict[str, str] = {}
    for s in eligible:
        chosen.setdefault(s.layer_id, [])
        if s.role is not None:
            roles[s.layer_id] = s.role
    taken: set[tuple[str, BlockIndex]] = set()
    for pool_roles, fraction in pools:
        budget = fraction * total_params
        used = 0
        for s in sorted((s for s in eligible if s.role is None or s.role in pool_roles), key=_sort_key):
            if (s.layer_id, s.idx) in taken:
                continue
            if used + s.params > budget:
                break
            used += s.params
            taken.add((s.layer_id, s.idx))
            chosen[s.layer_id].append(s.idx)

    layer_grids = {k: grids[k] for k in chosen if grids is not None and k in grids}
    sides = {s.side for s in eligible}
    provenance = {"policy": policy.to_dict(), "total_params": int(total_params)}
    if len(sides) == 1:
        provenance["side"] = sides.pop()
    selection = BlockSelection(chosen, layer_grids, roles, provenance)
    if selection.is_empty:
        warnings.warn("parameter budget is smaller than one block; nothing selected", EmptySelectionWarning)
    return selection


def run_warmup(model, data_stream, n_iters: int, policy: AllocationPolicy, side: int = 16,
               mode: str = "sum_then_abs", seed: int | None = None):
    """Accumulate gradients of policy-eligible layers without updating weights.

    Returns the accumulator and the resulting :class:`BlockSelection`.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    eligible = {name: layer for name, layer in model.linears.items() if layer.role.value in policy.eligible_roles}
    if not eligible:
        raise ValueError(f"model has no layers eligible under policy {policy.variant!r}")
    grids = {name: make_grid(*layer.weight.shape, side) for name, layer in eligible.items()}
    acc = GradAccumulator({name: layer.weight.shape for name, layer in eligible.items()})

    params = list(model.tables.values()) + [layer.weight for layer in model.linears.values()]
    saved_flags = [p.requires_grad for p in params]
    saved_counters = {name: (layer.dw_flops, layer.last_cache_floats) for name, layer in model.linears.items()}
    for p in params:
        p.requires_grad = False
        p.grad = None
    for layer in eligible.values():
        layer.weight.requires_grad = True

    stream = iter(data_stream)
    try:
        for it in range(n_iters):
            try:
                batch = next(stream)
            except StopIteration:
                raise TruncatedWarmupError(it, n_iters) from None
            with Tape() as tape:
                loss = model.loss(batch)
            backward(tape, loss)
            for name, layer in eligible.items():
                acc.accumulate(name, layer.weight.grad)
                layer.weight.grad = None
    finally:
        for p, flag in zip(params, saved_flags):
            p.requires_grad = flag
            p.grad = None
        for name, layer in model.linears.items():
            layer.dw_flops, layer.last_cache_floats = saved_counters[name]

    scores = score_blocks(acc, grids, mode, {n: l.role for n, l in eligible.items()})
    selection = select_top(scores, policy, model.num_params(), grids)
    selection.provenance.update(warmup_iters=n_iters, score_mode=mode, side=side, seed=seed)
    return acc, selection
