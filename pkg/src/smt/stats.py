"""Allocation statistics over a block selection: role shares and per-layer maps."""

from __future__ import annotations

import re

from .selection import BlockSelection

_LAYER_INDEX = re.compile(r"layers\.(\d+)\.")


def role_shares(sel: BlockSelection) -> dict[str, float]:
    return sel.role_shares()


def trainable_map(sel: BlockSelection) -> dict[int, dict[str, int]]:
    """Selected parameters per transformer block index and role."""
    out: dict[int, dict[str, int]] = {}
    for layer_id, params in sel.layer_map().items():
        m = _LAYER_INDEX.match(layer_id)
        if not m:
            continue
        role = sel.roles.get(layer_id, layer_id.rsplit(".", 1)[-1])
        out.setdefault(int(m.group(1)), {})[role] = params
    return dict(sorted(out.items()))


def frozen_counts(sel: BlockSelection) -> dict[str, int]:
    """Number of eligible layers per role that received no block at all."""
    counts: dict[str, int] = {}
    for layer_id, blocks in sel.blocks.items():
        role = sel.roles.get(layer_id, "unknown")
        counts.setdefault(role, 0)
        if not blocks:
            counts[role] += 1
    return dict(sorted(counts.items()))


def allocation_summary(sel: BlockSelection, total_params: int | None = None) -> dict:
    total = total_params if total_params is not None else sel.provenance.get("total_params")
    return {
        "selected_params": sel.param_count,
        "selected_fraction": sel.param_count / total if total else None,
        "role_shares": role_shares(sel),
        "frozen_layers": frozen_counts(sel),
        "per_layer": sel.layer_map(),
        "per_block_index": {str(k): v for k, v in trainable_map(sel).items()},
    }
