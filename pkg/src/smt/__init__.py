"""Sparse matrix tuning: fine-tune selected l x l blocks of weight matrices."""

from .blockmap import BlockGrid, BlockIndex, DivisibilityError, block_slice, col_block_cover, make_grid
from .cost import CostReport, MethodCost, ft_budget, lora_budget, smt_budget
from .layers import DenseLinear, LayerRole, LoRALinear
from .optim import AdamHyper, DenseAdam, SparseAdam
from .selection import AllocationPolicy, BlockSelection, EmptySelectionWarning, run_warmup, score_blocks, select_top
from .sparse_linear import SparseLinearLayer, StaleCacheError
from .tensor import ShapeError, Tape, TapeStateError, Tensor, backward
from .training import Trainer, evaluate, train

__all__ = [
    "AdamHyper", "AllocationPolicy", "BlockGrid", "BlockIndex", "BlockSelection", "CostReport", "DenseAdam",
    "DenseLinear", "DivisibilityError", "EmptySelectionWarning", "LayerRole", "LoRALinear", "MethodCost",
    "ShapeError", "SparseAdam", "SparseLinearLayer", "StaleCacheError", "Tape", "TapeStateError", "Tensor",
    "Trainer", "backward", "block_slice", "col_block_cover", "evaluate", "ft_budget", "lora_budget", "make_grid",
    "run_warmup", "score_blocks", "select_top", "smt_budget", "train",
]
