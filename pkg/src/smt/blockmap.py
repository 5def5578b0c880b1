"""Partitioning of d x k weight matrices into l x l sub-matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple


class DivisibilityError(ValueError):
    """Matrix dimensions are not multiples of the block side."""


class BlockIndex(NamedTuple):
    row_block: int
    col_block: int


@dataclass(frozen=True)
class BlockGrid:
    rows_d: int
    cols_k: int
    side_l: int

    def __post_init__(self):
        if min(self.rows_d, self.cols_k, self.side_l) <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.rows_d}x{self.cols_k}, l={self.side_l}")
        if self.rows_d % self.side_l or self.cols_k % self.side_l:
            raise DivisibilityError(
                f"{self.rows_d}x{self.cols_k} matrix is not divisible into {self.side_l}x{self.side_l} blocks"
            )

    @property
    def n_row_blocks(self) -> int:
        return self.rows_d // self.side_l

    @property
    def n_col_blocks(self) -> int:
        return self.cols_k // self.side_l

    @property
    def block_count(self) -> int:
        return self.n_row_blocks * self.n_col_blocks

    @property
    def block_params(self) -> int:
        return self.side_l * self.side_l

    def contains(self, idx: BlockIndex) -> bool:
        return 0 <= idx[0] < self.n_row_blocks and 0 <= idx[1] < self.n_col_blocks

    def indices(self) -> Iterator[BlockIndex]:
        for i in range(self.n_row_blocks):
            for j in range(self.n_col_blocks):
                yield BlockIndex(i, j)


def make_grid(d: int, k: int, l: int) -> BlockGrid:
    return BlockGrid(d, k, l)


def block_slice(grid: BlockGrid, idx: BlockIndex) -> tuple[range, range]:
    """Half-open row and column ranges covered by block ``idx``."""
    if not grid.contains(idx):
        raise IndexError(f"block {tuple(idx)} outside {grid.n_row_blocks}x{grid.n_col_blocks} grid")
    i, j = idx
    l = grid.side_l
    return range(i * l, (i + 1) * l), range(j * l, (j + 1) * l)


def col_block_cover(selection: Iterable[BlockIndex]) -> list[int]:
    """Sorted distinct column blocks touched by ``selection``."""
    return sorted({idx[1] for idx in selection})


def normalize_selection(grid: BlockGrid, selection: Iterable) -> list[BlockIndex]:
    """Validate, deduplicate and sort a collection of (row, col) pairs."""
    out = sorted({BlockIndex(int(i), int(j)) for i, j in selection})
    for idx in out:
        if not grid.contains(idx):
            raise IndexError(f"block {tuple(idx)} outside {grid.n_row_blocks}x{grid.n_col_blocks} grid")
    return out
