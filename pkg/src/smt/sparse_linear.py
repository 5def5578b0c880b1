"""Linear layer that trains only selected l x l blocks of its weight.

The forward pass multiplies by the full frozen weight, so outputs are exact.
Only the input columns that fall inside selected column blocks are kept for
the backward pass, and the backward pass forms weight gradients for selected
blocks only, packed as a dense ``(m, l, l)`` stack. The input gradient is
always computed in full.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockmap import BlockGrid, BlockIndex, col_block_cover, normalize_selection
from .tensor import ShapeError, Tensor, custom_op


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from a different selection."""


@dataclass
class ActivationCache:
    columns: np.ndarray  # (n_tokens, len(col_cover) * l)
    col_cover: list[int]
    selection: tuple[BlockIndex, ...]

    @property
    def n_tokens(self) -> int:
        return self.columns.shape[0]

    @property
    def floats(self) -> int:
        return int(self.columns.size)


@dataclass
class SparseBlockPack:
    values: np.ndarray  # (m, l, l)
    index_map: list[BlockIndex] = field(default_factory=list)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != len(self.index_map):
            raise ShapeError(f"pack of shape {self.values.shape} does not match {len(self.index_map)} indices")

    @property
    def m(self) -> int:
        return len(self.index_map)


class SparseLinearLayer:
    """Computes ``z = x @ W.T`` with block-restricted weight gradients.

    ``pack_grad`` accumulates the packed weight gradient across backward calls
    until :meth:`zero_grad`. ``dw_flops`` and ``last_cache_floats`` are the
    instrumentation counters compared against the analytic cost model.
    """

    def __init__(self, weight, grid: BlockGrid, selection, role: str = "", name: str = ""):
        w = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=np.float64)
        if w.shape != (grid.rows_d, grid.cols_k):
            raise ShapeError(f"weight shape {w.shape} does not match grid {grid.rows_d}x{grid.cols_k}")
        self.weight = Tensor(w.copy(), name=name)
        self.grid = grid
        self.role = role
        self.name = name
        self.dw_flops = 0
        self.last_cache_floats = 0
        self.set_selection(selection)

    def set_selection(self, selection) -> None:
        self.selection = normalize_selection(self.grid, selection)
        self.col_cover = col_block_cover(self.selection)
        # position of each column block inside the compressed cache
        self._cover_pos = {c: p for p, c in enumerate(self.col_cover)}
        self.zero_grad()

    @property
    def m(self) -> int:
        return len(self.selection)

    @property
    def trainable_params(self) -> int:
        return self.m * self.grid.block_params

    def zero_grad(self) -> None:
        l = self.grid.side_l
        self.pack_grad = np.zeros((self.m, l, l))

    def __call__(self, x: Tensor) -> Tensor:
        z, cache = forward(self, x.data)

        def bw(g):
            dx, pack = backward(self, g, cache)
            if self.m:
                self.pack_grad += pack.values
            return (dx,)

        return custom_op(z, (x,), bw, force_grad=self.m > 0)

    def __repr__(self) -> str:
        g = self.grid
        return f"SparseLinearLayer({self.name!r}, {g.rows_d}x{g.cols_k}, l={g.side_l}, m={self.m})"


def forward(layer: SparseLinearLayer, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.grid.cols_k:
        raise ShapeError(f"input shape {x.shape} does not match layer with {layer.grid.cols_k} input columns")
    z = x @ layer.weight.data.T
    l = layer.grid.side_l
    n = x.shape[0]
    if layer.col_cover:
        cols = x.reshape(n, layer.grid.n_col_blocks, l)[:, layer.col_cover, :].reshape(n, -1)
    else:
        cols = np.empty((n, 0))
    cache = ActivationCache(np.ascontiguousarray(cols), list(layer.col_cover), tuple(layer.selection))
    layer.last_cache_floats = cache.floats
    return z, cache


def backward(layer: SparseLinearLayer, dz: np.ndarray, cache: ActivationCache) -> tuple[np.ndarray, SparseBlockPack]:
    grid = layer.grid
    dz = np.asarray(dz, dtype=np.float64)
    if dz.ndim != 2 or dz.shape[1] != grid.rows_d:
        raise ShapeError(f"output gradient shape {dz.shape} does not match layer with {grid.rows_d} outputs")
    if cache.selection != tuple(layer.selection):
        raise StaleCacheError("selection changed between forward and backward")
    if dz.shape[0] != cache.n_tokens:
        raise ShapeError(f"output gradient has {dz.shape[0]} rows, cache has {cache.n_tokens}")

    dx = dz @ layer.weight.data
    l = grid.side_l
    n = dz.shape[0]
    m = layer.m
    if m == 0:
        return dx, SparseBlockPack(np.zeros((0, l, l)), [])

    rows = [idx.row_block for idx in layer.selection]
    slots = [layer._cover_pos[idx.col_block] for idx in layer.selection]
    dz_blocks = dz.reshape(n, grid.n_row_blocks, l)[:, rows, :]  # (n, m, l)
    x_blocks = cache.columns.reshape(n, len(cache.col_cover), l)[:, slots, :]  # (n, m, l)
    values = np.matmul(dz_blocks.transpose(1, 2, 0), x_blocks.transpose(1, 0, 2))
    layer.dw_flops += dw_flops(n, l, m)
    return dx, SparseBlockPack(values, list(layer.selection))


def dw_flops(n_tokens: int, side: int, m: int) -> int:
    return 2 * n_tokens * side * side * m


def gather(layer: SparseLinearLayer) -> SparseBlockPack:
    grid = layer.grid
    l = grid.side_l
    if not layer.selection:
        return SparseBlockPack(np.zeros((0, l, l)), [])
    rows = [idx.row_block for idx in layer.selection]
    cols = [idx.col_block for idx in layer.selection]
    blocks = layer.weight.data.reshape(grid.n_row_blocks, l, grid.n_col_blocks, l)[rows, :, cols, :]
    return SparseBlockPack(np.ascontiguousarray(blocks), list(layer.selection))


def scatter(layer: SparseLinearLayer, pack: SparseBlockPack) -> SparseLinearLayer:
    if list(pack.index_map) != list(layer.selection):
        raise ValueError("pack index map does not match the layer selection")
    if not layer.selection:
        return layer
    grid = layer.grid
    l = grid.side_l
    if pack.values.shape[1:] != (l, l):
        raise ShapeError(f"pack blocks of shape {pack.values.shape[1:]} do not match l={l}")
    rows = [idx.row_block for idx in layer.selection]
    cols = [idx.col_block for idx in layer.selection]
    view = layer.weight.data.reshape(grid.n_row_blocks, l, grid.n_col_blocks, l)
    view[rows, :, cols, :] = pack.values
    return layer
