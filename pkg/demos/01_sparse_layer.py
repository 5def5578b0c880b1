"""
A linear layer that trains a few blocks
=======================================

A 64 x 64 weight is cut into 16 x 16 blocks. Only four are trainable.
The forward pass is the ordinary dense product; what changes is what the
layer keeps for backward and which weight gradients it forms.
"""

import numpy as np

from smt.blockmap import BlockIndex, make_grid
from smt.sparse_linear import SparseLinearLayer, backward, forward

rng = np.random.default_rng(0)
grid = make_grid(64, 64, 16)
print(f"{grid.block_count} blocks of {grid.block_params} weights each")

# two of the blocks share column block 3, so only three input slices are cached
selection = [BlockIndex(0, 3), BlockIndex(2, 3), BlockIndex(1, 0), BlockIndex(3, 1)]
layer = SparseLinearLayer(rng.normal(size=(64, 64)), grid, selection)
print("column blocks to cache:", layer.col_cover)

x = rng.normal(size=(32, 64))  # 32 tokens
z, cache = forward(layer, x)
print("output matches dense product:", np.array_equal(z, x @ layer.weight.data.T))
print(f"cached floats: {cache.floats} of {x.size} ({cache.floats / x.size:.0%})")

# %%
# Backward: the input gradient is complete, the weight gradient is a pack
# of four 16 x 16 blocks instead of a 64 x 64 matrix.

dz = rng.normal(size=(32, 64))
dx, pack = backward(layer, dz, cache)
dense_dw = dz.T @ x
for idx, block in zip(pack.index_map, pack.values):
    r, c = idx.row_block * 16, idx.col_block * 16
    err = np.abs(block - dense_dw[r:r + 16, c:c + 16]).max()
    print(f"block {tuple(idx)}: max |pack - dense slice| = {err:.1e}")
print("dx matches dense:", np.array_equal(dx, dz @ layer.weight.data))
print(f"dW FLOPs: {layer.dw_flops:,} vs dense {2 * 32 * 64 * 64:,}")
