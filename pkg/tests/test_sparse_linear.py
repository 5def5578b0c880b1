import numpy as np
import pytest

from smt.blockmap import BlockIndex, make_grid
from smt.sparse_linear import SparseBlockPack, SparseLinearLayer, StaleCacheError, backward, dw_flops, forward, gather, scatter
from smt.tensor import ShapeError, Tape, Tensor
from smt import tensor as T

from conftest import rel_err


def random_case(rng):
    l = int(rng.choice([2, 4, 8, 16]))
    d = l * int(rng.integers(1, 64 // l + 1))
    k = l * int(rng.integers(1, 64 // l + 1))
    g = make_grid(d, k, l)
    all_idx = list(g.indices())
    m = int(rng.integers(0, len(all_idx) + 1))
    sel = [all_idx[i] for i in rng.choice(len(all_idx), size=m, replace=False)]
    n = int(rng.integers(1, 20))
    return SparseLinearLayer(rng.normal(size=(d, k)), g, sel), rng.normal(size=(n, k)), rng.normal(size=(n, d))


def test_identity_forward():
    layer = SparseLinearLayer(np.eye(4), make_grid(4, 4, 2), [BlockIndex(1, 0)])
    z, _ = forward(layer, np.array([[1.0, 2.0, 3.0, 4.0]]))
    assert np.array_equal(z, [[1.0, 2.0, 3.0, 4.0]])


def test_cache_holds_cover_columns_only():
    layer = SparseLinearLayer(np.ones((4, 4)), make_grid(4, 4, 2), [BlockIndex(0, 1)])
    x = np.arange(8.0).reshape(2, 4)
    _, cache = forward(layer, x)
    assert cache.columns.shape == (2, 2)
    assert np.array_equal(cache.columns, x[:, 2:4])


def test_empty_selection_is_frozen_dense(rng):
    w = rng.normal(size=(4, 4))
    layer = SparseLinearLayer(w, make_grid(4, 4, 2), [])
    x = rng.normal(size=(3, 4))
    z, cache = forward(layer, x)
    assert cache.floats == 0
    assert np.array_equal(z, x @ w.T)
    dx, pack = backward(layer, np.ones((3, 4)), cache)
    assert pack.m == 0 and layer.dw_flops == 0
    assert np.array_equal(dx, np.ones((3, 4)) @ w)


def test_hand_outer_product():
    layer = SparseLinearLayer(np.zeros((2, 2)), make_grid(2, 2, 1), [BlockIndex(0, 1)])
    _, cache = forward(layer, np.array([[3.0, 4.0]]))
    _, pack = backward(layer, np.array([[1.0, 2.0]]), cache)
    assert pack.index_map == [BlockIndex(0, 1)]
    assert np.array_equal(pack.values, [[[4.0]]])

    layer.set_selection(list(layer.grid.indices()))
    _, cache = forward(layer, np.array([[3.0, 4.0]]))
    _, pack = backward(layer, np.array([[1.0, 2.0]]), cache)
    full = np.zeros((2, 2))
    for idx, v in zip(pack.index_map, pack.values):
        full[idx] = v[0, 0]
    assert np.array_equal(full, [[3.0, 4.0], [6.0, 8.0]])


def test_random_64_four_blocks_against_dense(rng):
    g = make_grid(64, 64, 16)
    sel = [BlockIndex(0, 0), BlockIndex(1, 3), BlockIndex(2, 1), BlockIndex(3, 3)]
    layer = SparseLinearLayer(rng.normal(size=(64, 64)), g, sel)
    x, dz = rng.normal(size=(32, 64)), rng.normal(size=(32, 64))
    _, cache = forward(layer, x)
    _, pack = backward(layer, dz, cache)
    oracle = dz.T @ x
    for idx, v in zip(pack.index_map, pack.values):
        assert rel_err(v, oracle[idx.row_block * 16:(idx.row_block + 1) * 16,
                                 idx.col_block * 16:(idx.col_block + 1) * 16]) <= 1e-12


def test_invariants_over_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(150):
        layer, x, dz = random_case(rng)
        l = layer.grid.side_l
        z, cache = forward(layer, x)
        assert np.array_equal(z, x @ layer.weight.data.T)
        assert cache.floats == x.shape[0] * l * len(layer.col_cover)
        before = layer.dw_flops
        dx, pack = backward(layer, dz, cache)
        assert np.array_equal(dx, dz @ layer.weight.data)
        assert pack.m == layer.m and pack.index_map == layer.selection
        assert layer.dw_flops - before == dw_flops(x.shape[0], l, layer.m)
        oracle = dz.T @ x
        for idx, v in zip(pack.index_map, pack.values):
            r = slice(idx.row_block * l, (idx.row_block + 1) * l)
            c = slice(idx.col_block * l, (idx.col_block + 1) * l)
            assert rel_err(v, oracle[r, c]) <= 1e-12


def test_dw_flop_ratio_equals_selected_fraction():
    assert dw_flops(32, 16, 4) / (2 * 32 * 64 * 64) == 4 * 256 / (64 * 64)


def test_stale_cache_rejected(rng):
    layer = SparseLinearLayer(rng.normal(size=(4, 4)), make_grid(4, 4, 2), [BlockIndex(0, 0)])
    _, cache = forward(layer, rng.normal(size=(2, 4)))
    layer.set_selection([BlockIndex(1, 1)])
    with pytest.raises(StaleCacheError):
        backward(layer, np.ones((2, 4)), cache)


def test_shape_errors(rng):
    layer = SparseLinearLayer(rng.normal(size=(4, 4)), make_grid(4, 4, 2), [BlockIndex(0, 0)])
    with pytest.raises(ShapeError):
        forward(layer, np.ones((2, 3)))
    _, cache = forward(layer, np.ones((2, 4)))
    with pytest.raises(ShapeError):
        backward(layer, np.ones((2, 3)), cache)
    with pytest.raises(ShapeError):
        SparseLinearLayer(np.ones((4, 2)), make_grid(4, 4, 2), [])


def test_gather_scatter(rng):
    w = rng.normal(size=(4, 4))
    layer = SparseLinearLayer(w, make_grid(4, 4, 2), [BlockIndex(1, 1), BlockIndex(0, 1)])
    pack = gather(layer)
    assert np.array_equal(pack.values[1], w[2:4, 2:4])
    scatter(layer, pack)
    assert np.array_equal(layer.weight.data, w)
    scatter(layer, SparseBlockPack(np.zeros_like(pack.values), pack.index_map))
    expect = w.copy()
    expect[0:4, 2:4] = 0.0
    assert np.array_equal(layer.weight.data, expect)
    with pytest.raises(ValueError):
        scatter(layer, SparseBlockPack(pack.values[:1], [BlockIndex(0, 0)]))


def test_tape_integration_accumulates_pack_grad(rng):
    layer = SparseLinearLayer(rng.normal(size=(4, 4)), make_grid(4, 4, 2), [BlockIndex(0, 1)])
    x = rng.normal(size=(3, 4))
    for _ in range(2):
        with Tape() as tape:
            loss = T.sum_all(layer(Tensor(x)))
        T.backward(tape, loss)
    assert np.allclose(layer.pack_grad[0], 2 * (np.ones((3, 4)).T @ x)[0:2, 2:4])
