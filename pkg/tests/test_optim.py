import numpy as np
import pytest

from smt.blockmap import BlockIndex, make_grid
from smt.optim import AdamHyper, DenseAdam, SparseAdam, init_state, step
from smt.sparse_linear import SparseBlockPack, SparseLinearLayer, backward, forward
from smt.tensor import Tensor


def test_defaults():
    assert AdamHyper() == AdamHyper(lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)


def test_state_size():
    g = make_grid(64, 64, 16)
    layer = SparseLinearLayer(np.zeros((64, 64)), g, [BlockIndex(0, 0), BlockIndex(1, 2), BlockIndex(3, 3)])
    state = init_state(layer)
    assert state.m_moment.shape == (3, 16, 16) and state.floats == 1536 and state.step_t == 0
    assert init_state(SparseLinearLayer(np.zeros((64, 64)), g, [])).floats == 0


def test_first_step_is_minus_lr():
    layer = SparseLinearLayer(np.zeros((1, 1)), make_grid(1, 1, 1), [BlockIndex(0, 0)])
    state = init_state(layer, AdamHyper(lr=0.1))
    step(layer, SparseBlockPack(np.ones((1, 1, 1)), [BlockIndex(0, 0)]), state)
    assert layer.weight.data[0, 0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_zero_gradient_leaves_weights(rng):
    w = rng.normal(size=(4, 4))
    layer = SparseLinearLayer(w, make_grid(4, 4, 2), [BlockIndex(0, 1)])
    state = init_state(layer, AdamHyper(lr=0.1))
    for _ in range(5):
        step(layer, SparseBlockPack(np.zeros((1, 2, 2)), [BlockIndex(0, 1)]), state)
    assert np.array_equal(layer.weight.data, w)


def test_layout_mismatch_rejected():
    layer = SparseLinearLayer(np.zeros((4, 4)), make_grid(4, 4, 2), [BlockIndex(0, 1)])
    state = init_state(layer)
    with pytest.raises(ValueError):
        step(layer, SparseBlockPack(np.zeros((1, 2, 2)), [BlockIndex(1, 1)]), state)


def test_quadratic_converges(rng):
    """0.5 * ||W_block - target||^2 on one 4x4 block of an 8x8 weight."""
    w0 = rng.normal(size=(8, 8))
    target = w0[4:8, 0:4] + rng.uniform(-1, 1, size=(4, 4))
    layer = SparseLinearLayer(w0, make_grid(8, 8, 4), [BlockIndex(1, 0)])
    state = init_state(layer, AdamHyper(lr=0.1))
    for _ in range(100):
        g = layer.weight.data[4:8, 0:4] - target
        step(layer, SparseBlockPack(g[None].copy(), [BlockIndex(1, 0)]), state)
    assert np.abs(layer.weight.data[4:8, 0:4] - target).max() < 1e-2
    mask = np.ones((8, 8), bool)
    mask[4:8, 0:4] = False
    assert np.array_equal(layer.weight.data[mask], w0[mask])


def test_frozen_complement_after_many_steps(rng):
    w0 = rng.normal(size=(16, 16))
    sel = [BlockIndex(0, 3), BlockIndex(2, 1), BlockIndex(3, 3)]
    layer = SparseLinearLayer(w0, make_grid(16, 16, 4), sel)
    opt = SparseAdam({"a": layer}, AdamHyper(lr=0.01, weight_decay=0.1))
    for _ in range(30):
        x = rng.normal(size=(5, 16))
        _, cache = forward(layer, x)
        _, pack = backward(layer, rng.normal(size=(5, 16)), cache)
        opt.zero_grad()
        layer.pack_grad += pack.values
        opt.step()
    mask = np.ones((16, 16), bool)
    for idx in sel:
        mask[idx.row_block * 4:(idx.row_block + 1) * 4, idx.col_block * 4:(idx.col_block + 1) * 4] = False
    assert np.array_equal(layer.weight.data[mask], w0[mask])
    assert not np.array_equal(layer.weight.data[~mask], w0[~mask])
    assert opt.state_floats == 2 * 3 * 16


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_full_selection_matches_dense_adam(rng, wd):
    hyper = AdamHyper(lr=0.01, weight_decay=wd)
    w0 = rng.normal(size=(8, 12))
    g = make_grid(8, 12, 4)
    layer = SparseLinearLayer(w0, g, list(g.indices()))
    ref = Tensor(w0.copy(), requires_grad=True)
    sparse, dense = SparseAdam({"w": layer}, hyper), DenseAdam([ref], hyper)
    for _ in range(10):
        grad = rng.normal(size=(8, 12))
        sparse.zero_grad()
        layer.pack_grad += grad.reshape(2, 4, 3, 4).transpose(0, 2, 1, 3).reshape(6, 4, 4)
        ref.grad = grad
        sparse.step()
        dense.step()
        assert np.abs(layer.weight.data - ref.data).max() <= 1e-10 * np.abs(ref.data).max()
    assert sparse.state_floats == dense.state_floats
