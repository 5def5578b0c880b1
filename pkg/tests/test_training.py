import numpy as np
import pytest

from smt.blockmap import BlockIndex, make_grid
from smt.data import copy_task, teacher_regression
from smt.models import ToyMLPConfig, ToyTransformerConfig, build_toy_mlp, build_toy_transformer
from smt.optim import AdamHyper
from smt.selection import AllocationPolicy, BlockSelection
from smt.sparse_linear import SparseLinearLayer
from smt.training import EmptySelectionError, Trainer, evaluate, train

SMALL = ToyTransformerConfig(vocab=32, d_model=32, n_layers=1, n_heads=2, d_mlp=64, seq_len=16, seed=2)


def small_data(n=64, seed=0):
    return copy_task(32, 16, n, 8, seed=seed)


def test_full_selection_smt_matches_full_ft():
    data = teacher_regression(32, 64, 16, 128, 16, seed=3)
    hyper = AdamHyper(lr=1e-2)
    ft_model = build_toy_mlp(ToyMLPConfig(seed=1))
    smt_model = build_toy_mlp(ToyMLPConfig(seed=1), side=16)
    ft = train(ft_model, "full_ft", data, 10, hyper)
    smt = train(smt_model, "smt", data, 10, hyper, policy=AllocationPolicy("mlp_only", 1.0), side=16, warmup_iters=2)
    assert smt.selection.param_count == smt_model.num_params()
    assert np.allclose(smt.losses, ft.losses, rtol=1e-10, atol=0)
    for name, layer in ft_model.linears.items():
        ref = layer.weight.data
        assert np.abs(smt_model.linears[name].weight.data - ref).max() <= 1e-10 * np.abs(ref).max()


def test_v_only_selection_and_frozen_layers():
    model = build_toy_transformer(SMALL, side=8)
    init = model.state_dict()
    log = train(model, "smt", small_data(), 5, AdamHyper(lr=1e-2), policy=AllocationPolicy("v_only", 0.05),
                side=8, warmup_iters=3)
    sel = log.selection
    assert sel.selected_layers() and all(sel.roles[k] == "AttnV" for k in sel.selected_layers())
    for name, layer in model.linears.items():
        if name not in sel.selected_layers():
            assert np.array_equal(layer.weight.data, init[name]) and layer.dw_flops == 0
        else:
            assert isinstance(layer, SparseLinearLayer) and layer.dw_flops > 0
    for name in model.tables:
        assert np.array_equal(model.tables[name].data, init[name])


def test_logged_counts():
    model = build_toy_transformer(SMALL, side=8)
    log = train(model, "smt", small_data(), 2, AdamHyper(), policy=AllocationPolicy(budget_fraction=0.1), side=8,
                warmup_iters=2)
    sparse = [l for l in model.linears.values() if isinstance(l, SparseLinearLayer)]
    rec = log.records[-1]
    assert rec.trainable_params == sum(l.m * 64 for l in sparse) == log.selection.param_count
    assert rec.opt_bytes == 8 * 2 * rec.trainable_params
    assert rec.cache_bytes == 8 * sum(8 * 16 * 8 * len(l.col_cover) for l in sparse)
    assert rec.dw_flops == sum(2 * 8 * 16 * 64 * l.m for l in sparse)

    lora_model = build_toy_transformer(SMALL)
    trainer = Trainer(lora_model, "lora", AdamHyper(), rank=3)
    assert trainer.trainable_params == 3 * 3 * (32 + 32)
    rec = trainer.train_step(small_data().batch_at(0))
    assert rec.trainable_params == 3 * 3 * 64


def test_empty_selection_aborts():
    model = build_toy_transformer(SMALL, side=8)
    with pytest.raises(EmptySelectionError) as info:
        Trainer(model, "smt", selection=BlockSelection({"layers.0.v": []}))
    assert info.value.status == "empty-selection"


def test_unknown_mode():
    with pytest.raises(ValueError):
        Trainer(build_toy_mlp(ToyMLPConfig()), "dora")


def test_lora_trains_adapters_only():
    model = build_toy_transformer(SMALL)
    init = model.state_dict()
    train(model, "lora", small_data(), 3, AdamHyper(lr=1e-2), rank=2)
    state = model.state_dict()
    for name in init:
        assert np.array_equal(state[name], init[name])
    assert any(np.abs(state[k]).max() > 0 for k in state if k.endswith(".B"))


def test_evaluate_contracts():
    model = build_toy_transformer(SMALL)
    held = small_data(32, seed=9)
    first = evaluate(model, held)
    assert first == evaluate(model, held)
    train(model, "full_ft", small_data(256), 60, AdamHyper(lr=3e-3))
    after = evaluate(model, held)
    assert after["loss"] < first["loss"]
    assert after["accuracy"] > 1 / 32


def test_resume_reproduces_trajectory():
    data = small_data()
    sel = BlockSelection({"layers.0.q": [BlockIndex(0, 0), BlockIndex(2, 1)]}, {"layers.0.q": make_grid(32, 32, 8)},
                         {"layers.0.q": "AttnQ"})
    full = Trainer(build_toy_transformer(SMALL), "smt", AdamHyper(lr=1e-2), selection=sel).run(data, 6).losses

    part = Trainer(build_toy_transformer(SMALL), "smt", AdamHyper(lr=1e-2), selection=sel)
    head = part.run(data, 3).losses
    weights, opt = part.model.state_dict(), part.optimizer_state()
    resumed = Trainer(build_toy_transformer(SMALL), "smt", AdamHyper(lr=1e-2), selection=sel)
    resumed.model.load_state_dict(weights)
    resumed.load_optimizer_state(opt)
    resumed.step_count = 3
    assert head + resumed.run(data, 6).losses == full
