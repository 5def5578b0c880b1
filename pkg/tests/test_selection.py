import hashlib
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from smt.blockmap import BlockIndex, make_grid
from smt.data import copy_task
from smt.models import ToyTransformerConfig, build_toy_transformer
from smt.selection import (WARMUP_PRESETS, AllocationPolicy, BlockScore, EmptySelectionWarning, EmptyWarmupError,
                           GradAccumulator, TruncatedWarmupError, accumulate, run_warmup, score_blocks, select_top)

from oracles import ROLE_OF_VARIANT, as_set, oracle_select, score_sets


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(score_sets(), st.sampled_from(sorted(ROLE_OF_VARIANT)), st.floats(0.01, 1.0), st.integers(1, 2000))
def test_select_top_matches_oracle(scores, variant, fraction, total):
    eligible = ROLE_OF_VARIANT[variant]
    policy = AllocationPolicy(variant, fraction)
    if not any(s.role in eligible for s in scores):
        with pytest.raises(ValueError):
            select_top(scores, policy, total)
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySelectionWarning)
        sel = select_top(scores, policy, total)
    assert as_set(sel) == oracle_select(scores, eligible, fraction * total)
    assert sel.param_count <= fraction * total
    for lid, blocks in sel.blocks.items():
        assert blocks == sorted(set(blocks))


def test_spec_examples():
    s = [BlockScore("A", BlockIndex(0, 0), 0.9, 1, "AttnQ"), BlockScore("B", BlockIndex(0, 0), 0.5, 1, "AttnQ"),
         BlockScore("C", BlockIndex(0, 0), 0.2, 1, "AttnQ")]
    assert as_set(select_top(s, AllocationPolicy("q_only", 1 / 3), 3)) == {("A", BlockIndex(0, 0))}

    g = make_grid(64, 64, 16)
    acc = GradAccumulator({"w": (64, 64)}).accumulate("w", np.random.default_rng(0).normal(size=(64, 64)))
    scores = score_blocks(acc, {"w": g}, roles={"w": "AttnV"})
    assert len(select_top(scores, AllocationPolicy("v_only", 0.25), 4096).blocks["w"]) == 4

    flat = [BlockScore(lid, BlockIndex(i, j), 1.0, 2, "AttnK") for lid in ("b", "a") for i in range(2) for j in range(2)]
    sel = select_top(flat, AllocationPolicy("k_only", 0.5), 16)
    assert as_set(sel) == {("a", BlockIndex(0, 0)), ("a", BlockIndex(0, 1))}


def test_budget_below_one_block_warns():
    s = [BlockScore("A", BlockIndex(0, 0), 1.0, 16, "AttnQ")]
    with pytest.warns(EmptySelectionWarning):
        sel = select_top(s, AllocationPolicy(budget_fraction=0.01), 1000)
    assert sel.is_empty and sel.status == "empty"


def test_mixed_pools_are_ranked_separately():
    s = [BlockScore("mlp", BlockIndex(0, i), 10.0 + i, 1, "MlpIn") for i in range(4)]
    s += [BlockScore("q", BlockIndex(0, i), 1.0 + i, 1, "AttnQ") for i in range(4)]
    sel = select_top(s, AllocationPolicy("mixed", 0.5, mlp_fraction=0.125, attn_fraction=0.375), 8)
    assert sel.blocks["mlp"] == [BlockIndex(0, 3)]
    assert sel.blocks["q"] == [BlockIndex(0, 1), BlockIndex(0, 2), BlockIndex(0, 3)]
    with pytest.raises(ValueError):
        AllocationPolicy("mixed", 0.5, mlp_fraction=0.1, attn_fraction=0.1)


def test_accumulate_examples():
    acc = GradAccumulator({"w": (1, 1)})
    accumulate(acc, "w", np.array([[1.0]]))
    accumulate(acc, "w", np.array([[2.0]]))
    assert acc.running_sum["w"][0, 0] == 3.0 and acc.iterations_seen["w"] == 2
    accumulate(acc, "w", np.zeros((1, 1)))
    assert acc.running_sum["w"][0, 0] == 3.0 and acc.iterations_seen["w"] == 3
    big = GradAccumulator({"v": (4, 4)})
    with pytest.raises(ValueError):
        accumulate(big, "v", np.zeros((2, 2)))
    with pytest.raises(KeyError):
        accumulate(big, "nope", np.zeros((4, 4)))


def test_score_examples():
    acc = GradAccumulator({"w": (2, 2)}).accumulate("w", np.array([[1.0, -1.0], [2.0, -2.0]]))
    assert [s.score for s in score_blocks(acc, {"w": make_grid(2, 2, 2)})] == [1.5]
    assert [s.score for s in score_blocks(acc, {"w": make_grid(2, 2, 1)})] == [1.0, 1.0, 2.0, 2.0]
    zero = GradAccumulator({"w": (2, 2)}).accumulate("w", np.zeros((2, 2)))
    assert all(s.score == 0 for s in score_blocks(zero, {"w": make_grid(2, 2, 1)}))
    with pytest.raises(EmptyWarmupError):
        score_blocks(GradAccumulator({"w": (2, 2)}), {"w": make_grid(2, 2, 1)})


def test_score_modes_differ_on_cancelling_gradients():
    acc = GradAccumulator({"w": (1, 2)})
    acc.accumulate("w", np.array([[1.0, 0.5]])).accumulate("w", np.array([[-1.0, 0.5]]))
    g = {"w": make_grid(1, 2, 1)}
    assert [s.score for s in score_blocks(acc, g)] == [0.0, 1.0]
    assert [s.score for s in score_blocks(acc, g, "abs_then_sum")] == [2.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.25, 0.5, 2.0, 1024.0, 2.0**-20, None]), st.booleans())
def test_rescaling_invariance(seed, c, ties):
    rng = np.random.default_rng(seed)
    c = float(rng.uniform(1e-3, 1e3)) if c is None else c
    if ties:
        grad = rng.integers(-2, 3, size=(8, 8)).astype(float)
    else:
        grad = rng.normal(size=(8, 8))
    if ties and not float(np.log2(c)).is_integer():
        c = 2.0 ** round(np.log2(c))  # exact scaling keeps exact ties exact
    grids = {"w": make_grid(8, 8, 2)}
    policy = AllocationPolicy("v_only", 0.3)
    sels = []
    for scale in (1.0, c):
        acc = GradAccumulator({"w": (8, 8)}).accumulate("w", scale * grad).accumulate("w", scale * grad[::-1])
        sels.append(as_set(select_top(score_blocks(acc, grids, roles={"w": "AttnV"}), policy, 64)))
    assert sels[0] == sels[1]


# -- warm-up on the toy transformer ----------------------------------------------

CFG = ToyTransformerConfig(vocab=32, d_model=32, n_layers=2, n_heads=2, d_mlp=64, seq_len=16, seed=3)


def weights_digest(model):
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.tobytes())
    return h.hexdigest()


def warm(policy, n=4, seed=0):
    model = build_toy_transformer(CFG, side=8)
    data = copy_task(32, 16, 64, 8, seed=seed)
    return model, run_warmup(model, data.batches(epochs=None), n, policy, side=8, seed=seed)


def test_warmup_leaves_weights_untouched():
    model = build_toy_transformer(CFG, side=8)
    before = weights_digest(model)
    run_warmup(model, copy_task(32, 16, 64, 8).batches(epochs=None), 3, AllocationPolicy(budget_fraction=0.05), 8)
    assert weights_digest(model) == before
    assert all(layer.dw_flops == 0 for layer in model.linears.values())


def test_warmup_deterministic():
    _, (acc1, s1) = warm(AllocationPolicy(budget_fraction=0.05))
    _, (acc2, s2) = warm(AllocationPolicy(budget_fraction=0.05))
    assert s1.blocks == s2.blocks and s1.provenance == s2.provenance
    assert all(np.array_equal(acc1.running_sum[k], acc2.running_sum[k]) for k in acc1.running_sum)
    assert set(acc1.iterations_seen.values()) == {4}


def test_warmup_v_only():
    _, (_, sel) = warm(AllocationPolicy("v_only", 0.05))
    assert sel.selected_layers() and all(sel.roles[k] == "AttnV" for k in sel.selected_layers())
    assert sel.role_shares() == {"AttnV": 1.0}


def test_warmup_truncated():
    model = build_toy_transformer(CFG, side=8)
    data = copy_task(32, 16, 16, 8)
    with pytest.raises(TruncatedWarmupError) as info:
        run_warmup(model, data.batches(epochs=1), 5, AllocationPolicy(), 8)
    assert info.value.completed == 2


def test_presets():
    assert WARMUP_PRESETS == {"large": 100, "small": 25}
