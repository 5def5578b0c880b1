"""Independent reference implementations shared by the unit and acceptance tests."""

from hypothesis import strategies as st

from smt.blockmap import BlockIndex
from smt.selection import BlockScore

ROLE_OF_VARIANT = {
    "attention_qkv": {"AttnQ", "AttnK", "AttnV"},
    "mlp_only": {"MlpIn", "MlpOut"},
    "q_only": {"AttnQ"},
    "k_only": {"AttnK"},
    "v_only": {"AttnV"},
}


def oracle_select(scores, eligible_roles, budget):
    """Rank by pairwise comparison counting, then take whole blocks in rank order until one does not fit."""
    pool = [s for s in scores if s.role in eligible_roles]

    def before(a, b):
        if a.score != b.score:
            return a.score > b.score
        return (a.layer_id, a.idx.row_block, a.idx.col_block) < (b.layer_id, b.idx.row_block, b.idx.col_block)

    ranked = [None] * len(pool)
    for a in pool:
        ranked[sum(before(b, a) for b in pool if b is not a)] = a
    out, used = set(), 0
    for s in ranked:
        if used + s.params > budget:
            break
        used += s.params
        out.add((s.layer_id, s.idx))
    return out


def as_set(sel):
    return {(lid, idx) for lid, blocks in sel.blocks.items() for idx in blocks}


@st.composite
def score_sets(draw):
    side = draw(st.sampled_from([1, 2, 4]))
    n_layers = draw(st.integers(1, 4))
    roles = ["AttnQ", "AttnK", "AttnV", "MlpIn", "MlpOut", "AttnO"]
    tie_values = draw(st.booleans())
    values = st.sampled_from([0.0, 0.25, 0.5, 1.0]) if tie_values else st.floats(0, 10, allow_nan=False)
    scores = []
    for i in range(n_layers):
        lid = f"layers.{draw(st.integers(0, 3))}.w{i}"
        role = draw(st.sampled_from(roles))
        r, c = draw(st.integers(1, 4)), draw(st.integers(1, 4))
        for a in range(r):
            for b in range(c):
                scores.append(BlockScore(lid, BlockIndex(a, b), draw(values), side, role))
    return scores
