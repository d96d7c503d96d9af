"""Backbone, scoring and ranking contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tipsrec import autodiff as ad
from tipsrec.autodiff import ParamRegistry
from tipsrec.encoders import DualItemEmbeddings
from tipsrec.recommender import (
    AttentionBackbone,
    GenerativeBackboneStub,
    MeanPoolBackbone,
    make_backbone,
    rank,
    rank_of,
    score,
    score_many,
)


def make_backbone_fixture(dim=4, heads=1, seed=0):
    reg = ParamRegistry()
    bb = AttentionBackbone(reg, dim, heads, np.random.default_rng(seed))
    return reg, bb


def test_single_row_zero_attention_gives_value_projection():
    reg, bb = make_backbone_fixture()
    head = bb.heads[0]
    head["wq"].value[...] = 0.0
    head["wk"].value[...] = 0.0
    head["bq"].value[...] = 0.0
    head["bk"].value[...] = 0.0
    row = np.random.default_rng(1).normal(0, 1, (1, 4))
    u = bb.encode(ad.constant(row)).value
    assert np.allclose(u, row @ head["wv"].value + head["bv"].value, atol=1e-12)


def test_two_identical_rows_match_single_row_output():
    _, bb = make_backbone_fixture(seed=2)
    row = np.random.default_rng(3).normal(0, 1, (1, 4))
    u1 = bb.encode(ad.constant(row)).value
    u2 = bb.encode(ad.constant(np.vstack([row, row]))).value
    assert np.allclose(u1, u2, atol=1e-12)


def test_three_row_manual_forward():
    _, bb = make_backbone_fixture(dim=3, heads=2, seed=4)
    rows = np.random.default_rng(5).normal(0, 1, (3, 3))
    u = bb.encode(ad.constant(rows)).value
    expected = np.zeros((1, 3))
    for head in bb.heads:
        q = rows[2:3] @ head["wq"].value + head["bq"].value
        k = rows @ head["wk"].value + head["bk"].value
        v = rows @ head["wv"].value + head["bv"].value
        logits = q @ k.T / np.sqrt(3.0)
        e = np.exp(logits - logits.max())
        alpha = e / e.sum()
        expected += alpha @ v
    assert np.allclose(u, expected, atol=1e-12)


def test_encode_rejects_empty():
    _, bb = make_backbone_fixture()
    with pytest.raises(ValueError):
        bb.encode(ad.constant(np.empty((0, 4))))


def test_backbone_readout_is_last_position():
    _, bb = make_backbone_fixture(seed=6)
    rng = np.random.default_rng(7)
    rows = rng.normal(0, 1, (4, 4))
    u = bb.encode(ad.constant(rows)).value
    # changing a non-final row changes attention content but the query stays
    # the last row: swapping the last row must change the query side too
    rows2 = rows.copy()
    rows2[-1] += 1.0
    u2 = bb.encode(ad.constant(rows2)).value
    assert not np.allclose(u, u2)


# ---------------------------------------------------------------------------
# scoring


def emb_fixture(n_items=6, dim=4, seed=0):
    reg = ParamRegistry()
    return DualItemEmbeddings(reg, n_items, dim, np.random.default_rng(seed))


def test_score_unit_vector_alignment():
    emb = emb_fixture()
    emb.interaction.value[2] = np.array([1.0, 0.0, 0.0, 0.0])
    u = ad.constant([[1.0, 0.0, 0.0, 0.0]])
    assert score(u, emb, 2).item() == pytest.approx(1.0)


def test_score_orthogonal_is_zero():
    emb = emb_fixture()
    emb.interaction.value[3] = np.array([0.0, 1.0, 0.0, 0.0])
    u = ad.constant([[1.0, 0.0, 0.0, 0.0]])
    assert score(u, emb, 3).item() == pytest.approx(0.0)


def test_score_invalid_id():
    emb = emb_fixture()
    with pytest.raises(IndexError):
        score(ad.constant(np.ones((1, 4))), emb, 17)


def test_argmax_matches_bruteforce_scan():
    rng = np.random.default_rng(8)
    emb = emb_fixture(n_items=40, seed=9)
    for _ in range(20):
        u = rng.normal(0, 1, (1, 4))
        scores = score_many(ad.constant(u), emb, np.arange(40)).value.reshape(-1)
        brute = np.array([float((u @ emb.interaction.value[v]).item()) for v in range(40)])
        assert int(np.argmax(scores)) == int(np.argmax(brute))
        assert np.allclose(scores, brute, atol=1e-12)


# ---------------------------------------------------------------------------
# ranking


def test_rank_matches_sort_oracle_on_distinct_scores():
    rng = np.random.default_rng(10)
    for _ in range(50):
        cands = rng.permutation(30)[:10]
        scores = rng.permutation(10).astype(float)  # strictly distinct
        got = rank(scores, cands)
        oracle = [v for _, v in sorted(zip(-scores, cands))]
        assert got.tolist() == oracle


def test_rank_all_equal_scores_ascending_index():
    cands = np.array([7, 3, 9, 1])
    assert rank(np.zeros(4), cands).tolist() == [1, 3, 7, 9]


def test_rank_singleton():
    assert rank(np.array([2.5]), np.array([4])).tolist() == [4]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30))
def test_rank_is_permutation(scores):
    cands = np.arange(len(scores))
    out = rank(np.asarray(scores), cands)
    assert sorted(out.tolist()) == cands.tolist()


def test_rank_consistent_after_constant_user_shift():
    rng = np.random.default_rng(11)
    emb = emb_fixture(n_items=25, seed=12)
    u = rng.normal(0, 1, (1, 4))
    shift = np.full((1, 4), 0.9)
    cands = np.arange(25)
    scores = score_many(ad.constant(u + shift), emb, cands).value.reshape(-1)
    brute = np.array([float(((u + shift) @ emb.interaction.value[v]).item()) for v in range(25)])
    assert rank(scores, cands).tolist() == rank(brute, cands).tolist()


def test_rank_of_positions():
    assert rank_of(5, np.array([1.0, 3.0]), np.array([5, 6])) == 2
    assert rank_of(5, np.array([3.0, 1.0]), np.array([5, 6])) == 1
    with pytest.raises(ValueError):
        rank_of(7, np.array([1.0]), np.array([5]))


# ---------------------------------------------------------------------------
# plug-in seam


def test_mean_backbone_satisfies_encode_contract():
    bb = MeanPoolBackbone()
    rows = np.random.default_rng(13).normal(0, 1, (3, 4))
    u = bb.encode(ad.constant(rows))
    assert u.shape == (1, 4)
    assert np.allclose(u.value, rows.mean(axis=0, keepdims=True))
    with pytest.raises(ValueError):
        bb.encode(ad.constant(np.empty((0, 4))))


def test_backbones_interchangeable_for_scoring():
    emb = emb_fixture(seed=14)
    rows = np.random.default_rng(15).normal(0, 1, (3, 4))
    for kind in ("attention", "mean"):
        reg = ParamRegistry()
        bb = make_backbone(kind, reg, 4, 2, np.random.default_rng(16))
        u = bb.encode(ad.constant(rows))
        s = score_many(u, emb, np.arange(6)).value
        assert s.shape == (1, 6) and np.isfinite(s).all()


def test_generative_stub_rejects_at_construction():
    with pytest.raises(NotImplementedError, match="not implemented"):
        GenerativeBackboneStub()
    with pytest.raises(NotImplementedError):
        make_backbone("generative", ParamRegistry(), 4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_backbone("nope", ParamRegistry(), 4, 2, np.random.default_rng(0))
