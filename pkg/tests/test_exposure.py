"""Propensity estimator contracts: forward oracles, loss values, gradients."""

import numpy as np
import pytest

from tipsrec import autodiff as ad
from tipsrec.autodiff import ParamRegistry
from tipsrec.encoders import DualItemEmbeddings, FusedSequence, TimeEmbedder, fuse_sequence
from tipsrec.exposure import AttentionConfig, ExposureEstimator, exposure_loss, squash

from test_autodiff import fd_grad, rel_err


def make_estimator(dim=4, heads=1, seed=0):
    reg = ParamRegistry()
    est = ExposureEstimator(reg, AttentionConfig(heads=heads, dim=dim), np.random.default_rng(seed))
    return reg, est


def const_seq(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    return FusedSequence(s=ad.constant(m), items=np.arange(len(m)), gaps=np.zeros(len(m)))


def test_attention_config_validates():
    with pytest.raises(ValueError):
        AttentionConfig(heads=3, dim=4)
    with pytest.raises(ValueError):
        AttentionConfig(heads=0, dim=4)


def test_zero_parameters_give_half_propensity():
    reg, est = make_estimator()
    for name in reg.names():
        reg[name].value[...] = 0.0
    score, s_hat = est.propensity(const_seq(np.random.default_rng(0).normal(0, 1, (3, 4))), ad.constant(np.ones((1, 4))))
    assert score.raw == pytest.approx(0.0, abs=1e-15)
    assert score.s == pytest.approx(0.5, abs=1e-12)
    assert np.all(s_hat.value == 0.0)


def test_singleton_sequence_attention_weight_is_one():
    reg, est = make_estimator(seed=5)
    row = np.random.default_rng(1).normal(0, 1, (1, 4))
    seq = const_seq(row)
    query = ad.constant(np.random.default_rng(2).normal(0, 1, (1, 4)))
    _, s_hat = est.propensity(seq, query)
    # with one key the softmax weight is 1 regardless of parameters:
    # the exposure-aware row equals the value projection exactly
    head = est.heads[0]
    v = row @ head["wv"].value + head["bv"].value
    assert np.allclose(s_hat.value, v, atol=1e-12)


def test_propensity_matches_hand_computed_forward():
    reg, est = make_estimator(dim=4, heads=1, seed=9)
    rng = np.random.default_rng(10)
    s_rows = rng.normal(0, 1, (2, 4))
    q_row = rng.normal(0, 1, (1, 4))
    score, s_hat = est.propensity(const_seq(s_rows), ad.constant(q_row))

    head = est.heads[0]
    q = q_row @ head["wq"].value + head["bq"].value
    k = s_rows @ head["wk"].value + head["bk"].value
    v = s_rows @ head["wv"].value + head["bv"].value
    logits = (q @ k.T) / np.sqrt(4.0)
    e = np.exp(logits - logits.max())
    alpha = e / e.sum()
    expected_rows = alpha.T * v
    expected_raw = expected_rows.mean()
    assert np.allclose(s_hat.value, expected_rows, atol=1e-12)
    assert score.raw == pytest.approx(expected_raw, abs=1e-12)
    assert score.s == pytest.approx(1.0 / (1.0 + np.exp(-expected_raw)), abs=1e-12)


def test_position_sum_of_exposure_aware_equals_classic_attention():
    reg, est = make_estimator(dim=6, heads=2, seed=3)
    rng = np.random.default_rng(4)
    seq = const_seq(rng.normal(0, 1, (5, 6)))
    query = ad.constant(rng.normal(0, 1, (1, 6)))
    s_hat = est.exposure_aware(seq, query).value
    cols = []
    for head in est.heads:
        q = ad.constant(query.value @ head["wq"].value + head["bq"].value)
        k = ad.constant(seq.s.value @ head["wk"].value + head["bk"].value)
        v = ad.constant(seq.s.value @ head["wv"].value + head["bv"].value)
        cols.append(ad.scaled_dot_attention(q, k, v).value)
    classic = np.concatenate(cols, axis=1)
    assert np.allclose(s_hat.sum(axis=0, keepdims=True), classic, atol=1e-12)


def test_batched_scores_equal_per_query_propensity():
    reg, est = make_estimator(dim=6, heads=2, seed=6)
    rng = np.random.default_rng(7)
    seq = const_seq(rng.normal(0, 1, (4, 6)))
    queries = rng.normal(0, 1, (5, 6))
    raws = est.raw_scores(seq, ad.constant(queries)).value.reshape(-1)
    for i in range(5):
        score, _ = est.propensity(seq, ad.constant(queries[i : i + 1]))
        assert raws[i] == pytest.approx(score.raw, abs=1e-12)


def test_empty_sequence_rejected():
    _, est = make_estimator()
    with pytest.raises(ValueError):
        est.propensity(const_seq(np.empty((0, 4))), ad.constant(np.ones((1, 4))))


def test_propensity_invariant_under_joint_row_permutation():
    reg, est = make_estimator(dim=4, heads=2, seed=8)
    rng = np.random.default_rng(9)
    rows = rng.normal(0, 1, (6, 4))
    perm = rng.permutation(6)
    q = ad.constant(rng.normal(0, 1, (1, 4)))
    a, _ = est.propensity(const_seq(rows), q)
    b, _ = est.propensity(const_seq(rows[perm]), q)
    assert a.raw == pytest.approx(b.raw, abs=1e-12)


def test_propensity_strictly_inside_unit_interval_10k_draws():
    rng = np.random.default_rng(11)
    reg, est = make_estimator(dim=4, heads=2, seed=12)
    seq_rows = rng.normal(0, 1, (3, 4))
    tiny = np.finfo(float).eps
    with ad.no_grad():
        for _ in range(10_000):
            for name in reg.names():
                reg[name].value[...] = rng.normal(0, 3, reg[name].value.shape)
            raw = est.raw_scores(const_seq(seq_rows), ad.constant(rng.normal(0, 3, (1, 4)))).value[0, 0]
            s = squash(raw)
            assert tiny < s < 1.0 - tiny


# ---------------------------------------------------------------------------
# exposure loss


def raw_of(p):
    # invert the squash to feed exact probabilities through raw scores
    return np.log(p / (1.0 - p))


def test_exposure_loss_fair_coin_is_ln2():
    pos = ad.constant(np.zeros((4, 1)))  # raw 0 -> s = 0.5
    neg = ad.constant(np.zeros((4, 1)))
    assert exposure_loss(pos, neg).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_exposure_loss_perfect_separation_goes_to_zero():
    pos = ad.constant([[40.0]])
    neg = ad.constant([[-40.0]])
    assert exposure_loss(pos, neg).item() == pytest.approx(0.0, abs=1e-12)


def test_exposure_loss_matches_bruteforce_summation():
    ps = np.array([0.9, 0.6, 0.55, 0.2])
    ns = np.array([0.3, 0.45, 0.8, 0.05])
    loss = exposure_loss(ad.constant(raw_of(ps).reshape(-1, 1)), ad.constant(raw_of(ns).reshape(-1, 1))).item()
    expected = -(np.log(ps).sum() + np.log(1 - ns).sum()) / 8.0
    assert loss == pytest.approx(expected, abs=1e-12)


def test_exposure_loss_requires_nonempty_sets():
    with pytest.raises(ValueError):
        exposure_loss(ad.constant(np.empty((0, 1))), ad.constant([[0.0]]))


# ---------------------------------------------------------------------------
# gradients through the full propensity path


def build_toy_ep_loss(reg, est, emb, tim):
    seq = fuse_sequence(emb, tim, [0, 2, 1], [0.0, 0.4, 0.8])
    pos_q = ad.concat_rows([
        ad.add(emb.exposure_rows([1]), tim.embed([0.5])),
        ad.add(emb.exposure_rows([3]), tim.embed([0.2])),
    ])
    neg_q = ad.add(emb.exposure_rows([4, 0]), tim.embed([0.9, 0.1]))
    return exposure_loss(est.raw_scores(seq, pos_q), est.raw_scores(seq, neg_q))


def test_ep_loss_gradients_match_finite_differences():
    reg = ParamRegistry()
    rng = np.random.default_rng(13)
    emb = DualItemEmbeddings(reg, 5, 4, rng)
    tim = TimeEmbedder(reg, 4, rng)
    est = ExposureEstimator(reg, AttentionConfig(heads=2, dim=4), rng)

    def closure():
        return build_toy_ep_loss(reg, est, emb, tim)

    reg.zero_grads()
    ad.backward(closure())
    for name, t in reg.items():
        err = rel_err(t.grad, fd_grad(closure, t))
        assert err < 1e-4, f"{name}: {err:.2e}"


def test_one_gradient_step_decreases_ep_loss():
    reg = ParamRegistry()
    rng = np.random.default_rng(14)
    emb = DualItemEmbeddings(reg, 5, 4, rng)
    tim = TimeEmbedder(reg, 4, rng)
    est = ExposureEstimator(reg, AttentionConfig(heads=2, dim=4), rng)

    def closure():
        return build_toy_ep_loss(reg, est, emb, tim)

    reg.zero_grads()
    before = closure()
    ad.backward(before)
    grads = {k: t.grad.copy() for k, t in reg.items()}
    # line search: some small step along -grad must reduce the loss
    for step in (1e-2, 1e-3, 1e-4, 1e-5):
        for k, t in reg.items():
            t.value -= step * grads[k]
        with ad.no_grad():
            after = closure().item()
        for k, t in reg.items():
            t.value += step * grads[k]
        if after < before.item():
            return
    pytest.fail("no step size along the negative gradient reduced the loss")
