"""Kernel tests: forward examples plus finite-difference gradient oracles."""

import numpy as np
import pytest

from tipsrec import autodiff as ad


def fd_grad(closure, tensor, step=1e-5):
    """Independent central-difference oracle for d closure() / d tensor."""
    out = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with ad.no_grad():
            f_plus = closure().item()
        flat[i] = orig - step
        with ad.no_grad():
            f_minus = closure().item()
        flat[i] = orig
        out_flat[i] = (f_plus - f_minus) / (2 * step)
    return out


def rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return np.max(np.abs(a - n) / denom)


def param(rng, shape, registry=None, name="p"):
    reg = registry or ad.ParamRegistry()
    return reg.add(name, rng.normal(0, 1, shape))


# ---------------------------------------------------------------------------
# affine


def test_affine_identity():
    x = ad.constant([[1.0, 0.0]])
    w = ad.constant(np.eye(2))
    b = ad.constant([[0.0, 0.0]])
    assert np.allclose(ad.affine(x, w, b).value, [[1.0, 0.0]])


def test_affine_identity_plus_bias():
    x = ad.constant([[1.0, 2.0]])
    w = ad.constant([[1.0, 0.0], [0.0, 1.0]])
    b = ad.constant([[3.0, 4.0]])
    assert np.allclose(ad.affine(x, w, b).value, [[4.0, 6.0]])


def test_affine_shape_mismatch_names_both_shapes():
    x = ad.constant(np.ones((2, 3)))
    w = ad.constant(np.ones((4, 2)))
    b = ad.constant(np.ones((1, 2)))
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.affine(x, w, b)


def test_affine_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    reg = ad.ParamRegistry()
    x = ad.constant(rng.normal(0, 1, (3, 4)))
    w = reg.add("w", rng.normal(0, 1, (4, 5)))
    b = reg.add("b", rng.normal(0, 1, (1, 5)))

    def closure():
        return ad.sum_all(ad.affine(x, w, b))

    reg.zero_grads()
    ad.backward(closure())
    assert rel_err(w.grad, fd_grad(closure, w)) < 1e-4
    assert rel_err(b.grad, fd_grad(closure, b)) < 1e-4


# ---------------------------------------------------------------------------
# attention


def test_attention_single_key_equal_query_returns_value_row():
    q = ad.constant([[0.3, -1.2, 0.5]])
    v0 = np.array([[2.0, 7.0]])
    out = ad.scaled_dot_attention(q, q, ad.constant(v0))
    assert np.allclose(out.value, v0)


def test_attention_two_identical_keys_averages_values():
    q = ad.constant([[1.0, 2.0]])
    k = ad.constant([[0.5, -0.5], [0.5, -0.5]])
    a, b = np.array([1.0, 2.0, 3.0]), np.array([5.0, 6.0, 7.0])
    out = ad.scaled_dot_attention(q, k, ad.constant(np.vstack([a, b])))
    assert np.allclose(out.value, (a + b) / 2)


def test_attention_empty_keys_rejected():
    q = ad.constant(np.ones((1, 4)))
    empty = ad.constant(np.empty((0, 4)))
    with pytest.raises(ad.DimensionError, match="empty key"):
        ad.scaled_dot_attention(q, empty, empty)


def test_attention_grads_match_finite_differences():
    rng = np.random.default_rng(1)
    reg = ad.ParamRegistry()
    q = reg.add("q", rng.normal(0, 1, (2, 4)))
    k = reg.add("k", rng.normal(0, 1, (3, 4)))
    v = reg.add("v", rng.normal(0, 1, (3, 4)))
    coeff = ad.constant(rng.normal(0, 1, (2, 4)))  # non-uniform readout

    def closure():
        return ad.sum_all(ad.mul(ad.scaled_dot_attention(q, k, v), coeff))

    reg.zero_grads()
    ad.backward(closure())
    for t in (q, k, v):
        assert rel_err(t.grad, fd_grad(closure, t)) < 1e-4


def test_attention_output_rows_in_convex_hull_of_values():
    rng = np.random.default_rng(2)
    for _ in range(50):
        q = ad.constant(rng.normal(0, 1, (3, 5)))
        k = ad.constant(rng.normal(0, 1, (6, 5)))
        v = rng.normal(0, 1, (6, 4))
        out = ad.scaled_dot_attention(q, k, ad.constant(v)).value
        assert np.all(out <= v.max(axis=0) + 1e-12)
        assert np.all(out >= v.min(axis=0) - 1e-12)


# ---------------------------------------------------------------------------
# cosine


@pytest.mark.parametrize(
    "a,b,expected",
    [
        ([1.0, 1.0], [1.0, 1.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 0.0], [-2.0, 0.0], -1.0),
    ],
)
def test_cosine_examples(a, b, expected):
    got = ad.cosine_sim(ad.constant(a), ad.constant(b)).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ad.DegenerateVectorError):
        ad.cosine_sim(ad.constant([0.0, 0.0]), ad.constant([1.0, 0.0]))


def test_cosine_bounded():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b = rng.normal(0, 1, 6), rng.normal(0, 1, 6)
        c = ad.cosine_sim(ad.constant(a), ad.constant(b)).item()
        assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# softmax / sigmoid invariants


def test_softmax_rows_sum_to_one_and_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.normal(0, 50, (4, 7))  # wide scale exercises max-subtraction
        y = ad.softmax_rows(ad.constant(x)).value
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_overflow_safe():
    y = ad.softmax_rows(ad.constant([[1000.0, 0.0, -1000.0]])).value
    assert np.isfinite(y).all() and y[0, 0] == pytest.approx(1.0)


def test_sigmoid_symmetry():
    rng = np.random.default_rng(5)
    x = rng.normal(0, 10, (20, 20))
    s = ad.sigmoid(ad.constant(x)).value + ad.sigmoid(ad.constant(-x)).value
    assert np.max(np.abs(s - 1.0)) < 1e-12


def test_log_sigmoid_matches_naive_and_survives_extremes():
    x = np.array([[-40.0, -1.0, 0.0, 1.0, 40.0, 800.0, -800.0]])
    y = ad.log_sigmoid(ad.constant(x)).value
    naive = np.log(1.0 / (1.0 + np.exp(-x[0, :5])))
    assert np.allclose(y[0, :5], naive, atol=1e-12)
    assert np.isfinite(y).all()
    assert y[0, 5] == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# every registered op matches finite differences (randomized property)


def _op_cases(rng):
    reg = ad.ParamRegistry()
    a = reg.add("a", rng.normal(0, 1, (3, 4)))
    b = reg.add("b", rng.normal(0, 1, (3, 4)))
    w = reg.add("w", rng.normal(0, 1, (4, 3)))
    bias = reg.add("bias", rng.normal(0, 1, (1, 3)))
    col = reg.add("col", rng.normal(0, 1, (3, 1)))
    pos = reg.add("pos", rng.uniform(0.5, 2.0, (3, 4)))
    q = reg.add("q", rng.normal(0, 1, (2, 4)))
    readout = ad.constant(rng.normal(0, 1, (3, 4)))

    def weighted(x):
        # Non-uniform readout so the FD check sees every output entry.
        return ad.sum_all(ad.mul(x, readout)) if x.shape == (3, 4) else ad.sum_all(x)

    cases = {
        "add": (lambda: weighted(ad.add(a, b)), (a, b)),
        "add_row": (lambda: ad.sum_all(ad.affine(a, w, bias)), (a, w, bias)),
        "sub": (lambda: weighted(ad.sub(a, b)), (a, b)),
        "mul": (lambda: weighted(ad.mul(a, b)), (a, b)),
        "mul_col": (lambda: weighted(ad.mul_col(a, col)), (a, col)),
        "div": (lambda: weighted(ad.div(a, pos)), (a, pos)),
        "scale_shift": (lambda: weighted(ad.scale(ad.shift(a, 0.7), -1.3)), (a,)),
        "matmul": (lambda: ad.sum_all(ad.matmul(a, w)), (a, w)),
        "transpose": (lambda: ad.sum_all(ad.matmul(ad.transpose(a), readout)), (a,)),
        "concat_cols": (lambda: ad.sum_all(ad.mul(ad.concat_cols([a, b]), ad.constant(np.tile(readout.value, (1, 2))))), (a, b)),
        "concat_rows": (lambda: ad.sum_all(ad.mul(ad.concat_rows([a, b]), ad.constant(np.tile(readout.value, (2, 1))))), (a, b)),
        "rowsum": (lambda: ad.sum_all(ad.mul(ad.rowsum(a), col)), (a, col)),
        "mean_all": (lambda: ad.mean_all(a), (a,)),
        "softmax": (lambda: weighted(ad.softmax_rows(a)), (a,)),
        "sigmoid": (lambda: weighted(ad.sigmoid(a)), (a,)),
        "log_sigmoid": (lambda: weighted(ad.log_sigmoid(a)), (a,)),
        "tanh": (lambda: weighted(ad.tanh(a)), (a,)),
        "exp": (lambda: weighted(ad.exp(a)), (a,)),
        "log": (lambda: weighted(ad.log(pos)), (pos,)),
        "sqrt": (lambda: weighted(ad.sqrt(pos)), (pos,)),
        "lookup": (lambda: ad.sum_all(ad.lookup(a, [0, 2, 0])), (a,)),
        "attention": (lambda: ad.sum_all(ad.scaled_dot_attention(q, a, b)), (q, a, b)),
        "cosine": (lambda: ad.cosine_sim(ad.take_rows(a, [0]), ad.take_rows(b, [1])), (a, b)),
    }
    return reg, cases


@pytest.mark.parametrize("seed", range(100))
def test_registered_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    reg, cases = _op_cases(rng)
    for name, (closure, inputs) in cases.items():
        reg.zero_grads()
        ad.backward(closure())
        for t in inputs:
            err = rel_err(t.grad, fd_grad(closure, t))
            assert err < 1e-4, f"op {name}, param {t.name}: rel err {err:.2e} (seed {seed})"


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_quadratic():
    reg = ad.ParamRegistry()
    w = reg.add("w", [[3.0]])
    report = ad.grad_check(lambda: ad.mul(w, w), reg, tolerance=1e-6)
    assert report.passed
    reg.zero_grads()
    ad.backward(ad.mul(w, w))
    assert w.grad[0, 0] == pytest.approx(6.0, abs=1e-9)


def test_grad_check_frozen_param_has_zero_analytic_gradient():
    reg = ad.ParamRegistry()
    w = reg.add("w", [[2.0]])
    frozen = reg.add("frozen", [[5.0]], trainable=False)
    reg.zero_grads()
    ad.backward(ad.mul(ad.mul(w, w), frozen))
    assert np.all(frozen.grad == 0.0)
    report = ad.grad_check(lambda: ad.mul(ad.mul(w, w), frozen), reg)
    assert report.passed and report.per_param["frozen"] == 0.0


def test_grad_check_rejects_nonfinite_loss():
    reg = ad.ParamRegistry()
    w = reg.add("w", [[0.0]])
    with pytest.raises(ad.NumericError):
        ad.grad_check(lambda: ad.log(w), reg)


# ---------------------------------------------------------------------------
# accumulation / registry contracts


def test_gradients_accumulate_additively_until_zeroed():
    reg = ad.ParamRegistry()
    w = reg.add("w", [[1.0, 2.0]])
    for _ in range(3):
        ad.backward(ad.sum_all(w))
    assert np.allclose(w.grad, 3.0)
    reg.zero_grads()
    assert np.allclose(w.grad, 0.0)


def test_registry_names_unique_and_grad_slots_match():
    reg = ad.ParamRegistry()
    reg.add("w", np.ones((2, 3)))
    with pytest.raises(ValueError):
        reg.add("w", np.ones((2, 3)))
    assert reg["w"].grad.shape == (2, 3)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    reg = ad.ParamRegistry()
    reg.add("alpha", rng.normal(0, 1, (4, 3)) * np.pi)
    reg.add("beta", rng.normal(0, 1, (1, 7)), trainable=False)
    before = reg.state_dict()
    reg.save(tmp_path / "ckpt", extra={"note": "x"})
    reg["alpha"].value[...] = 0.0
    extra = reg.load(tmp_path / "ckpt")
    assert extra == {"note": "x"}
    after = reg.state_dict()
    for k in before:
        assert after[k].tobytes() == before[k].tobytes()


def test_no_grad_builds_no_tape():
    reg = ad.ParamRegistry()
    w = reg.add("w", [[1.0]])
    with ad.no_grad():
        y = ad.mul(w, w)
    assert not y.needs_grad
    ad.backward(ad.mul(w, w))  # outside: still works
    assert w.grad[0, 0] == pytest.approx(2.0)
