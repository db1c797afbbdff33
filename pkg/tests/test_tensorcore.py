import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from g2i import tensorcore as tc

TOL = 1e-4


def test_softmax_examples():
    np.testing.assert_array_equal(tc.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    out = tc.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)
    np.testing.assert_array_equal(tc.softmax_rows(np.array([[3.0], [-7.0]])), [[1.0], [1.0]])


def test_softmax_masked_rows():
    out = tc.softmax_rows(np.array([[0.0, -np.inf], [-np.inf, -np.inf]]))
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = tc.softmax_rows(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_single_key():
    rng = np.random.default_rng(0)
    q = tc.const(rng.standard_normal((1, 3, 4)))
    k = tc.const(rng.standard_normal((1, 1, 4)))
    v = tc.const(rng.standard_normal((1, 1, 4)))
    out, probs = tc.attention(q, k, v, heads=2)
    np.testing.assert_array_equal(probs, np.ones((1, 2, 3, 1)))
    np.testing.assert_allclose(out.value, np.repeat(v.value, 3, axis=1), atol=1e-15)


def test_attention_orthogonal_is_uniform_average():
    # Queries live in the first two coordinates, keys in the last two.
    q = np.zeros((1, 2, 4)); q[0, :, :2] = [[1, 2], [3, -1]]
    k = np.zeros((1, 3, 4)); k[0, :, 2:] = [[1, 0], [0, 1], [2, 2]]
    v = np.random.default_rng(1).standard_normal((1, 3, 4))
    out, probs = tc.attention(tc.const(q), tc.const(k), tc.const(v), heads=1)
    np.testing.assert_allclose(probs, 1 / 3)
    np.testing.assert_allclose(out.value[0], np.tile(v[0].mean(axis=0), (2, 1)), atol=1e-15)


def test_attention_mismatch():
    with pytest.raises(ValueError):
        tc.attention(tc.const(np.zeros((1, 2, 4))), tc.const(np.zeros((1, 3, 5))),
                     tc.const(np.zeros((1, 3, 4))), heads=2)


def test_linear_gradient_by_hand():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3))
    tape = tc.ParamTape({"w": rng.standard_normal((3, 2))})
    y = tc.linear(tc.const(x), tape.p("w"))
    loss = tc.weighted_sum(y, y.value)  # gradient y, as for 0.5*|y|^2
    grads = tape.backward(loss)
    # Row layout: y = x W, so dL/dW = x^T y.
    np.testing.assert_allclose(grads["w"], x.T @ y.value, atol=1e-14)


def test_zero_loss_gradient():
    rng = np.random.default_rng(3)
    tape = tc.ParamTape({"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)})
    y = tc.linear(tc.const(rng.standard_normal((2, 3))), tape.p("w"), tape.p("b"))
    grads = tape.backward(y, np.zeros_like(y.value))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_without_forward():
    tape = tc.ParamTape({"w": np.ones(2)})
    with pytest.raises(tc.TapeError):
        tape.backward(tc.const(1.0))
    with pytest.raises(tc.TapeError):
        tc.ParamTape({"w": np.ones(2)}, record=False).backward(tc.const(1.0))


def test_zero_grad_and_accumulation():
    tape = tc.ParamTape({"w": np.ones((2, 2))})
    x = tc.const(np.ones((1, 2)))
    tape.backward(tc.weighted_sum(tc.linear(x, tape.p("w")), 1.0))
    tape.backward(tc.weighted_sum(tc.linear(x, tape.p("w")), 1.0))
    np.testing.assert_array_equal(tape.grads["w"], 2 * np.ones((2, 2)))
    tape.zero_grad()
    assert np.all(tape.grads["w"] == 0)


def check(params, forward, probes=20, seed=0):
    """Gradcheck ``forward(tape) -> scalar Var`` against every parameter."""
    def loss_fn(p):
        return float(forward(tc.ParamTape(p, record=False)).value)

    def grad_fn(p):
        tape = tc.ParamTape(p)
        return {k: v.copy() for k, v in tape.backward(forward(tape)).items()}

    worst = tc.gradcheck(loss_fn, grad_fn, params, sorted(params), probes, np.random.default_rng(seed))
    bad = {k: v for k, v in worst.items() if v >= TOL}
    assert not bad, bad


H, D, LQ, LK = 2, 8, 3, 5


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_gradcheck_multi_head_cross_attention(rng):
    params = tc.attention_params("a", D, rng, zero_out=False)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal((2, LQ, D))
    kv = tc.const(rng.standard_normal((2, LK, D)))
    mask = np.ones((2, LK), bool); mask[1, 3:] = False
    w = rng.standard_normal((2, LQ, D))
    check(params, lambda t: tc.weighted_sum(
        tc.multi_head_attention(t, "a", tc.const(x), kv=kv, mask=mask, heads=H)[0], w))


def test_gradcheck_self_attention_and_ffn(rng):
    params = tc.attention_params("a", D, rng, zero_out=False)
    params.update(tc.ffn_params("f", D, rng, zero_out=False))
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal((2, LQ, D))
    w = rng.standard_normal((2, LQ, D))

    def fwd(t):
        y, _ = tc.multi_head_attention(t, "a", tc.const(x), heads=H)
        return tc.weighted_sum(tc.feed_forward(t, "f", y), w)

    check(params, fwd)


def test_gradcheck_structural_ops(rng):
    params = {"table": rng.standard_normal((6, D)), "row": rng.standard_normal((1, D)),
              "g": 1 + 0.1 * rng.standard_normal(D), "b": rng.standard_normal(D)}
    idx = np.array([4, 0, 4])
    target = rng.standard_normal((3, 2 * D))

    def fwd(t):
        rows = tc.reshape(tc.gather_rows(t.p("table"), idx), (3, 1, D))
        extra = tc.reshape(tc.broadcast_batch(t.p("row"), 3), (3, 1, D))
        x = tc.concat([rows, extra], axis=1)
        x = tc.scale_batch(tc.gelu(tc.layer_norm(x, t.p("g"), t.p("b"))), np.array([1.0, 0.0, -2.0]))
        return tc.mse(tc.reshape(x, (3, 2 * D)), target)

    check(params, fwd)


def test_determinism(rng):
    params = tc.attention_params("a", D, rng, zero_out=False)
    x = rng.standard_normal((2, LQ, D))
    runs = []
    for _ in range(2):
        tape = tc.ParamTape({k: v.copy() for k, v in params.items()})
        out, _ = tc.multi_head_attention(tape, "a", tc.const(x), heads=H)
        grads = tape.backward(tc.weighted_sum(out, x))
        runs.append((out.value.tobytes(), [grads[k].tobytes() for k in sorted(grads)]))
    assert runs[0] == runs[1]


def test_round_to_float32_is_idempotent(rng):
    p = tc.round_to_float32({"w": rng.standard_normal((3, 3))})
    assert tc.round_to_float32(p)["w"].tobytes() == p["w"].tobytes()
