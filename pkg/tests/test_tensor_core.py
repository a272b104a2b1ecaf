import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorakit import tensor_core as tc


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def check_op(build, *arrays):
    """Gradient of sum(w * build(...)) vs central differences for every input."""
    rng = np.random.default_rng(0)
    out0 = build(*[tc.Node(a) for a in arrays]).value
    w = rng.standard_normal(out0.shape)

    def scalar():
        return float(np.sum(w * build(*[tc.Node(a) for a in arrays]).value))

    tape = tc.Tape()
    leaves = [tape.leaf(a, trainable=True, name=f"x{k}") for k, a in enumerate(arrays)]
    loss = tc.total(tc.mul(build(*leaves), w))
    grads = tc.backward(tape, loss)
    for k, a in enumerate(arrays):
        assert rel_err(grads[f"x{k}"], numeric_grad(scalar, a)) <= 1e-4, f"input {k}"


def test_matmul_and_broadcast_gradients(rng):
    check_op(tc.matmul, rng.standard_normal((3, 4)), rng.standard_normal((4, 5)))
    check_op(tc.matmul, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))
    check_op(tc.matmul, rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2)))
    check_op(tc.add, rng.standard_normal((2, 3, 4)), rng.standard_normal(4))
    check_op(tc.mul, rng.standard_normal((3, 4)), rng.standard_normal((1, 4)))


def test_shape_ops_gradients(rng):
    check_op(lambda a: tc.scale(a, -2.5), rng.standard_normal((3, 3)))
    check_op(lambda a: tc.transpose(a, (1, 0, 2)), rng.standard_normal((2, 3, 4)))
    check_op(lambda a: tc.reshape(a, (6, 2)), rng.standard_normal((3, 4)))
    check_op(lambda a, b: tc.concat([a, b], axis=1), rng.standard_normal((2, 3)), rng.standard_normal((2, 2)))


def test_nonlinearity_gradients(rng):
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    check_op(tc.relu, x)
    check_op(tc.gelu, rng.standard_normal((4, 5)))
    check_op(tc.softmax, rng.standard_normal((3, 6)))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    check_op(lambda a: tc.softmax(a, mask=mask), rng.standard_normal((2, 4, 4)))
    check_op(tc.layernorm, rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6))


def test_embedding_where_cross_entropy_gradients(rng):
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    check_op(lambda t: tc.embedding(t, ids), rng.standard_normal((4, 3)))
    mask = rng.random((2, 3)) > 0.5
    check_op(lambda a, b: tc.where(mask, a, b), rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))
    targets = np.array([[1, 2, 0], [3, 3, 1]])
    weights = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    check_op(lambda z: tc.cross_entropy(z, targets, weights), rng.standard_normal((2, 3, 5)))


def test_cross_entropy_needs_scored_positions():
    with pytest.raises(tc.ContractError):
        tc.cross_entropy(tc.Node(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2)))


def test_frozen_leaves_get_no_gradient(rng):
    tape = tc.Tape()
    W = tape.leaf(rng.standard_normal((3, 3)), name="W")
    A = tape.leaf(rng.standard_normal((2, 3)), trainable=True, name="A")
    x = rng.standard_normal((4, 3))
    loss = tc.total(tc.add(tc.matmul(x, tc.transpose(W)), tc.matmul(tc.matmul(x, tc.transpose(A)), np.ones((2, 3)))))
    grads = tc.backward(tape, loss)
    assert set(grads) == {"A"}
    assert W not in tape.nodes


def test_backward_rejects_non_scalar(rng):
    tape = tc.Tape()
    a = tape.leaf(rng.standard_normal(3), trainable=True, name="a")
    with pytest.raises(tc.ContractError):
        tc.backward(tape, tc.scale(a, 2.0))


def test_matmul_shape_mismatch():
    with pytest.raises(tc.DimensionError):
        tc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_unused_trainable_leaf_gets_zeros(rng):
    tape = tc.Tape()
    a = tape.leaf(rng.standard_normal(3), trainable=True, name="a")
    tape.leaf(rng.standard_normal(2), trainable=True, name="b")
    grads = tc.backward(tape, tc.total(a))
    np.testing.assert_array_equal(grads["b"], np.zeros(2))
    np.testing.assert_array_equal(grads["a"], np.ones(3))


# --- SVD -------------------------------------------------------------------

def check_svd(M):
    res = tc.svd(M)
    p = min(M.shape)
    assert res.U.shape == (M.shape[0], p) and res.V.shape == (M.shape[1], p)
    scale = max(1.0, np.abs(M).max())
    assert np.abs(res.reconstruct() - M).max() <= 1e-10 * scale
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(p), atol=1e-10)
    np.testing.assert_allclose(res.V.T @ res.V, np.eye(p), atol=1e-10)
    assert np.all(np.diff(res.S) <= 1e-12 * scale) and np.all(res.S >= 0)
    np.testing.assert_allclose(res.S, np.linalg.svd(M, compute_uv=False), atol=1e-10 * scale)
    cols = np.arange(p)
    assert np.all(res.U[np.argmax(np.abs(res.U), axis=0), cols] >= 0)


def test_svd_random_matrices():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        m, n = rng.integers(1, 13, size=2)
        check_svd(rng.standard_normal((m, n)))


def test_svd_rank_deficient_and_zero():
    rng = np.random.default_rng(8)
    M = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 6))
    check_svd(M)
    assert np.sum(tc.svd(M).S > 1e-9) == 2
    check_svd(np.zeros((4, 3)))
    check_svd(np.diag([3.0, 3.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_svd_property(m, n, seed):
    check_svd(np.random.default_rng(seed).standard_normal((m, n)) * 10.0 ** np.random.default_rng(seed).integers(-3, 4))


def test_svd_errors():
    with pytest.raises(tc.DimensionError):
        tc.svd(np.zeros(3))
    with pytest.raises(tc.NumericError):
        tc.svd(np.array([[1.0, np.nan]]))


def test_svd_sweep_cap_reports_iterations():
    M = np.random.default_rng(1).standard_normal((6, 6))
    with pytest.raises(tc.NumericError) as info:
        tc.svd(M, max_sweeps=1)
    assert info.value.iterations == 1


# --- AdamW -------------------------------------------------------------------

def test_adamw_first_step_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    hyper = tc.AdamWHyper(lr=0.1, weight_decay=0.01)
    new, state = tc.adamw_step(p, g, tc.AdamWState(), hyper)
    # bias-corrected first step: m_hat = g, v_hat = g^2, so the update is sign(g)
    expected = p["w"] * (1 - 0.1 * 0.01) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(new["w"], expected, rtol=1e-12)
    assert state.step == 1 and state.num_scalars() == 4
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_second_step():
    p = {"w": np.array([0.3])}
    hyper = tc.AdamWHyper(lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    p1, s1 = tc.adamw_step(p, {"w": np.array([1.0])}, tc.AdamWState(), hyper)
    p2, _ = tc.adamw_step(p1, {"w": np.array([-1.0])}, s1, hyper)
    m = 0.9 * 0.1 - 0.1
    v = 0.999 * 0.001 + 0.001
    step = (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p2["w"], p1["w"] - 0.01 * step, rtol=1e-12)


def test_adamw_minimizes_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    state = tc.AdamWState()
    hyper = tc.AdamWHyper(lr=0.1)
    for _ in range(500):
        p, state = tc.adamw_step(p, {"w": 2 * p["w"]}, state, hyper)
    assert np.abs(p["w"]).max() < 1e-2


def test_adamw_shape_mismatch():
    with pytest.raises(tc.DimensionError):
        tc.adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, tc.AdamWState(), tc.AdamWHyper())


def test_count_ops():
    with tc.count_ops() as counts:
        tc.matmul(np.eye(2), np.eye(2))
        tc.relu(np.eye(2))
    assert counts["matmul"] == 1 and counts["relu"] == 1
