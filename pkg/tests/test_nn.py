import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casep.nn import (
    AdamState,
    MlpSpec,
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    adam_step,
    finite_difference_check,
    init_identity,
    init_random,
    linear_forward,
    mlp,
    mlp_forward,
    per_style_linear_forward,
)
from casep.nn import tape as T


def test_linear_forward_examples():
    np.testing.assert_array_equal(linear_forward([1, 2], np.eye(2), [0, 0]), [1, 2])
    np.testing.assert_array_equal(linear_forward([1, 2], np.zeros((2, 2)), [3, 4]), [3, 4])
    np.testing.assert_array_equal(linear_forward([1, 2], [[1, 1], [0, 2]], [0, 0]), [3, 4])
    with pytest.raises(ShapeError):
        linear_forward([1, 2, 3], np.eye(2), [0, 0])


def test_per_style_linear_examples():
    M = np.stack([np.eye(2), np.zeros((2, 2))])
    out = per_style_linear_forward([[1, 2], [3, 4]], M, np.zeros((2, 2)))
    np.testing.assert_array_equal(out, [[1, 2], [0, 0]])
    # hand products: row0 [1,2] @ [[2,0],[1,1]].T = [2, 3]; row1 [3,4] @ [[0,1],[1,0]].T = [4, 3]
    M = np.array([[[2, 0], [1, 1]], [[0, 1], [1, 0]]], dtype=float)
    out = per_style_linear_forward([[1, 2], [3, 4]], M, [[0, 0], [1, 1]])
    np.testing.assert_array_equal(out, [[2, 3], [5, 4]])
    with pytest.raises(ShapeError):
        per_style_linear_forward(np.ones((3, 2)), M, np.zeros((2, 2)))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_per_style_rows_independent(seed):
    rng = np.random.default_rng(seed)
    k, d = 3, 4
    M, b, w = rng.normal(size=(k, d, d)), rng.normal(size=(k, d)), rng.normal(size=(k, d))
    base = per_style_linear_forward(w, M, b)
    w2 = w.copy()
    w2[0] += rng.normal(size=d)
    out = per_style_linear_forward(w2, M, b)
    np.testing.assert_array_equal(out[1:], base[1:])


def test_mlp_depth1_identity_equals_linear_bitwise():
    rng = np.random.default_rng(0)
    spec = MlpSpec(5, 3, depth=1, activation="identity")
    params = init_random(spec, rng)
    params["0.b"] = rng.normal(size=3)
    x = rng.normal(size=(7, 5))
    out, _, _ = mlp_forward(x, spec, params)
    assert np.array_equal(out, linear_forward(x, params["0.W"], params["0.b"]))


def test_mlp_zero_params_zero_output():
    spec = MlpSpec(4, 4, depth=3, width=6)
    params = {k: np.zeros_like(v) for k, v in init_random(spec, np.random.default_rng(1)).items()}
    out, _, _ = mlp_forward(np.random.default_rng(2).normal(size=(5, 4)), spec, params)
    assert np.all(out == 0)


def test_mlp_two_layer_hand_value():
    # pre-activation [1, -2] -> lrelu(0.2) -> [1, -0.4] -> [1, 1].h + 0.5 = 1.1
    spec = MlpSpec(2, 1, depth=2, width=2, slope=0.2)
    params = {"0.W": np.eye(2), "0.b": np.zeros(2), "1.W": np.array([[1.0, 1.0]]), "1.b": np.array([0.5])}
    out, _, _ = mlp_forward(np.array([[1.0, -2.0]]), spec, params)
    assert out[0, 0] == pytest.approx(1.1, abs=1e-15)


def test_mlp_rejects_malformed_params():
    spec = MlpSpec(3, 2, depth=2, width=4)
    params = init_random(spec, np.random.default_rng(0))
    params["1.W"] = np.zeros((3, 4))
    with pytest.raises(ShapeError):
        mlp_forward(np.ones((1, 3)), spec, params)


def test_identity_init_is_identity():
    rng = np.random.default_rng(0)
    for spec in (MlpSpec(6, 6, depth=4, width=12), MlpSpec(3, 3, depth=3, width=8, styles=4)):
        params = init_identity(spec, rng, noise=0.0)
        shape = (10, 6) if spec.styles is None else (10, 4, 3)
        x = rng.normal(size=shape)
        out, _, _ = mlp_forward(x, spec, params)
        np.testing.assert_allclose(out, x, atol=1e-12)


def test_backward_constant_loss_zero_grads():
    tape = Tape()
    W = tape.param(np.ones((2, 2)), "W")
    c = tape.const(np.array([1.0, 2.0]))
    loss = T.sum_all(c)
    grads = tape.backward(loss)
    assert np.all(grads["W"] == 0)
    assert W.value.shape == (2, 2)


def test_backward_closed_form_quadratic():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(1, 3))
    M = rng.normal(size=(4, 3))
    tape = Tape()
    Mn = tape.param(M, "M")
    y = T.linear(tape.const(w), Mn, np.zeros(4))
    grads = tape.backward(T.sum_all(T.square(y)))
    expected = 2.0 * np.outer(w @ M.T, w)
    np.testing.assert_allclose(grads["M"], expected, rtol=1e-13)


def test_backward_contract_violations():
    tape, other = Tape(), Tape()
    x = tape.param(np.ones(3), "x")
    with pytest.raises(TapeError):
        other.backward(T.sum_all(x))
    with pytest.raises(TapeError):
        tape.backward(x)  # not scalar
    with pytest.raises(TapeError):
        T.add(x, other.param(np.ones(3), "y"))


@pytest.mark.parametrize("seed", range(100))
def test_random_small_nets_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    styles = None if seed % 2 else 2
    spec = MlpSpec(2, 2, depth=int(rng.integers(1, 4)), width=3, styles=styles)
    params = init_random(spec, rng)
    for k in params:
        params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
    x = rng.normal(size=(4, 2) if styles is None else (4, 2, 2))
    target = rng.normal(size=x.shape)

    def loss(tape, p):
        return T.mean_sq_norm(mlp(tape.const(x), spec, p) - target)

    report = finite_difference_check(loss, params, tolerance=1e-4)
    assert report.passed, report


def test_fd_oracle_linear_exact_and_deep_net():
    rng = np.random.default_rng(4)
    spec = MlpSpec(3, 1, depth=1, activation="identity")
    params = init_random(spec, rng)
    x = rng.normal(size=(5, 3))
    rep = finite_difference_check(lambda t, p: T.sum_all(mlp(t.const(x), spec, p)), params)
    assert rep.max_rel_err < 1e-8 and rep.checked == 4

    spec = MlpSpec(3, 2, depth=5, width=6)
    params = init_random(spec, rng)
    rep = finite_difference_check(lambda t, p: T.mean_sq_norm(mlp(t.const(x), spec, p)), params, tolerance=1e-6)
    assert rep.passed and rep.checked > 0


def test_fd_flags_kink():
    spec = MlpSpec(1, 1, depth=2, width=1)
    params = {"0.W": np.array([[1.0]]), "0.b": np.array([0.0]), "1.W": np.array([[1.0]]), "1.b": np.array([0.0])}
    x = np.array([[0.0]])
    rep = finite_difference_check(lambda t, p: T.sum_all(mlp(t.const(x), spec, p)), params)
    assert rep.at_kink and rep.checked == 0 and rep.skipped == 4


def test_leaky_relu_right_derivative_at_zero():
    tape = Tape()
    x = tape.param(np.array([0.0, -1.0, 2.0]), "x")
    g = tape.backward(T.sum_all(T.leaky_relu(x, 0.2)))["x"]
    np.testing.assert_array_equal(g, [1.0, 0.2, 1.0])


def test_adam_zero_gradient_fixed_point():
    state = AdamState(lr=0.1)
    p = {"a": np.array([1.0, -2.0])}
    for _ in range(5):
        adam_step(state, p, {"a": np.zeros(2)})
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])
    assert state.step == 5 and np.all(state.m["a"] == 0)


def test_adam_first_step_magnitude():
    state = AdamState(lr=0.05, eps=1e-12)
    p = {"a": np.array([1.0, 1.0])}
    adam_step(state, p, {"a": np.array([0.3, -7.0])})
    np.testing.assert_allclose(p["a"], [1.0 - 0.05, 1.0 + 0.05], rtol=1e-9)


def test_adam_two_step_hand_recurrence():
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.4
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    p = {"a": np.array([2.0])}
    x, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        adam_step(state, p, {"a": np.array([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        assert p["a"][0] == pytest.approx(x, abs=1e-15)


def test_adam_nan_surfaces():
    with pytest.raises(NumericError):
        adam_step(AdamState(), {"a": np.zeros(2)}, {"a": np.array([np.nan, 0.0])})


def test_ops_gradients_fd():
    rng = np.random.default_rng(7)
    params = {"a": rng.normal(size=(6, 3)), "b": rng.normal(size=(6, 3))}

    def loss(tape, p):
        z = T.concat([p["a"], p["b"]], axis=1)
        s = T.sigmoid(T.linear(z, np.ones((2, 6)) * 0.3, np.zeros(2)))
        sp = T.softplus(T.mul(p["a"], p["b"]))
        shuffled = T.take_rows(p["b"], np.array([1, 2, 3, 4, 5, 0]))
        lse = T.logsumexp(T.mul(p["a"], shuffled))
        r = T.reshape(p["a"], (6, 3, 1))
        return T.mean_all(s) + T.sum_all(sp) + lse + T.sum_all(T.row_sq_norm(r))

    rep = finite_difference_check(loss, params, tolerance=1e-6)
    assert rep.passed, rep


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    spec = MlpSpec(4, 4, depth=3, width=8)
    params = init_random(spec, rng)
    x = rng.normal(size=(3, 4))
    a, _, _ = mlp_forward(x, spec, params)
    b, _, _ = mlp_forward(x, spec, params)
    assert np.array_equal(a, b)
