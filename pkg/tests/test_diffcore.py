import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glanet.diffcore import (
    AdamState,
    ContractError,
    ValueGraph,
    activation,
    adam_step,
    add,
    grad_check,
    log,
    matmul,
    mul,
    pointwise_linear,
    relu,
    scale,
    sigmoid,
    softmax_over_instances,
    total,
)


def const(x):
    return ValueGraph().constant(x)


def test_pointwise_linear_identity():
    g = ValueGraph()
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = pointwise_linear(g.constant(x), g.constant(np.eye(3)), g.constant(np.zeros(3)))
    np.testing.assert_array_equal(out.value, x)


def test_pointwise_linear_direct_value():
    g = ValueGraph()
    out = pointwise_linear(g.constant([[1.0, 2.0]]), g.constant([[1.0], [1.0]]), g.constant([0.5]))
    assert out.value.tolist() == [[3.5]]


def test_pointwise_linear_permutation_equivariant():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(7, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    perm = rng.permutation(7)
    g = ValueGraph()
    out = pointwise_linear(g.constant(x), g.constant(W), g.constant(b)).value
    out_p = pointwise_linear(g.constant(x[perm]), g.constant(W), g.constant(b)).value
    np.testing.assert_allclose(out_p, out[perm], atol=1e-14)


def test_pointwise_linear_shape_mismatch():
    g = ValueGraph()
    with pytest.raises(ContractError):
        pointwise_linear(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 2))), g.constant(np.zeros(2)))
    with pytest.raises(ContractError):
        pointwise_linear(g.constant(np.ones((2, 3))), g.constant(np.ones((3, 2))), g.constant(np.zeros(3)))


def test_activations():
    assert activation(const([[-1.0], [0.0], [2.0]]), "relu").value.ravel().tolist() == [0, 0, 2]
    assert activation(const([[0.0]]), "sigmoid").value.item() == 0.5
    assert activation(const([[math.log(3)]]), "sigmoid").value.item() == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ContractError):
        activation(const([[0.0]]), "tanh")


def test_sigmoid_is_stable_at_extremes():
    s = sigmoid(const([[-800.0], [800.0]])).value.ravel()
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[1] == 1.0


def test_softmax_cases():
    np.testing.assert_allclose(softmax_over_instances(const(np.full((4, 1), 3.3))).value.ravel(), [0.25] * 4)
    r = np.log([[1.0], [2.0], [3.0]])
    np.testing.assert_allclose(softmax_over_instances(const(r)).value.ravel(), [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)
    s1 = softmax_over_instances(const(r)).value
    s2 = softmax_over_instances(const(r + 7)).value
    np.testing.assert_allclose(s1, s2, rtol=1e-14)


def test_softmax_large_logits_finite():
    s = softmax_over_instances(const([[1000.0], [0.0]])).value
    assert np.all(np.isfinite(s)) and s[0, 0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.just(1)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_sums_to_one(r):
    s = softmax_over_instances(const(r)).value
    assert np.all(s > 0)
    assert abs(s.sum() - 1.0) < 1e-12


def test_backward_linear_and_quadratic():
    x = np.random.default_rng(2).normal(size=(4, 3))
    g = ValueGraph()
    leaf = g.leaf(x, "x")
    np.testing.assert_array_equal(g.backward(total(leaf))["x"], np.ones_like(x))

    g = ValueGraph()
    leaf = g.leaf(x, "x")
    grads = g.backward(scale(total(mul(leaf, leaf)), 0.5))
    np.testing.assert_allclose(grads["x"], x, rtol=1e-15)


def test_backward_without_forward_is_contract_error():
    g = ValueGraph()
    other = ValueGraph().constant(1.0)
    with pytest.raises(ContractError):
        g.backward(other)


def test_backward_rejects_non_scalar():
    g = ValueGraph()
    with pytest.raises(ContractError):
        g.backward(g.leaf(np.ones((2, 2)), "x"))


def test_grad_accumulates_over_shared_use():
    g = ValueGraph()
    x = g.leaf(np.array([[2.0]]), "x")
    y = add(mul(x, x), x)  # x^2 + x
    assert g.backward(total(y))["x"].item() == pytest.approx(5.0)


def test_grad_check_linear_is_exact():
    W = np.random.default_rng(3).normal(size=(3, 2))

    def f(x):
        return total(matmul(x, x.graph.constant(W)))

    assert grad_check(f, np.random.default_rng(4).normal(size=(5, 3))) < 1e-10


def test_grad_check_sigmoid_composition():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(3, 2))

    def f(x):
        return total(sigmoid(matmul(sigmoid(x), x.graph.constant(W))))

    assert grad_check(f, rng.normal(size=(4, 3)), h=1e-5) < 1e-6


def _away_from_kinks(x, margin=1e-3):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


@pytest.mark.parametrize("prim", ["relu", "sigmoid", "log", "linear", "softmax", "mul"])
def test_primitive_backward_matches_finite_differences(prim):
    rng = np.random.default_rng(hash(prim) % 2**32)
    x = _away_from_kinks(rng.normal(size=(6, 3)))
    w = rng.normal(size=(6, 3))
    W, b = rng.normal(size=(3, 2)), rng.normal(size=2)

    def f(t):
        g = t.graph
        if prim == "relu":
            out = relu(t)
        elif prim == "sigmoid":
            out = sigmoid(t)
        elif prim == "log":
            out = log(mul(t, t), 0.1)
        elif prim == "linear":
            out = pointwise_linear(t, g.constant(W), g.constant(b))
        elif prim == "softmax":
            out = softmax_over_instances(matmul(t, g.constant(W[:, :1])))
            out = mul(out, g.constant(w[:, :1]))
        else:
            out = mul(t, g.constant(w))
        return total(mul(out, out))

    assert grad_check(f, x) < 1e-4


def test_grad_check_rejects_non_finite():
    def f(x):
        return total(log(x))

    with pytest.raises(ContractError):
        grad_check(f, np.array([[1e-6]]), h=1e-5)


def test_relu_subgradient_at_zero_is_zero():
    g = ValueGraph()
    x = g.leaf(np.array([[0.0], [1.0]]), "x")
    assert g.backward(total(relu(x)))["x"].ravel().tolist() == [0.0, 1.0]


def test_forward_backward_bitwise_deterministic():
    rng = np.random.default_rng(6)
    x, W = rng.normal(size=(9, 4)), rng.normal(size=(4, 1))

    def run():
        g = ValueGraph()
        xl = g.leaf(x, "x")
        out = total(mul(softmax_over_instances(matmul(xl, g.constant(W))), g.constant(x[:, :1])))
        return out.value.tobytes(), g.backward(out)["x"].tobytes()

    assert run() == run()


# --- Adam -----------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    # bias-corrected m/sqrt(v) = g/|g| on the first step, so each coordinate moves by ~lr
    g = np.array([3.0, -0.5, 1e-2])
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": g}, AdamState(), 1e-3)
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_is_deterministic_and_counts_steps():
    def run():
        p = {"w": np.array([0.3, 0.7])}
        s = AdamState()
        for _ in range(2):
            adam_step(p, {"w": np.array([0.1, -0.2])}, s, 1e-3)
        return p["w"].tobytes(), s.t

    a, b = run(), run()
    assert a == b and a[1] == 2


def test_adam_names_non_finite_parameter():
    with pytest.raises(ContractError, match="bad"):
        adam_step({"bad": np.zeros(1)}, {"bad": np.array([np.nan])}, AdamState(), 1e-3)
    with pytest.raises(ContractError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, AdamState(), 0.0)
