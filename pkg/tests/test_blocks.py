import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glanet.blocks import (
    EXTERNAL,
    LEARNED,
    IABlockParams,
    IndicatingMatrix,
    attention_ratio,
    context_normalize,
    ia_block_forward,
    inlier_attention_normalize,
)
from glanet.diffcore import ContractError, ValueGraph, grad_check, mul, total


def const(x):
    return ValueGraph().constant(x)


def cn(x):
    return context_normalize(const(x)).value


def ian(x, r):
    g = ValueGraph()
    return inlier_attention_normalize(g.constant(x), g.constant(r)).value


def test_cn_single_channel_value():
    x = [1.0, 2.0, 3.0]
    mean, sd = statistics.fmean(x), statistics.pstdev(x)
    expected = [(v - mean) / np.sqrt(sd**2 + 1e-8) for v in x]
    out = cn(np.array(x)[:, None]).ravel()
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    np.testing.assert_allclose(out, [-1.224745, 0.0, 1.224745], atol=1e-6)


def test_cn_constant_channel_is_zero():
    np.testing.assert_array_equal(cn(np.full((5, 2), 4.2)), np.zeros((5, 2)))


def test_cn_needs_two_instances():
    with pytest.raises(ContractError):
        cn(np.ones((1, 3)))
    with pytest.raises(ContractError):
        ian(np.ones((1, 3)), np.zeros((1, 1)))


def test_cn_permutation_equivariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(11, 4))
    perm = rng.permutation(11)
    np.testing.assert_allclose(cn(x[perm]), cn(x)[perm], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_cn_zero_mean_unit_variance(x):
    out = cn(x)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    var = x.var(axis=0)
    ok = var > 1e-2  # non-degenerate channels
    np.testing.assert_allclose(out.var(axis=0)[ok], 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)),
       st.floats(-50, 50))
def test_ian_uniform_logits_equals_cn(x, c):
    r = np.full((x.shape[0], 1), c)
    np.testing.assert_allclose(ian(x, r), cn(x), rtol=0, atol=1e-12)


def test_ian_large_logit_pins_the_mean():
    x = np.array([[1.0], [2.0], [3.0]])
    sigma = statistics.pstdev([1.0, 2.0, 3.0])
    out = ian(x, np.array([[50.0], [0.0], [0.0]])).ravel()
    np.testing.assert_allclose(out, [0.0, 1 / sigma, 2 / sigma], atol=1e-6)
    assert sigma == pytest.approx(0.816497, abs=1e-6)


def test_ian_joint_permutation_equivariant():
    rng = np.random.default_rng(1)
    x, r = rng.normal(size=(9, 3)), rng.normal(size=(9, 1))
    perm = rng.permutation(9)
    np.testing.assert_allclose(ian(x[perm], r[perm]), ian(x, r)[perm], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(1)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_indicating_weights_sum_to_n(r):
    ind = IndicatingMatrix.from_logits(r)
    assert np.all(ind.weights > 0)
    assert abs(ind.weights.sum() - r.shape[0]) < 1e-9


def test_indicating_uniform_is_all_ones():
    np.testing.assert_allclose(IndicatingMatrix.from_logits(np.full(6, -2.0)).weights, 1.0)


# --- IA block ------------------------------------------------------------------


def make_block(g, C, mode, rng=None, zero=False):
    def p(*shape):
        return g.leaf(np.zeros(shape) if zero else rng.normal(size=shape) / np.sqrt(C))

    return IABlockParams(p(C, C), p(C, C), p(C, 1) if mode == LEARNED else None, mode)


def test_zero_block_passes_input_through():
    g = ValueGraph()
    x = np.random.default_rng(2).normal(size=(8, 4))
    out, ind = ia_block_forward(g.constant(x), make_block(g, 4, LEARNED, zero=True))
    np.testing.assert_array_equal(out.value, x)
    np.testing.assert_allclose(ind.weights, 1.0)


def test_block_mode_argument_mismatch():
    g = ValueGraph()
    x = g.constant(np.ones((4, 2)))
    r = g.constant(np.zeros((4, 1)))
    with pytest.raises(ContractError):
        ia_block_forward(x, make_block(g, 2, LEARNED, zero=True), r)
    with pytest.raises(ContractError):
        ia_block_forward(x, make_block(g, 2, EXTERNAL, zero=True))


@pytest.mark.parametrize("mode", [LEARNED, EXTERNAL])
def test_block_permutation_equivariant(mode):
    rng = np.random.default_rng(3)
    x, r = rng.normal(size=(10, 5)), rng.normal(size=(10, 1))
    perm = rng.permutation(10)
    weights = [rng.normal(size=(5, 5)), rng.normal(size=(5, 5)), rng.normal(size=(5, 1))]

    def run(xv, rv):
        g = ValueGraph()
        params = IABlockParams(g.constant(weights[0]), g.constant(weights[1]),
                               g.constant(weights[2]) if mode == LEARNED else None, mode)
        out, ind = ia_block_forward(g.constant(xv), params, g.constant(rv) if mode == EXTERNAL else None)
        return out.value, ind.weights

    out, w = run(x, r)
    out_p, w_p = run(x[perm], r[perm])
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)
    np.testing.assert_allclose(w_p, w[perm], atol=1e-12)


def _target(t, seed=0):
    rng = np.random.default_rng(seed + 1000)
    return t.graph.constant(rng.normal(size=t.value.shape))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cn_and_ian_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 3))
    r = rng.normal(size=(7, 1))

    def f_cn(t):
        out = context_normalize(t)
        return total(mul(out, _target(out, seed)))

    def f_ian_x(t):
        out = inlier_attention_normalize(t, t.graph.constant(r))
        return total(mul(out, _target(out, seed)))

    def f_ian_r(t):
        out = inlier_attention_normalize(t.graph.constant(x), t)
        return total(mul(out, _target(out, seed)))

    assert grad_check(f_cn, x) < 1e-4
    assert grad_check(f_ian_x, x) < 1e-4
    assert grad_check(f_ian_r, r) < 1e-4


@pytest.mark.parametrize("which", ["w1", "w2", "wa", "x"])
def test_learned_block_gradients(which):
    rng = np.random.default_rng(4)
    C, N = 3, 9
    values = {"w1": rng.normal(size=(C, C)), "w2": rng.normal(size=(C, C)),
              "wa": rng.normal(size=(C, 1)), "x": rng.normal(size=(N, C))}
    target = rng.normal(size=(N, C))

    def f(t):
        g = t.graph
        leaves = {k: (t if k == which else g.constant(v)) for k, v in values.items()}
        params = IABlockParams(leaves["w1"], leaves["w2"], leaves["wa"], LEARNED)
        out, _ = ia_block_forward(leaves["x"], params)
        return total(mul(out, g.constant(target)))

    assert grad_check(f, values[which]) < 1e-4


def test_external_block_gradient_through_logits():
    rng = np.random.default_rng(5)
    C, N = 3, 8
    w1, w2 = rng.normal(size=(C, C)), rng.normal(size=(C, C))
    x, target = rng.normal(size=(N, C)), rng.normal(size=(N, C))

    def f(t):
        g = t.graph
        params = IABlockParams(g.constant(w1), g.constant(w2), None, EXTERNAL)
        out, _ = ia_block_forward(g.constant(x), params, t)
        return total(mul(out, g.constant(target)))

    assert grad_check(f, rng.normal(size=(N, 1))) < 1e-4


# --- attention ratio -------------------------------------------------------------


def test_attention_ratio_cases():
    uniform = IndicatingMatrix(np.zeros(4), np.ones(4))
    assert attention_ratio(uniform, [1, 0, 1, 0]) == 1.0
    ind = IndicatingMatrix(np.zeros(4), np.array([2.0, 2.0, 0.5, 0.5]))
    assert attention_ratio(ind, [1, 1, 0, 0]) == pytest.approx(4.0)
    assert attention_ratio(ind, [0, 0, 1, 1]) == pytest.approx(0.25)


def test_attention_ratio_single_class_is_error():
    ind = IndicatingMatrix(np.zeros(3), np.ones(3))
    with pytest.raises(ContractError):
        attention_ratio(ind, [1, 1, 1])
    with pytest.raises(ContractError):
        attention_ratio(ind, [0, 0, 0])
