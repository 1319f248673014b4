"""Tensor ops, the reverse-mode tape, and Adam."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedite.numerics import (AdamState, ConfigurationError, ContractError,
                             EmptyBatchError, ShapeError, Tape, adam_step,
                             backward, concat, gather_rows, layer_norm,
                             linear_forward, mean_all, mse_loss, mul,
                             multi_head_attention, relu, rng_from, softmax_rows,
                             sum_axis)

from oracles import gradient_errors


def constant(tape, values):
    return tape.constant(np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# linear_forward

def test_linear_identity_weight():
    tape = Tape()
    out = linear_forward(constant(tape, [[1.0, 2.0]]),
                         constant(tape, np.eye(2)), constant(tape, [0.0, 0.0]))
    np.testing.assert_array_equal(out.value, [[1.0, 2.0]])


def test_linear_bias_passthrough():
    tape = Tape()
    out = linear_forward(constant(tape, [[5.0, -1.0]]),
                         constant(tape, np.zeros((2, 2))), constant(tape, [3.0, 4.0]))
    np.testing.assert_array_equal(out.value, [[3.0, 4.0]])


def test_linear_hand_case():
    tape = Tape()
    out = linear_forward(constant(tape, [[1.0, 1.0]]),
                         constant(tape, [[1.0, 2.0], [3.0, 4.0]]),
                         constant(tape, [0.0, 0.0]))
    np.testing.assert_allclose(out.value, [[4.0, 6.0]], atol=1e-15)


def test_linear_shape_error_names_both_shapes():
    tape = Tape()
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        linear_forward(constant(tape, [[1.0, 2.0, 3.0]]),
                       constant(tape, np.zeros((2, 2))), constant(tape, [0.0, 0.0]))


# ---------------------------------------------------------------------------
# layer_norm

def test_layer_norm_constant_vector_collapses_to_shift():
    tape = Tape()
    out = layer_norm(constant(tape, [5.0, 5.0, 5.0, 5.0]),
                     constant(tape, np.ones(4)), constant(tape, np.zeros(4)))
    np.testing.assert_allclose(out.value, np.zeros(4), atol=1e-12)


def test_layer_norm_unit_variance_pair():
    tape = Tape()
    out = layer_norm(constant(tape, [1.0, -1.0]), constant(tape, np.ones(2)),
                     constant(tape, np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.value, [1.0, -1.0], atol=1e-6)


def test_layer_norm_zero_gain_returns_shift():
    tape = Tape()
    out = layer_norm(constant(tape, [[2.0, -9.0], [0.3, 4.5]]),
                     constant(tape, np.zeros(2)), constant(tape, [7.0, 7.0]))
    np.testing.assert_array_equal(out.value, [[7.0, 7.0], [7.0, 7.0]])


def test_layer_norm_empty_axis_errors():
    tape = Tape()
    with pytest.raises(ShapeError):
        layer_norm(constant(tape, np.zeros((2, 0))), constant(tape, np.zeros(0)),
                   constant(tape, np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, min_side=2,
                                               max_side=6),
                  elements=st.floats(-10, 10)))
def test_layer_norm_standardizes_nondegenerate_slices(values):
    if values.var(axis=-1).min() < 1e-2:
        return
    tape = Tape()
    d = values.shape[-1]
    out = layer_norm(constant(tape, values), constant(tape, np.ones(d)),
                     constant(tape, np.zeros(d)), eps=1e-12).value
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# softmax_rows

def test_softmax_symmetry():
    tape = Tape()
    np.testing.assert_allclose(softmax_rows(constant(tape, [0.0, 0.0])).value,
                               [0.5, 0.5], atol=1e-15)


def test_softmax_large_scores_no_overflow():
    tape = Tape()
    out = softmax_rows(constant(tape, [1000.0, 0.0])).value
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_closed_form():
    tape = Tape()
    out = softmax_rows(constant(tape, [math.log(2.0), 0.0])).value
    np.testing.assert_allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1,
                                               max_side=7),
                  elements=st.floats(-300, 300)))
def test_softmax_rows_are_stochastic(scores):
    tape = Tape()
    out = softmax_rows(constant(tape, scores)).value
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_masked_positions_are_exactly_zero():
    tape = Tape()
    mask = np.array([True, False, True])
    out = softmax_rows(constant(tape, [1.0, 99.0, 2.0]), mask=mask).value
    assert out[1] == 0.0
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)


def test_softmax_fully_masked_row_errors():
    tape = Tape()
    with pytest.raises(ContractError):
        softmax_rows(constant(tape, [[1.0, 2.0], [3.0, 4.0]]),
                     mask=np.array([[True, True], [False, False]]))


# ---------------------------------------------------------------------------
# multi_head_attention

def identity_attention_params(tape, d):
    params = {}
    for proj in ("wq", "wk", "wv", "wo"):
        params[proj] = constant(tape, np.eye(d))
    for bias in ("bq", "bk", "bv", "bo"):
        params[bias] = constant(tape, np.zeros(d))
    return params


def test_attention_single_key_returns_value_row():
    tape = Tape()
    params = identity_attention_params(tape, 2)
    value_row = np.array([[3.0, -4.0]])
    out, attn = multi_head_attention(constant(tape, [[0.5, 0.5]]),
                                     constant(tape, [[9.0, 9.0]]),
                                     constant(tape, value_row), 1, params)
    np.testing.assert_allclose(out.value, value_row, atol=1e-12)
    np.testing.assert_allclose(attn.value, [[[1.0]]], atol=1e-15)


def test_attention_rows_sum_to_one():
    rng = rng_from(3)
    tape = Tape()
    params = identity_attention_params(tape, 8)
    out, attn = multi_head_attention(constant(tape, rng.normal(size=(5, 8))),
                                     constant(tape, rng.normal(size=(7, 8))),
                                     constant(tape, rng.normal(size=(7, 8))),
                                     4, params)
    np.testing.assert_allclose(attn.value.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_hand_computation():
    rng = rng_from(11)
    q = rng.normal(size=(2, 2))
    k = rng.normal(size=(2, 2))
    v = rng.normal(size=(2, 2))
    # independent recomputation of scaled dot-product attention
    scores = q @ k.T / math.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    a = e / e.sum(axis=-1, keepdims=True)
    expected = a @ v

    tape = Tape()
    params = identity_attention_params(tape, 2)
    out, attn = multi_head_attention(constant(tape, q), constant(tape, k),
                                     constant(tape, v), 1, params)
    np.testing.assert_allclose(out.value, expected, atol=1e-12)
    np.testing.assert_allclose(attn.value, a[None], atol=1e-12)


def test_attention_head_count_must_divide_width():
    tape = Tape()
    params = identity_attention_params(tape, 6)
    with pytest.raises(ConfigurationError):
        multi_head_attention(constant(tape, np.zeros((2, 6))),
                             constant(tape, np.zeros((2, 6))),
                             constant(tape, np.zeros((2, 6))), 4, params)


def test_attention_fully_masked_query_errors():
    tape = Tape()
    params = identity_attention_params(tape, 2)
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(ContractError):
        multi_head_attention(constant(tape, np.zeros((2, 2))),
                             constant(tape, np.zeros((2, 2))),
                             constant(tape, np.zeros((2, 2))), 1, params, mask=mask)


# ---------------------------------------------------------------------------
# mse_loss

def test_mse_zero_on_equal():
    tape = Tape()
    assert float(mse_loss(constant(tape, [1.0, 2.0]),
                          constant(tape, [1.0, 2.0])).value) == 0.0


def test_mse_single_pair():
    tape = Tape()
    assert float(mse_loss(constant(tape, [2.0]), constant(tape, [0.0])).value) == 4.0


def test_mse_hand_case():
    tape = Tape()
    assert float(mse_loss(constant(tape, [1.0, 3.0]),
                          constant(tape, [0.0, 0.0])).value) == 5.0


def test_mse_empty_batch_errors():
    tape = Tape()
    with pytest.raises(EmptyBatchError):
        mse_loss(constant(tape, np.zeros(0)), constant(tape, np.zeros(0)))


def test_mse_shape_mismatch_errors():
    tape = Tape()
    with pytest.raises(ShapeError):
        mse_loss(constant(tape, [1.0, 2.0]), constant(tape, [1.0]))


# ---------------------------------------------------------------------------
# backward

def test_backward_square():
    tape = Tape()
    w = tape.param("w", [3.0])
    grads = backward(tape, mse_loss(w, tape.constant([0.0])))
    np.testing.assert_allclose(grads["w"], [6.0], atol=1e-12)


def test_backward_disconnected_parameter_is_exact_zero():
    tape = Tape()
    w = tape.param("w", [3.0])
    unused = tape.param("unused", np.ones((2, 2)))
    grads = backward(tape, mse_loss(w, tape.constant([1.0])))
    assert grads["unused"].shape == (2, 2)
    assert np.all(grads["unused"] == 0.0)


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    w = tape.param("w", [1.0, 2.0])
    with pytest.raises(ContractError):
        backward(tape, mul(w, w))


def test_backward_rejects_replay():
    tape = Tape()
    w = tape.param("w", [1.0])
    loss = mse_loss(w, tape.constant([0.0]))
    backward(tape, loss)
    with pytest.raises(ContractError):
        backward(tape, loss)


# ---------------------------------------------------------------------------
# gradient checks: every differentiable op against central differences

def run_gradient_check(build, params, seed=0, coords_per_tensor=4):
    tape = Tape()
    nodes = {name: tape.param(name, value) for name, value in params.items()}
    loss = build(tape, nodes)
    grads = backward(tape, loss)

    def forward_value():
        t = Tape()
        frozen = {name: t.constant(value) for name, value in params.items()}
        return float(build(t, frozen).value)

    rng = rng_from(seed)
    coords = []
    for name, value in params.items():
        picks = rng.choice(value.size, size=min(coords_per_tensor, value.size),
                           replace=False)
        coords.extend((name, int(i)) for i in picks)
    errors, _ = gradient_errors(forward_value, params, grads, coords)
    assert errors
    assert max(errors) < 1e-4, f"max relative error {max(errors):.3e}"


def scalarize(node, tape):
    return mean_all(mul(node, node))


def test_grad_linear():
    rng = rng_from(1)
    params = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 5)),
              "b": rng.normal(size=5)}
    run_gradient_check(
        lambda t, n: scalarize(linear_forward(n["x"], n["w"], n["b"]), t), params)


def test_grad_layer_norm():
    rng = rng_from(2)
    params = {"x": rng.normal(size=(4, 6)), "g": rng.normal(size=6),
              "s": rng.normal(size=6)}
    run_gradient_check(
        lambda t, n: scalarize(layer_norm(n["x"], n["g"], n["s"]), t), params)


def test_grad_softmax_masked():
    rng = rng_from(3)
    mask = np.array([[True, True, False, True]] * 3)
    params = {"x": rng.normal(size=(3, 4))}
    run_gradient_check(
        lambda t, n: scalarize(softmax_rows(n["x"], mask=mask), t), params)


def test_grad_attention():
    rng = rng_from(4)
    d = 8
    params = {"q": rng.normal(size=(3, d)), "k": rng.normal(size=(5, d)),
              "v": rng.normal(size=(5, d))}
    for name in ("wq", "wk", "wv", "wo"):
        params[name] = rng.normal(size=(d, d)) * 0.3
    for name in ("bq", "bk", "bv", "bo"):
        params[name] = rng.normal(size=d) * 0.1

    def build(t, n):
        out, attn = multi_head_attention(n["q"], n["k"], n["v"], 2, n)
        return scalarize(out, t)

    run_gradient_check(build, params, coords_per_tensor=3)


def test_grad_gather_concat_sum():
    rng = rng_from(5)
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    params = {"table": rng.normal(size=(4, 6))}

    def build(t, n):
        rows = gather_rows(n["table"], idx)          # [2, 3, 6]
        pooled = sum_axis(rows, axis=1)              # [2, 6]
        joined = concat([pooled, relu(pooled)], axis=1)
        return scalarize(joined, t)

    run_gradient_check(build, params, coords_per_tensor=8)


def test_grad_broadcast_mul():
    rng = rng_from(6)
    params = {"a": rng.normal(size=(3, 4, 5)), "b": rng.normal(size=(4, 1))}
    run_gradient_check(lambda t, n: scalarize(mul(n["a"], n["b"]), t), params)


# ---------------------------------------------------------------------------
# adam

def test_adam_zero_gradient_keeps_params():
    params = {"p": np.array([1.0, -2.0])}
    state = AdamState.for_params(params, lr=0.1)
    new, state = adam_step(params, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["p"], params["p"])
    assert state.step == 1


def test_adam_zero_lr_keeps_params():
    params = {"p": np.array([1.0, -2.0])}
    state = AdamState.for_params(params, lr=0.0)
    new, _ = adam_step(params, {"p": np.array([3.0, -4.0])}, state)
    np.testing.assert_array_equal(new["p"], params["p"])


def test_adam_first_step_magnitude_is_lr():
    params = {"p": np.array([1.0])}
    state = AdamState.for_params(params, lr=0.1)
    new, _ = adam_step(params, {"p": np.array([1.0])}, state)
    assert abs((params["p"][0] - new["p"][0]) - 0.1) < 1e-6


def test_adam_is_pure_and_deterministic():
    rng = rng_from(7)
    params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=2)}
    grads = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=2)}
    state = AdamState.for_params(params, lr=1e-3)
    out1, s1 = adam_step(params, grads, state)
    out2, s2 = adam_step(params, grads, state)
    for name in params:
        np.testing.assert_array_equal(out1[name], out2[name])
        np.testing.assert_array_equal(s1.first_moment[name], s2.first_moment[name])
    # inputs untouched
    assert state.step == 0 and np.all(state.first_moment["a"] == 0.0)


def test_adam_shape_mismatch_errors():
    params = {"p": np.zeros(3)}
    state = AdamState.for_params(params, lr=0.1)
    with pytest.raises(ShapeError):
        adam_step(params, {"p": np.zeros(4)}, state)


def test_adam_many_steps_stay_finite():
    params = {"p": np.array([5.0])}
    state = AdamState.for_params(params, lr=0.05)
    for _ in range(50):
        params, state = adam_step(params, {"p": 2.0 * params["p"]}, state)
    assert np.isfinite(params["p"]).all()
    assert state.step == 50
