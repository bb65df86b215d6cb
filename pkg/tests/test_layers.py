import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivernet import tensor as T
from drivernet.config import ConfigError
from drivernet.gradcheck import check_gradients, max_error
from drivernet.layers import GRU, Dropout, Linear, MultiHeadAttention, Parameter, ViewAggregator
from drivernet.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def set_params(module, **arrays):
    for name, value in arrays.items():
        getattr(module, name).data[...] = value


# --- fully connected ---------------------------------------------------------


def test_linear_identity_relu():
    fc = Linear(2, 2, rng())
    set_params(fc, W=np.eye(2), b=0.0)
    np.testing.assert_array_equal(fc(Tensor([[-1.0, 2.0]])).data, [[0, 2]])


def test_linear_zero_weights():
    fc = Linear(5, 2, rng())
    set_params(fc, W=0.0, b=[3.0, -1.0])
    out = fc(Tensor(rng(1).normal(size=(4, 5)))).data
    np.testing.assert_array_equal(out, np.tile([3.0, 0.0], (4, 1)))


def test_linear_flattens_leading_axes_and_counts():
    fc = Linear(3, 4, rng())
    assert fc(Tensor(np.ones((2, 5, 3)))).shape == (2, 5, 4)
    assert fc.num_parameters() == 3 * 4 + 4
    with pytest.raises(T.DimensionError):
        fc(Tensor(np.ones((2, 4))))


def test_linear_gradient():
    fc = Linear(3, 4, rng(2))
    x = Tensor(rng(3).normal(size=(5, 3)), requires_grad=True)
    w = rng(4).normal(size=(5, 4))
    reports = check_gradients(lambda: T.sum(fc(x) * w), [x, fc.W, fc.b])
    assert max_error(reports) < 1e-6


# --- attention -----------------------------------------------------------------


def identity_attention(d=2, heads=1):
    mha = MultiHeadAttention(d, heads, rng())
    for name in ("W_Q", "W_K", "W_V", "W_O"):
        set_params(mha, **{name: np.eye(d)})
    return mha


def test_attention_hand_computed_example():
    out = identity_attention()(Tensor([[[1.0, 0.0], [0.0, 1.0]]])).data
    s = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    assert s == pytest.approx(0.6698, abs=5e-5)
    np.testing.assert_allclose(out[0, 0], [s, 1 - s], rtol=1e-14)
    np.testing.assert_allclose(out[0, 1], [1 - s, s], rtol=1e-14)


def test_attention_identical_tokens_give_identical_rows():
    mha = MultiHeadAttention(4, 2, rng(1))
    tok = rng(2).normal(size=4)
    out = mha(Tensor(np.stack([tok, tok])[None])).data
    np.testing.assert_array_equal(out[0, 0], out[0, 1])


def test_attention_is_permutation_equivariant():
    mha = MultiHeadAttention(4, 2, rng(1))
    x = rng(3).normal(size=(2, 5, 4))
    perm = np.array([3, 0, 4, 1, 2])
    a = mha(Tensor(x)).data[:, perm]
    b = mha(Tensor(x[:, perm])).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_attention_single_key_returns_projected_value():
    mha = MultiHeadAttention(4, 2, rng(5))
    q = rng(6).normal(size=(1, 3, 4))
    kv = rng(7).normal(size=(1, 1, 4))
    out = mha(Tensor(q), Tensor(kv)).data
    expected = kv[0, 0] @ mha.W_V.data @ mha.W_O.data
    np.testing.assert_allclose(out[0], np.tile(expected, (3, 1)), rtol=1e-12)


def test_cross_attention_with_same_input_is_self_attention():
    mha = MultiHeadAttention(4, 2, rng(5))
    x = Tensor(rng(8).normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(mha(x, x).data, mha(x).data)


def test_attention_config_and_count():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, rng())
    assert MultiHeadAttention(256, 4, rng()).num_parameters() == 4 * 256**2
    with pytest.raises(T.DimensionError):
        MultiHeadAttention(4, 2, rng())(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((2, 2, 4))))


def test_cross_attention_gradient():
    mha = MultiHeadAttention(4, 2, rng(9))
    q = Tensor(rng(10).normal(size=(1, 2, 4)), requires_grad=True)
    kv = Tensor(rng(11).normal(size=(1, 3, 4)), requires_grad=True)
    w = rng(12).normal(size=(1, 2, 4))
    reports = check_gradients(lambda: T.sum(mha(q, kv) * w), [q, kv, *mha.parameters()])
    assert max_error(reports) < 1e-6


# --- GRU ---------------------------------------------------------------------


def scalar_gru(x, p):
    """Element-by-element reference recurrence written with Python floats only."""
    n, d_in = len(x), len(x[0])
    d_h = len(p["b_z"])
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731

    def affine(gate, xt, hvec):
        return [
            sum(xt[i] * p[f"W_{gate}"][i][j] for i in range(d_in))
            + sum(hvec[k] * p[f"U_{gate}"][k][j] for k in range(d_h))
            + p[f"b_{gate}"][j]
            for j in range(d_h)
        ]

    h = [0.0] * d_h
    out = []
    for t in range(n):
        z = [sig(v) for v in affine("z", x[t], h)]
        r = [sig(v) for v in affine("r", x[t], h)]
        rh = [r[j] * h[j] for j in range(d_h)]
        cand = [
            math.tanh(
                sum(x[t][i] * p["W_h"][i][j] for i in range(d_in))
                + sum(rh[k] * p["U_h"][k][j] for k in range(d_h))
                + p["b_h"][j]
            )
            for j in range(d_h)
        ]
        h = [(1 - z[j]) * h[j] + z[j] * cand[j] for j in range(d_h)]
        out.append(h)
    return out


def test_gru_matches_scalar_recurrence():
    gru = GRU(2, 2, rng(3))
    x = rng(4).normal(size=(1, 3, 2))
    params = {name: p.data.tolist() for name, p in gru.named_parameters()}
    ref = scalar_gru(x[0].tolist(), params)
    np.testing.assert_allclose(gru(Tensor(x)).data[0], ref, rtol=1e-12, atol=1e-15)


def test_gru_zero_weights_stay_zero():
    gru = GRU(3, 4, rng())
    gru.freeze()
    for p in gru.parameters():
        p.data[...] = 0.0
    out = gru(Tensor(rng(1).normal(size=(2, 5, 3)))).data
    assert out.shape == (2, 5, 4)
    assert not out.any()


def test_gru_single_step_is_one_cell():
    gru = GRU(2, 3, rng(5))
    x = rng(6).normal(size=(1, 1, 2))
    params = {name: p.data.tolist() for name, p in gru.named_parameters()}
    np.testing.assert_allclose(gru(Tensor(x)).data[0], scalar_gru(x[0].tolist(), params), rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_gru_is_causal(t, seed):
    gru = GRU(3, 4, rng(seed))
    x = rng(seed + 1).normal(size=(2, 6, 3))
    full = gru(Tensor(x)).data
    prefix = gru(Tensor(x[:, :t])).data
    np.testing.assert_array_equal(full[:, :t], prefix)


def test_gru_parameter_count():
    assert GRU(64, 128, rng()).num_parameters() == 3 * (64 * 128 + 128 * 128 + 128)


def test_gru_gradient():
    gru = GRU(2, 3, rng(7))
    x = Tensor(rng(8).normal(size=(2, 4, 2)), requires_grad=True)
    w = rng(9).normal(size=(2, 4, 3))
    assert max_error(check_gradients(lambda: T.sum(gru(x) * w), [x, *gru.parameters()])) < 1e-5


# --- dropout -----------------------------------------------------------------


def test_dropout_eval_is_identity():
    drop = Dropout(0.5, rng()).eval()
    x = Tensor(rng(1).normal(size=(10, 10)))
    assert drop(x) is x


def test_dropout_statistics():
    drop = Dropout(0.5, rng(2))
    y = drop(Tensor(np.ones(1_000_000))).data
    survivors = np.count_nonzero(y) / y.size
    assert abs(survivors - 0.5) <= 0.01
    assert set(np.unique(y)) == {0.0, 2.0}
    assert abs(y.mean() - 1.0) <= 0.02


def test_dropout_rejects_bad_rate():
    with pytest.raises(ConfigError):
        Dropout(1.0, rng())


# --- view aggregation --------------------------------------------------------


def test_gap_example():
    agg = ViewAggregator("gap", 3, 2, rng())
    out = agg(Tensor([[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]])).data
    np.testing.assert_array_equal(out, [[3.0, 4.0]])
    assert agg.num_parameters() == 0


def test_ws_uniform_equals_gap_and_weights_sum_to_one():
    x = Tensor(rng(1).normal(size=(4, 3, 8)))
    ws = ViewAggregator("ws", 3, 8, rng())
    np.testing.assert_allclose(ws(x).data, ViewAggregator("gap", 3, 8, rng())(x).data, rtol=0, atol=1e-15)
    ws.logits.data[...] = [0.3, -2.0, 1.0]
    assert abs(ws.weights().sum() - 1.0) <= 1e-15
    assert ws.num_parameters() == 3


@settings(max_examples=20, deadline=None)
@given(st.permutations([0, 1, 2]), st.integers(0, 1000))
def test_gap_and_ws_are_view_permutation_invariant(perm, seed):
    x = rng(seed).normal(size=(2, 3, 5))
    gap = ViewAggregator("gap", 3, 5, rng())
    assert np.max(np.abs(gap(Tensor(x)).data - gap(Tensor(x[:, perm])).data)) <= 1e-12
    ws = ViewAggregator("ws", 3, 5, rng())
    ws.logits.data[...] = rng(seed + 1).normal(size=3)
    perm_ws = ViewAggregator("ws", 3, 5, rng())
    perm_ws.logits.data[...] = ws.logits.data[list(perm)]
    assert np.max(np.abs(ws(Tensor(x)).data - perm_ws(Tensor(x[:, perm])).data)) <= 1e-12


def test_conv1d_aggregation_is_not_view_invariant():
    agg = ViewAggregator("conv1d", 3, 4, rng(3))
    x = rng(4).normal(size=(1, 3, 4))
    out = agg(Tensor(x))
    assert out.shape == (1, 4)
    assert not np.allclose(out.data, agg(Tensor(x[:, [2, 0, 1]])).data)
    assert ViewAggregator("conv1d", 3, 256, rng()).num_parameters() == 196_608


def test_aggregator_config_errors():
    with pytest.raises(ConfigError):
        ViewAggregator("conv1d", 2, 4, rng())
    with pytest.raises(ConfigError):
        ViewAggregator("max", 3, 4, rng())
    with pytest.raises(ConfigError):
        ViewAggregator("gap", 3, 4, rng()).weights()


@pytest.mark.parametrize("variant", ["ws", "conv1d"])
def test_aggregator_gradient(variant):
    agg = ViewAggregator(variant, 3, 4, rng(5))
    if variant == "ws":
        agg.logits.data[...] = [0.2, -0.4, 0.9]
    x = Tensor(rng(6).normal(size=(2, 3, 4)), requires_grad=True)
    w = rng(7).normal(size=(2, 4))
    assert max_error(check_gradients(lambda: T.sum(agg(x) * w), [x, *agg.parameters()])) < 1e-5


# --- module plumbing -----------------------------------------------------------


def test_freeze_and_unfreeze():
    fc = Linear(2, 2, rng())
    fc.freeze()
    assert all(p.frozen and p.grad is None for p in fc.parameters())
    fc.unfreeze()
    assert all(not p.frozen for p in fc.parameters())
    assert isinstance(fc.W, Parameter)
    assert [n for n, _ in fc.named_parameters()] == ["W", "b"]
