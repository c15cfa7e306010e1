import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diarkit.layers import (BLSTM, LSTM, Linear, MultiHeadSelfAttention, TransformerEncoderLayer,
                            blstm_forward, linear_forward, lstm_cell_step, mhsa_forward,
                            transformer_layer_forward)
from diarkit.tensor import ShapeError, Tensor, grad_check


def _zero_params(module):
    for p in module.parameters().values():
        p.data[...] = 0.0


def _check_all_params(module, loss_fn, rng, picks=4, tol=1e-4):
    worst = 0.0
    for name, p in module.named_parameters():
        idx = [tuple(int(rng.integers(n)) for n in p.shape) for _ in range(picks)]
        worst = max(worst, grad_check(lambda _: loss_fn(), p, indices=idx))
    assert worst < tol


# ------------------------------------------------------------------ Linear
def test_linear_identity(rng):
    layer = Linear(3, 3, rng)
    layer.weight.data[...] = np.eye(3)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(linear_forward(Tensor(x), layer).data, x)


def test_linear_forced_value(rng):
    layer = Linear(2, 1, rng)
    layer.weight.data[...] = [[1.0], [1.0]]
    layer.bias.data[...] = [0.5]
    assert linear_forward(Tensor([1.0, 1.0]), layer).data.tolist() == [2.5]


def test_linear_shape_error(rng):
    with pytest.raises(ShapeError):
        Linear(3, 2, rng)(Tensor(np.zeros((4, 5))))


def test_linear_gradients(rng):
    layer = Linear(5, 3, rng)
    x = Tensor(rng.uniform(-1, 1, size=(2, 4, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4, 3)))
    assert grad_check(lambda t: (layer(t) * w).sum(), x) < 1e-4
    _check_all_params(layer, lambda: (layer(x) * w).sum(), rng)


# -------------------------------------------------------------------- LSTM
def test_cell_step_zero_params(rng):
    cell = LSTM(3, 4, rng)
    _zero_params(cell)
    c0 = rng.normal(size=(2, 4))
    h, c = lstm_cell_step(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(c0), cell)
    np.testing.assert_allclose(c.data, 0.5 * c0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), atol=1e-15)
    h, c = lstm_cell_step(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), cell)
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_cell_step_gradients(rng):
    cell = LSTM(3, 4, rng)
    x, h, c = (Tensor(rng.uniform(-1, 1, size=s), requires_grad=True) for s in [(2, 3), (2, 4), (2, 4)])
    w = rng.normal(size=(2, 4))

    def loss():
        h2, c2 = lstm_cell_step(x, h, c, cell)
        return (h2 * Tensor(w)).sum() + (c2 * c2).sum()

    for t in (x, h, c):
        assert grad_check(lambda _: loss(), t) < 1e-4
    _check_all_params(cell, loss, rng)


def test_fused_lstm_matches_cell_steps(rng):
    cell = LSTM(3, 5, rng)
    x = rng.normal(size=(2, 7, 3))
    hs, (h_last, c_last) = cell(Tensor(x))
    h = c = Tensor(np.zeros((2, 5)))
    for t in range(7):
        h, c = lstm_cell_step(Tensor(x[:, t]), h, c, cell)
        np.testing.assert_allclose(hs.data[:, t], h.data, atol=1e-13)
    np.testing.assert_allclose(h_last.data, h.data, atol=1e-13)
    np.testing.assert_allclose(c_last.data, c.data, atol=1e-13)


def test_forget_bias_and_orthogonal_recurrence(rng):
    cell = LSTM(3, 4, rng)
    assert np.all(cell.bias.data[4:8] == 1.0)
    block = cell.w_hh.data[:, :4]
    np.testing.assert_allclose(block.T @ block, np.eye(4), atol=1e-12)


# ------------------------------------------------------------------- BLSTM
def test_blstm_single_frame(rng):
    layer = BLSTM(3, 4, rng)
    x = rng.normal(size=(1, 3))
    y = blstm_forward(Tensor(x), layer).data
    f, _ = layer.fwd(Tensor(x[None]))
    b, _ = layer.bwd(Tensor(x[None]))
    np.testing.assert_allclose(y[0, :4], f.data[0, 0], atol=1e-15)
    np.testing.assert_allclose(y[0, 4:], b.data[0, 0], atol=1e-15)


def test_blstm_time_reversal_symmetry(rng):
    """With the two directions' weights exchanged, reversing time swaps the halves."""
    layer = BLSTM(3, 4, rng)
    swapped = BLSTM(3, 4, rng)
    for name in ("w_ih", "w_hh", "bias"):
        getattr(swapped.fwd, name).data[...] = getattr(layer.bwd, name).data
        getattr(swapped.bwd, name).data[...] = getattr(layer.fwd, name).data
    x = rng.normal(size=(2, 6, 3))
    y = layer.forward_noproj(Tensor(x)).data
    y_rev = swapped.forward_noproj(Tensor(x[:, ::-1])).data
    expected = np.concatenate([y[..., 4:], y[..., :4]], axis=-1)[:, ::-1]
    np.testing.assert_allclose(y_rev, expected, atol=1e-10)


def test_blstm_tied_weights_reverse(rng):
    layer = BLSTM(3, 4, rng)
    for name in ("w_ih", "w_hh", "bias"):
        getattr(layer.bwd, name).data[...] = getattr(layer.fwd, name).data
    x = rng.normal(size=(1, 5, 3))
    y = layer.forward_noproj(Tensor(x)).data
    y_rev = layer.forward_noproj(Tensor(x[:, ::-1])).data
    np.testing.assert_allclose(y_rev, np.concatenate([y[..., 4:], y[..., :4]], -1)[:, ::-1], atol=1e-10)


def test_blstm_shapes_and_gradients(rng):
    layer = BLSTM(3, 4, rng, proj=5)
    assert layer.out_dim == 5
    x = Tensor(rng.uniform(-1, 1, size=(2, 4, 3)), requires_grad=True)
    assert layer(x).shape == (2, 4, 5)
    assert BLSTM(3, 4, rng)(x).shape == (2, 4, 8)
    w = Tensor(rng.normal(size=(2, 4, 5)))
    assert grad_check(lambda t: (layer(t) * w).sum(), x) < 1e-4
    _check_all_params(layer, lambda: (layer(x) * w).sum(), rng)


# ---------------------------------------------------------------- attention
def test_attention_single_token(rng):
    attn = MultiHeadSelfAttention(4, 2, rng)
    x = Tensor(rng.normal(size=(1, 4)))
    np.testing.assert_allclose(mhsa_forward(x, attn).data, attn.out(attn.v(x)).data, atol=1e-14)


def test_attention_hand_computation(rng):
    attn = MultiHeadSelfAttention(2, 1, rng)
    wq, wk = np.array([[1.0, 0.5], [0.0, 1.0]]), np.array([[0.5, 0.0], [1.0, 1.0]])
    wv, wo = np.array([[2.0, 0.0], [0.0, 1.0]]), np.eye(2)
    attn.q.weight.data[...], attn.k.weight.data[...] = wq, wk
    attn.v.weight.data[...], attn.out.weight.data[...] = wv, wo
    attn.q.bias.data[...] = attn.v.bias.data[...] = attn.out.bias.data[...] = 0.0
    x = np.array([[1.0, 2.0], [0.5, -1.0]])
    out = mhsa_forward(Tensor(x), attn).data
    for i in range(2):
        q = x[i] @ wq
        scores = [q @ (x[j] @ wk) / np.sqrt(2.0) for j in range(2)]
        w = np.exp(scores) / np.sum(np.exp(scores))
        expected = sum(w[j] * (x[j] @ wv) for j in range(2)) @ wo
        np.testing.assert_allclose(out[i], expected, atol=1e-10)


def test_attention_heads_must_divide(rng):
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(6, 4, rng)


@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_transformer_permutation_equivariance(length, seed):
    rng = np.random.default_rng(seed)
    layer = TransformerEncoderLayer(8, 2, 12, rng)
    x = rng.normal(size=(length, 8))
    perm = rng.permutation(length)
    a = transformer_layer_forward(Tensor(x[perm]), layer).data
    b = transformer_layer_forward(Tensor(x), layer).data[perm]
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_positional_encoding_breaks_equivariance(rng):
    layer = TransformerEncoderLayer(8, 2, 12, rng, use_positional_encoding=True)
    x = rng.normal(size=(5, 8))
    perm = np.array([4, 3, 2, 1, 0])
    a = layer(Tensor(x[perm])).data
    b = layer(Tensor(x)).data[perm]
    assert np.abs(a - b).max() > 1e-6


def test_transformer_zero_weights_is_identity(rng):
    layer = TransformerEncoderLayer(8, 2, 12, rng)
    for mod in (layer.attn.q, layer.attn.k, layer.attn.v, layer.attn.out, layer.ff1, layer.ff2):
        _zero_params(mod)
    x = rng.normal(size=(3, 5, 8))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_transformer_gradients(rng):
    layer = TransformerEncoderLayer(8, 2, 12, rng)
    x = Tensor(rng.uniform(-1, 1, size=(2, 5, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 5, 8)))
    assert grad_check(lambda t: (layer(t) * w).sum(), x) < 1e-4
    _check_all_params(layer, lambda: (layer(x) * w).sum(), rng)


@pytest.mark.parametrize("length", [1, 2, 7])
def test_layers_preserve_length(length, rng):
    x = Tensor(rng.normal(size=(length, 6)))
    assert BLSTM(6, 3, rng)(x).shape[0] == length
    assert TransformerEncoderLayer(6, 3, 4, rng)(x).shape == (length, 6)
    assert MultiHeadSelfAttention(6, 2, rng)(x).shape == (length, 6)
