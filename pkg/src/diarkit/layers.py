"""Sequence-modeling layers on top of :mod:`diarkit.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Parameter container.  Parameters are discovered from attributes in
    definition order, which fixes checkpoint layout."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def _param(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = _param(xavier_uniform(rng, n_in, n_out))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise tn.ShapeError(f"linear expects last axis {self.n_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        y = tn.matmul(x.reshape(-1, self.n_in), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, self.n_out)


def linear_forward(x: Tensor, layer: Linear) -> Tensor:
    return layer(x)


class LSTM(Module):
    """Unidirectional LSTM; weights are [in, 4H] and [H, 4H], gates i, f, g, o."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.n_in, self.hidden = n_in, hidden
        self.w_ih = _param(np.concatenate(
            [xavier_uniform(rng, n_in, hidden) for _ in range(4)], axis=1))
        self.w_hh = _param(np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=1))
        b = np.zeros(4 * hidden)
        b[hidden: 2 * hidden] = 1.0
        self.bias = _param(b)

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor] | None = None):
        """x: [N, T, in] -> (hidden states [N, T, H], (h_T, c_T))."""
        n = x.shape[0]
        if state is None:
            zeros = Tensor(np.zeros((n, self.hidden)))
            state = (zeros, zeros)
        out = tn.lstm_sequence(x, state[0], state[1], self.w_ih, self.w_hh, self.bias)
        hid = self.hidden
        hs = out[:, :, :hid]
        return hs, (out[:, -1, :hid], out[:, -1, hid:])


def lstm_cell_step(x: Tensor, h: Tensor, c: Tensor, params: LSTM) -> tuple[Tensor, Tensor]:
    """One LSTM step written with primitive ops (reference for the fused kernel)."""
    hid = params.hidden
    z = tn.matmul(x, params.w_ih) + tn.matmul(h, params.w_hh) + params.bias
    i = tn.sigmoid(z[..., :hid])
    f = tn.sigmoid(z[..., hid: 2 * hid])
    g = tn.tanh(z[..., 2 * hid: 3 * hid])
    o = tn.sigmoid(z[..., 3 * hid:])
    c_new = f * c + i * g
    return o * tn.tanh(c_new), c_new


class BLSTM(Module):
    """Bidirectional LSTM with an optional output projection (2H -> proj)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, proj: int | None = None):
        self.n_in, self.hidden = n_in, hidden
        self.fwd = LSTM(n_in, hidden, rng)
        self.bwd = LSTM(n_in, hidden, rng)
        self.proj = Linear(2 * hidden, proj, rng) if proj else None
        self.out_dim = proj or 2 * hidden

    def forward_noproj(self, x: Tensor) -> Tensor:
        hf, _ = self.fwd(x)
        hb, _ = self.bwd(tn.flip(x, 1))
        return tn.concat([hf, tn.flip(hb, 1)], axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        """x: [N, T, in] or [T, in]."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        y = self.forward_noproj(x)
        if self.proj is not None:
            y = self.proj(y)
        return y.reshape(*y.shape[1:]) if squeeze else y


def blstm_forward(x: Tensor, layer: BLSTM) -> Tensor:
    return layer(x)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each score row by a constant, so it is omitted
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        """x: [..., L, d]; attention runs over L independently for each leading index."""
        *lead, length, dim = x.shape
        dh = dim // self.heads

        def split(t: Tensor) -> Tensor:
            t = t.reshape(-1, length, self.heads, dh)
            return tn.transpose(t, (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        ctx = tn.matmul(tn.softmax(scores, axis=-1), v)
        ctx = tn.transpose(ctx, (0, 2, 1, 3)).reshape(*lead, length, dim)
        return self.out(ctx)


def mhsa_forward(x: Tensor, layer: MultiHeadSelfAttention) -> Tensor:
    return layer(x)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gain, self.bias, self.eps)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return pe


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: x + MHSA(LN(x)), then + FFN(LN(.)) with GELU."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator,
                 use_positional_encoding: bool = False):
        self.dim = dim
        self.out_dim = dim
        self.use_positional_encoding = use_positional_encoding
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ffn_dim, rng)
        self.ff2 = Linear(ffn_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.use_positional_encoding:
            x = x + Tensor(sinusoidal_positions(x.shape[-2], self.dim))
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(tn.gelu(self.ff1(self.norm2(x))))


def transformer_layer_forward(x: Tensor, layer: TransformerEncoderLayer) -> Tensor:
    return layer(x)
