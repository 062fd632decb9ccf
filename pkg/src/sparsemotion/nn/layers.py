"""Layer set for the motion prior and the sequence model.

Modules hold their parameters as leaf tensors and discover children through
attribute order, so parameter names are stable (``enc.layers.0.attn.wq.weight``).
Transformer blocks use pre-normalisation; no dropout, so every forward pass
is deterministic.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = _param(uniform_fan_in(rng, d_in, (d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got input shape {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, rng, d_model, n_heads):
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    def _split(self, x):
        B, L, _ = x.shape
        return x.reshape(B, L, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def forward(self, query, key_value):
        """``query``: ``(B, Lq, D)``; ``key_value``: ``(B, Lk, D)``."""
        if query.ndim != 3 or key_value.ndim != 3 or query.shape[0] != key_value.shape[0]:
            raise ShapeError(f"attention shapes incompatible: {query.shape} vs {key_value.shape}")
        B, Lq, D = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(key_value))
        v = self._split(self.wv(key_value))
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_head))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        return self.wo(ctx.transpose(0, 2, 1, 3).reshape(B, Lq, D))


class FeedForward(Module):
    def __init__(self, rng, d_model, d_ff):
        self.fc1 = Linear(rng, d_model, d_ff)
        self.fc2 = Linear(rng, d_ff, d_model)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def sinusoidal_table(length, d_model):
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-np.log(10000.0) / d_model))
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return table


def positional_encoding(x):
    """Add the fixed sinusoidal table to ``(B, L, D)`` inputs."""
    return x + sinusoidal_table(x.shape[1], x.shape[2])


class EncoderLayer(Module):
    def __init__(self, rng, d_model, n_heads, d_ff):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))


class DecoderLayer(Module):
    def __init__(self, rng, d_model, n_heads, d_ff):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def forward(self, x, memory):
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class TransformerEncoder(Module):
    def __init__(self, rng, d_model, n_heads, d_ff, n_layers):
        self.layers = [EncoderLayer(rng, d_model, n_heads, d_ff) for _ in range(n_layers)]
        self.norm = LayerNorm(d_model)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class TransformerDecoder(Module):
    def __init__(self, rng, d_model, n_heads, d_ff, n_layers):
        self.layers = [DecoderLayer(rng, d_model, n_heads, d_ff) for _ in range(n_layers)]
        self.norm = LayerNorm(d_model)

    def forward(self, x, memory):
        for layer in self.layers:
            x = layer(x, memory)
        return self.norm(x)


class LSTM(Module):
    """Stacked LSTM; returns the full output sequence of the top layer."""

    def __init__(self, rng, d_in, hidden, n_layers=3):
        self.hidden = hidden
        self.layers = [_LSTMLayer(rng, d_in if i == 0 else hidden, hidden) for i in range(n_layers)]

    def forward(self, x):
        for layer in self.layers:
            x = T.lstm_layer(x, layer.w_ih, layer.w_hh, layer.bias)
        return x

    def last_hidden(self, x):
        return self(x)[:, -1]


class _LSTMLayer(Module):
    def __init__(self, rng, d_in, hidden):
        self.w_ih = _param(uniform_fan_in(rng, d_in, (d_in, 4 * hidden)))
        self.w_hh = _param(np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=1))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = _param(b)
