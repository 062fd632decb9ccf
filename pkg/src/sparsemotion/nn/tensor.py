"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps a float64 array. Operations on tensors that require
gradients record a node holding the parent tensors and a closure mapping the
output gradient to one gradient per parent. :meth:`Tensor.backward` walks the
graph in reverse topological order; only leaf tensors keep ``.grad``.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .. import kernels
from ..errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = ""

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    # -- conveniences ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        "div")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return Tensor._make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward, "gelu")


# ----------------------------------------------------------------------------
# reductions and shape


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size / max(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size, 1)
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    basic = _is_basic(idx)

    def backward(g):
        out = np.zeros(a.shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# ----------------------------------------------------------------------------
# linear algebra and fused primitives


def matmul(a, b):
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} but gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(0), flat_g.sum(0)

    return Tensor._make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def lstm_layer(x, w_ih, w_hh, bias):
    """One LSTM layer over a full sequence with zero initial state.

    ``x``: ``(B, S, I)``; ``w_ih``: ``(I, 4H)``; ``w_hh``: ``(H, 4H)``;
    ``bias``: ``(4H,)``. Gate order is input, forget, cell, output.
    Returns the hidden states ``(B, S, H)``.
    """
    x, w_ih, w_hh, bias = (as_tensor(t) for t in (x, w_ih, w_hh, bias))
    if x.ndim != 3 or w_ih.shape[0] != x.shape[2]:
        raise ShapeError(f"lstm_layer: input {x.shape} incompatible with w_ih {w_ih.shape}")
    B, S, _ = x.shape
    H = w_hh.shape[0]
    if w_hh.shape != (H, 4 * H) or w_ih.shape[1] != 4 * H or bias.shape != (4 * H,):
        raise ShapeError(f"lstm_layer: inconsistent weights {w_ih.shape}, {w_hh.shape}, {bias.shape}")
    # time-major buffers keep every per-step slice contiguous
    xw = np.ascontiguousarray((x.data @ w_ih.data + bias.data).transpose(1, 0, 2))
    whh = w_hh.data
    hs = np.zeros((S + 1, B, H))
    cs = np.zeros((S + 1, B, H))
    acts = np.empty((S, B, 4 * H))
    tanh_c = np.empty((S, B, H))
    for t in range(S):
        a = acts[t]
        np.matmul(hs[t], whh, out=a)
        a += xw[t]
        kernels.lstm_cell_forward(a, cs[t], cs[t + 1], tanh_c[t], hs[t + 1])

    def backward(g):
        g = np.ascontiguousarray(np.asarray(g).transpose(1, 0, 2))
        dz = np.empty((S, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc = np.zeros((B, H))
        whh_t = np.ascontiguousarray(whh.T)
        for t in range(S - 1, -1, -1):
            dh = g[t] + dh_next
            kernels.lstm_cell_backward(acts[t], cs[t], tanh_c[t], dh, dc, dz[t])
            dh_next = dz[t] @ whh_t
        flat_dz = dz.reshape(-1, 4 * H)
        gx = (dz @ w_ih.data.T).transpose(1, 0, 2) if x.requires_grad else None
        xt = x.data.transpose(1, 0, 2).reshape(-1, x.shape[2])
        g_wih = xt.T @ flat_dz
        g_whh = hs[:S].reshape(-1, H).T @ flat_dz
        return gx, g_wih, g_whh, flat_dz.sum(0)

    return Tensor._make(hs[1:].transpose(1, 0, 2).copy(), (x, w_ih, w_hh, bias), backward, "lstm_layer")


def rot6d_to_matrix(x):
    """Differentiable Gram-Schmidt decode ``(..., 6) -> (..., 3, 3)``."""
    x = as_tensor(x)
    mats = kernels.rot6d_to_matrix(x.data)
    return Tensor._make(mats, (x,), lambda g: (kernels.rot6d_to_matrix_backward(x.data, mats, g),), "rot6d")


def forward_kinematics(local, root, skeleton):
    """Differentiable FK. ``local``: ``(..., J, 3, 3)``; ``root``: ``(..., 3)``.

    Returns ``(positions (..., J, 3), global_rotations (..., J, 3, 3))``.
    """
    local, root = as_tensor(local), as_tensor(root)
    lead = local.shape[:-3]
    root_b = np.broadcast_to(root.data, lead + (3,))
    grot, gpos = kernels.fk_forward(local.data, root_b, skeleton.offsets, skeleton.parents)
    nj = local.shape[-3]
    packed = np.concatenate([grot.reshape(lead + (nj, 9)), gpos], axis=-1)

    def backward(g):
        g_rot = g[..., :9].reshape(lead + (nj, 3, 3))
        g_local, g_root = kernels.fk_backward(local.data, grot, skeleton.offsets, skeleton.parents,
                                              g_rot, g[..., 9:])
        return g_local, _unbroadcast(g_root, root.shape)

    out = Tensor._make(packed, (local, root), backward, "fk")
    return out[..., 9:], out[..., :9].reshape(lead + (nj, 3, 3))


def cosine_similarity(a, b, axis=-1, eps=1e-30):
    a, b = as_tensor(a), as_tensor(b)
    num = (a * b).sum(axis=axis)
    den = sqrt((a * a).sum(axis=axis) * (b * b).sum(axis=axis) + eps)
    return num / den
