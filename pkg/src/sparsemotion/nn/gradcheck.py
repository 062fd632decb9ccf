"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn, tensors, h=1e-4):
    """Central differences of scalar ``fn()`` w.r.t. each tensor's data."""
    grads = []
    with no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def gradcheck(fn, tensors, h=1e-4):
    """Max relative error between analytic and numerical gradients.

    Relative error per tensor is ``max|a - n| / max(max|a|, max|n|, floor)``
    over the whole tensor. ``floor = 1e-6 * max(1, |f|)`` sits far above the
    finite-difference roundoff (about ``1e-16 * |f| / h``), so tensors whose
    true gradient is zero (e.g. attention key biases) do not divide noise
    by noise.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    floor = 1e-6 * max(1.0, abs(float(out.data)))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
    numeric = numerical_grad(fn, tensors, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(), np.abs(n).max(), floor)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


__all__ = ["gradcheck", "numerical_grad", "Tensor"]
