"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``SPARSEMOTION_PURE_PYTHON=1`` before import to force the numpy path.
``BACKEND`` reports which one is active. Both backends accept arbitrary
leading batch dimensions here; the raw kernels see a flattened ``N``.
"""
import os

import numpy as np

from . import _kernels_py
from .errors import DegenerateInput

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("SPARSEMOTION_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def rot6d_to_matrix(x, impl=None):
    """Decode ``(..., 6)`` vectors into ``(..., 3, 3)`` rotation matrices.

    Raises :class:`DegenerateInput` when the first 3-vector has (near) zero
    norm or the second is parallel to it.
    """
    impl = impl or _impl
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 6:
        raise DegenerateInput(f"expected trailing dimension 6, got shape {x.shape}")
    lead = x.shape[:-1]
    mats, bad = impl.rot6d_to_matrix(_c(x.reshape(-1, 6)))
    if bad >= 0:
        row = np.unravel_index(bad, lead) if lead else ()
        raise DegenerateInput(f"degenerate 6D rotation at index {tuple(int(i) for i in row)}: "
                              f"{x.reshape(-1, 6)[bad].tolist()}")
    return mats.reshape(lead + (3, 3))


def rot6d_to_matrix_backward(x, mats, grad, impl=None):
    impl = impl or _impl
    lead = x.shape[:-1]
    g = impl.rot6d_to_matrix_backward(_c(x.reshape(-1, 6)), _c(mats.reshape(-1, 3, 3)),
                                      _c(grad.reshape(-1, 3, 3)))
    return g.reshape(lead + (6,))


def fk_forward(local, root, offsets, parents, impl=None):
    """Forward kinematics on ``(..., J, 3, 3)`` local rotations and ``(..., 3)`` roots.

    Returns ``(global_rot (..., J, 3, 3), global_pos (..., J, 3))``.
    """
    impl = impl or _impl
    local = np.asarray(local, dtype=np.float64)
    lead, nj = local.shape[:-3], local.shape[-3]
    grot, gpos = impl.fk_forward(
        _c(local.reshape(-1, nj, 3, 3)),
        _c(np.broadcast_to(root, lead + (3,)).reshape(-1, 3)),
        _c(offsets),
        np.ascontiguousarray(parents, dtype=np.int64),
    )
    return grot.reshape(lead + (nj, 3, 3)), gpos.reshape(lead + (nj, 3))


def fk_backward(local, grot, offsets, parents, g_rot, g_pos, impl=None):
    impl = impl or _impl
    lead, nj = local.shape[:-3], local.shape[-3]
    g_local, g_root = impl.fk_backward(
        _c(local.reshape(-1, nj, 3, 3)),
        _c(grot.reshape(-1, nj, 3, 3)),
        _c(offsets),
        np.ascontiguousarray(parents, dtype=np.int64),
        _c(g_rot.reshape(-1, nj, 3, 3)),
        _c(g_pos.reshape(-1, nj, 3)),
    )
    return g_local.reshape(lead + (nj, 3, 3)), g_root.reshape(lead + (3,))


def implementations():
    """All importable kernel backends, keyed by name (used by tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out


# Above this many cell elements numpy's vectorised transcendentals beat the
# compiled scalar loop for the forward cell; the backward has no such calls.
LSTM_FORWARD_COMPILED_MAX = 4096


def lstm_cell_forward(a, c_prev, c, tc, h, impl=None):
    """Pointwise LSTM cell (gate order i, f, g, o); every array C-contiguous float64, updated in place."""
    if impl is None:
        impl = _impl if c.size <= LSTM_FORWARD_COMPILED_MAX else _kernels_py
    impl.lstm_cell_forward(a, c_prev, c, tc, h)


def lstm_cell_backward(a, c_prev, tc, dh, dc, dz, impl=None):
    (impl or _impl).lstm_cell_backward(a, c_prev, tc, dh, dc, dz)
