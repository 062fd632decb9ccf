"""Pure-numpy kernels; the reference implementation and import-time fallback.

All functions operate on C-contiguous float64 arrays with a flattened leading
batch dimension ``N``. Shapes:

* 6D vectors ``(N, 6)``; rotation matrices ``(N, 3, 3)``.
* FK: local rotations ``(N, J, 3, 3)``, root translation ``(N, 3)``,
  offsets ``(J, 3)``, parents ``(J,)`` int64 with ``parents[0] == -1``.
"""
import numpy as np

EPS = 1e-9


def rot6d_to_matrix(x):
    """Gram-Schmidt decode. Returns ``(mats, bad)`` where ``bad`` is the index
    of the first degenerate row or -1."""
    a1 = x[:, 0:3]
    a2 = x[:, 3:6]
    n1 = np.sqrt(np.einsum("ni,ni->n", a1, a1))
    bad = n1 <= EPS
    b1 = a1 / np.where(bad, 1.0, n1)[:, None]
    d = np.einsum("ni,ni->n", b1, a2)
    u = a2 - d[:, None] * b1
    n2 = np.sqrt(np.einsum("ni,ni->n", u, u))
    bad |= n2 <= EPS
    b2 = u / np.where(n2 <= EPS, 1.0, n2)[:, None]
    b3 = np.cross(b1, b2)
    out = np.empty((x.shape[0], 3, 3))
    out[:, :, 0] = b1
    out[:, :, 1] = b2
    out[:, :, 2] = b3
    first_bad = int(np.argmax(bad)) if bad.any() else -1
    return out, first_bad


def rot6d_to_matrix_backward(x, mats, grad):
    a2 = x[:, 3:6]
    a1 = x[:, 0:3]
    n1 = np.sqrt(np.einsum("ni,ni->n", a1, a1))[:, None]
    b1 = mats[:, :, 0]
    b2 = mats[:, :, 1]
    d = np.einsum("ni,ni->n", b1, a2)[:, None]
    u = a2 - d * b1
    n2 = np.sqrt(np.einsum("ni,ni->n", u, u))[:, None]
    gb1 = grad[:, :, 0] + np.cross(b2, grad[:, :, 2])
    gb2 = grad[:, :, 1] + np.cross(grad[:, :, 2], b1)
    gu = (gb2 - b2 * np.einsum("ni,ni->n", b2, gb2)[:, None]) / n2
    ga2 = gu.copy()
    gd = -np.einsum("ni,ni->n", b1, gu)[:, None]
    gb1 = gb1 - d * gu + gd * a2
    ga2 += gd * b1
    ga1 = (gb1 - b1 * np.einsum("ni,ni->n", b1, gb1)[:, None]) / n1
    return np.concatenate([ga1, ga2], axis=1)


def fk_forward(local, root, offsets, parents):
    n, j = local.shape[:2]
    grot = np.empty_like(local)
    gpos = np.empty((n, j, 3))
    grot[:, 0] = local[:, 0]
    gpos[:, 0] = root
    for k in range(1, j):
        p = parents[k]
        grot[:, k] = grot[:, p] @ local[:, k]
        gpos[:, k] = gpos[:, p] + grot[:, p] @ offsets[k]
    return grot, gpos


def fk_backward(local, grot, offsets, parents, g_rot, g_pos):
    j = local.shape[1]
    g_rot = g_rot.copy()
    g_pos = g_pos.copy()
    g_local = np.empty_like(local)
    for k in range(j - 1, 0, -1):
        p = parents[k]
        # G_k = G_p R_k ; P_k = P_p + G_p o_k
        g_local[:, k] = np.swapaxes(grot[:, p], 1, 2) @ g_rot[:, k]
        g_rot[:, p] += g_rot[:, k] @ np.swapaxes(local[:, k], 1, 2)
        g_rot[:, p] += g_pos[:, k][:, :, None] * offsets[k][None, None, :]
        g_pos[:, p] += g_pos[:, k]
    g_local[:, 0] = g_rot[:, 0]
    return g_local, g_pos[:, 0].copy()


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_cell_forward(a, c_prev, c, tc, h):
    """In place: gate pre-activations ``a (B, 4H)`` become activations; writes ``c``, ``tanh(c)``, ``h``."""
    H = c.shape[1]
    a[:, :2 * H] = _sig(a[:, :2 * H])
    np.tanh(a[:, 2 * H:3 * H], out=a[:, 2 * H:3 * H])
    a[:, 3 * H:] = _sig(a[:, 3 * H:])
    c[...] = a[:, H:2 * H] * c_prev + a[:, :H] * a[:, 2 * H:3 * H]
    np.tanh(c, out=tc)
    np.multiply(a[:, 3 * H:], tc, out=h)


def lstm_cell_backward(a, c_prev, tc, dh, dc, dz):
    """``dc`` holds the incoming cell gradient and is overwritten with the one for ``c_prev``."""
    H = tc.shape[1]
    i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
    d = dc + dh * o * (1 - tc * tc)
    dz[:, :H] = d * g * i * (1 - i)
    dz[:, H:2 * H] = d * c_prev * f * (1 - f)
    dz[:, 2 * H:3 * H] = d * i * (1 - g * g)
    dz[:, 3 * H:] = dh * tc * o * (1 - o)
    dc[...] = d * f
