"""Sparse tracking signals: extraction, input augmentation, horizontal normalisation.

Layout of one augmented frame (54 values), fixed because trained checkpoints
depend on it::

    [ g (9) | g_vel (9) | r (18) | r_vel (18) ]

``g`` holds head, left-hand and right-hand positions (3 each, metres);
``g_vel`` per-frame position deltas (metres/frame); ``r`` the three global
rotations in 6D; ``r_vel`` per-frame relative rotations ``R_t R_{t-1}^T`` in
6D. Frame 0 reuses frame 1's velocities (zero-motion values for a single
frame).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .kinematics import IDENTITY_6D, FullPose, SkeletonModel, forward_kinematics, rot6d_encode
from .nn import tensor as T
from .nn.tensor import Tensor, no_grad

SIGNAL_DIM = 54
POS = slice(0, 9)
POS_VEL = slice(9, 18)
ROT = slice(18, 36)
ROT_VEL = slice(36, 54)


@dataclass
class SparseSignals:
    """Raw device signals for ``T`` frames: positions ``g3 (T, 3, 3)`` and
    global rotations ``r3 (T, 3, 6)``."""

    g3: np.ndarray
    r3: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.g3 = np.asarray(self.g3, dtype=np.float64)
        self.r3 = np.asarray(self.r3, dtype=np.float64)
        if self.g3.ndim != 3 or self.g3.shape[1:] != (3, 3) or self.r3.shape != self.g3.shape[:1] + (3, 6):
            raise ShapeError(f"signals need g3 (T,3,3) and r3 (T,3,6); got {self.g3.shape}, {self.r3.shape}")
        if len(self.g3) < 1:
            raise ShapeError("signal sequence must contain at least one frame")

    def __len__(self):
        return len(self.g3)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1 if idx != -1 else None)
        return SparseSignals(self.g3[idx], self.r3[idx], self.fps)

    @property
    def head(self):
        return self.g3[:, 0]


@dataclass
class SparseMotionSequence:
    """Augmented frames ``x (T, 54)``."""

    x: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[1] != SIGNAL_DIM or len(self.x) < 1:
            raise ShapeError(f"augmented sequence must have shape (T>=1, 54), got {self.x.shape}")

    def __len__(self):
        return len(self.x)


def augment_tensor(g3, r3):
    """Differentiable augmentation: ``g3 (T,3,3)``, ``r3 (T,3,6)`` -> ``(T, 54)``."""
    g3, r3 = T.as_tensor(g3), T.as_tensor(r3)
    n = g3.shape[0]
    if n == 1:
        g_vel = Tensor(np.zeros((1, 3, 3)))
        r_vel = Tensor(np.tile(IDENTITY_6D, (1, 3, 1)))
    else:
        g_vel = g3[1:] - g3[:-1]
        R = T.rot6d_to_matrix(r3)
        Rd = T.matmul(R[1:], R[:-1].swapaxes(-1, -2))
        r_vel = T.concat([Rd[..., :, 0], Rd[..., :, 1]], axis=-1)
        g_vel = T.concat([g_vel[0:1], g_vel], axis=0)
        r_vel = T.concat([r_vel[0:1], r_vel], axis=0)
    return T.concat([g3.reshape(n, 9), g_vel.reshape(n, 9), r3.reshape(n, 18), r_vel.reshape(n, 18)], axis=1)


def augment(signals: SparseSignals) -> SparseMotionSequence:
    with no_grad():
        x = augment_tensor(signals.g3, signals.r3).data
    return SparseMotionSequence(x, signals.fps)


def normalize_horizontal(x):
    """Centre the three tracked positions on their mean in x and z, per frame.

    Accepts ``(..., 54)`` arrays or a :class:`SparseMotionSequence`; y,
    velocities and rotations are untouched. The mean is subtracted through
    pairwise differences, ``n_j = ((g_j - g_0) + (g_j - g_1) + (g_j - g_2)) / 3``,
    which is algebraically identical but stays bitwise invariant under any
    horizontal shift that is itself exact in floating point.
    """
    seq = x if isinstance(x, SparseMotionSequence) else None
    arr = np.array(seq.x if seq is not None else x, dtype=np.float64)
    if arr.shape[-1] != SIGNAL_DIM:
        raise ShapeError(f"expected trailing dimension 54, got {arr.shape}")
    pos = arr[..., POS].reshape(arr.shape[:-1] + (3, 3))
    xz = pos[..., [0, 2]]
    centred = ((xz - xz[..., 0:1, :]) + (xz - xz[..., 1:2, :]) + (xz - xz[..., 2:3, :])) / 3.0
    pos[..., [0, 2]] = centred
    arr[..., POS] = pos.reshape(arr.shape[:-1] + (9,))
    return SparseMotionSequence(arr, seq.fps) if seq is not None else arr


def extract_sparse_signals(skeleton: SkeletonModel, local_rot, root_translation, fps=30.0) -> SparseSignals:
    """Global positions and rotations of the tracked joints via FK.

    ``local_rot``: ``(T, J, 6)``; ``root_translation``: ``(T, 3)``.
    """
    pos, rot = forward_kinematics(skeleton, FullPose(local_rot, root_translation))
    idx = list(skeleton.tracked_joints)
    return SparseSignals(pos[:, idx], rot6d_encode(rot[:, idx]), fps)


def signals_from_clip(skeleton: SkeletonModel, clip) -> SparseSignals:
    return extract_sparse_signals(skeleton, clip.local_rot, clip.root_translation, clip.fps)


def shift_xz(signals: SparseSignals, dx, dz) -> SparseSignals:
    g = signals.g3.copy()
    g[..., 0] += dx
    g[..., 2] += dz
    return SparseSignals(g, signals.r3.copy(), signals.fps)


def random_horizontal_offset(signals: SparseSignals, rng, max_offset) -> SparseSignals:
    """Optional training augmentation: one random (x, z) offset per sequence."""
    dx, dz = rng.uniform(-max_offset, max_offset, size=2)
    return shift_xz(signals, dx, dz)


def window_indices(ends, length):
    """Frame indices of length-``length`` windows ending at each of ``ends``.

    Windows reaching before frame 0 are left-padded by repeating frame 0.
    Returns an int array of shape ``(len(ends), length)``.
    """
    ends = np.atleast_1d(np.asarray(ends, dtype=np.int64))
    idx = ends[:, None] - (length - 1) + np.arange(length)[None, :]
    return np.maximum(idx, 0)
