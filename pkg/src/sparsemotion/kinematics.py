"""Rotation representations and forward kinematics over a fixed joint tree.

Rotations are plain numpy arrays. A rotation matrix has shape ``(..., 3, 3)``
and acts on column vectors. The 6D form is the first two **columns** of the
matrix, concatenated: ``[R[:, 0], R[:, 1]]`` i.e.
``[R00, R10, R20, R01, R11, R21]``. Do not confuse this with the row-based
variant some libraries use; transposing silently inverts every rotation.

Quaternions are ``(w, x, y, z)`` with the scalar part first.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# ----------------------------------------------------------------------------
# rotation conversions


def rot6d_encode(R):
    """First two columns of ``R`` flattened column-major, shape ``(..., 6)``."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_decode(v):
    """Gram-Schmidt decode of ``(..., 6)`` into rotation matrices.

    Raises :class:`~sparsemotion.errors.DegenerateInput` if the first column
    has norm <= 1e-9 or the second column is parallel to it.
    """
    return kernels.rot6d_to_matrix(v)


def rot6d_normalize(v):
    """Project arbitrary 6D vectors onto the valid (orthonormal-column) set."""
    return rot6d_encode(rot6d_decode(v))


def angular_delta_6d(r_prev, r_curr):
    """Per-frame relative rotation ``R_curr @ R_prev^T`` in 6D form."""
    Rp = rot6d_decode(r_prev)
    Rc = rot6d_decode(r_curr)
    return rot6d_encode(Rc @ np.swapaxes(Rp, -1, -2))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return out.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    """Shepperd's method; returns quaternions with non-negative ``w``."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    tr = np.trace(m, axis1=1, axis2=2)
    diag = np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    out = np.empty((m.shape[0], 4))
    case = np.where(tr > diag.max(axis=1), 3, np.argmax(diag, axis=1))
    for c in range(4):
        sel = case == c
        if not sel.any():
            continue
        s = m[sel]
        if c == 3:
            t = np.sqrt(1.0 + tr[sel]) * 2
            out[sel] = np.stack([0.25 * t, (s[:, 2, 1] - s[:, 1, 2]) / t,
                                 (s[:, 0, 2] - s[:, 2, 0]) / t, (s[:, 1, 0] - s[:, 0, 1]) / t], 1)
        else:
            i, j, k = c, (c + 1) % 3, (c + 2) % 3
            t = np.sqrt(1.0 + s[:, i, i] - s[:, j, j] - s[:, k, k]) * 2
            q = np.empty((s.shape[0], 4))
            q[:, 0] = (s[:, k, j] - s[:, j, k]) / t
            q[:, 1 + i] = 0.25 * t
            q[:, 1 + j] = (s[:, j, i] + s[:, i, j]) / t
            q[:, 1 + k] = (s[:, k, i] + s[:, i, k]) / t
            out[sel] = q
    out *= np.where(out[:, :1] < 0, -1.0, 1.0)
    return out.reshape(R.shape[:-2] + (4,))


def axis_angle_to_matrix(aa):
    """Rodrigues' formula on ``(..., 3)`` rotation vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta < 1e-12
    k = aa / np.where(small, 1.0, theta)
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def matrix_to_axis_angle(R):
    q = matrix_to_quat(R)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2 * np.arctan2(s, q[..., :1])
    return np.where(s > 1e-12, v / np.where(s > 1e-12, s, 1.0) * angle, 2 * v)


def rot_x(angle):
    return _axis_rot(angle, 0)


def rot_y(angle):
    return _axis_rot(angle, 1)


def rot_z(angle):
    return _axis_rot(angle, 2)


def _axis_rot(angle, axis):
    angle = np.asarray(angle, dtype=np.float64)
    aa = np.zeros(angle.shape + (3,))
    aa[..., axis] = angle
    return axis_angle_to_matrix(aa)


def random_rotations(n, rng):
    """Uniformly distributed rotations from normalised Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    return quat_to_matrix(q / np.linalg.norm(q, axis=1, keepdims=True))


def is_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        return False
    eye_err = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(3), axis=(-2, -1))
    return bool(np.all(eye_err < tol) and np.all(np.abs(np.linalg.det(R) - 1) < tol))


# ----------------------------------------------------------------------------
# skeleton


@dataclass(frozen=True, eq=False)
class SkeletonModel:
    """Fixed kinematic tree. ``parents[0] == -1``; every other parent index is
    smaller than its child, so array order is a valid topological order."""

    parents: np.ndarray
    offsets: np.ndarray
    leg_joints: tuple[int, ...]
    tracked_joints: tuple[int, int, int] = (15, 20, 21)
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=np.int64))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))
        object.__setattr__(self, "leg_joints", tuple(int(j) for j in self.leg_joints))
        object.__setattr__(self, "tracked_joints", tuple(int(j) for j in self.tracked_joints))
        self._check_tree()

    def _check_tree(self):
        p, n = self.parents, len(self.parents)
        if p.ndim != 1 or n < 1 or p[0] != -1:
            raise ConfigError("skeleton parents must be 1-D with parents[0] == -1")
        if self.offsets.shape != (n, 3):
            raise ConfigError(f"skeleton offsets must have shape ({n}, 3), got {self.offsets.shape}")
        for j in range(1, n):
            if not 0 <= p[j] < j:
                raise ConfigError(f"joint {j} has parent {p[j]}; parents must precede children")
        for j in self.leg_joints + self.tracked_joints:
            if not 0 <= j < n:
                raise ConfigError(f"joint index {j} out of range for {n} joints")
        if len(self.tracked_joints) != 3:
            raise ConfigError("tracked_joints must name exactly three joints (head, lhand, rhand)")

    def validate(self):
        """Checks that only make sense for the full body model."""
        if len(self.leg_joints) < 6:
            raise ConfigError("leg joint set must contain at least 6 joints")
        if set(self.leg_joints) & set(self.tracked_joints):
            raise ConfigError("leg joint set must not contain tracked joints")
        return self

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def head(self) -> int:
        return self.tracked_joints[0]

    def to_dict(self):
        d = {
            "parents": self.parents.tolist(),
            "offsets": self.offsets.tolist(),
            "leg_joints": list(self.leg_joints),
            "tracked_joints": dict(zip(("head", "lhand", "rhand"), self.tracked_joints)),
        }
        if self.names:
            d["names"] = list(self.names)
        return d

    @property
    def hash(self) -> str:
        payload = json.dumps({"parents": self.parents.tolist(),
                              "offsets": np.round(self.offsets, 9).tolist()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def skeleton_from_dict(d, strict=True) -> SkeletonModel:
    try:
        tracked = d["tracked_joints"]
        if isinstance(tracked, dict):
            tracked = (tracked["head"], tracked["lhand"], tracked["rhand"])
        sk = SkeletonModel(
            parents=d["parents"],
            offsets=d["offsets"],
            leg_joints=d["leg_joints"],
            tracked_joints=tracked,
            names=tuple(d.get("names", ())),
        )
    except KeyError as exc:
        raise ConfigError(f"skeleton document missing key {exc.args[0]!r}") from None
    return sk.validate() if strict else sk


def load_skeleton(path) -> SkeletonModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return skeleton_from_dict(d)


def save_skeleton(skeleton: SkeletonModel, path):
    Path(path).write_text(json.dumps(skeleton.to_dict(), indent=2))


def default_skeleton() -> SkeletonModel:
    """The shipped 22-joint neutral-body table."""
    text = resources.files("sparsemotion").joinpath("data/smpl_neutral_22.json").read_text()
    return skeleton_from_dict(json.loads(text))


# ----------------------------------------------------------------------------
# forward kinematics


@dataclass
class FullPose:
    """Local 6D joint rotations ``(..., J, 6)`` and root translation ``(..., 3)``.

    Leading dimensions are allowed, so a whole motion is also a ``FullPose``.
    """

    local_rot: np.ndarray
    root_translation: np.ndarray | None = None

    def __post_init__(self):
        self.local_rot = np.asarray(self.local_rot, dtype=np.float64)
        if self.root_translation is None:
            self.root_translation = np.zeros(self.local_rot.shape[:-2] + (3,))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)


def forward_kinematics(skeleton: SkeletonModel, pose: FullPose):
    """Global joint positions ``(..., J, 3)`` and rotations ``(..., J, 3, 3)``.

    ``G_j = G_parent @ R_j`` and ``p_j = p_parent + G_parent @ offset_j``; the
    root uses the pose's translation and its own local rotation.
    """
    local = pose.local_rot
    if local.shape[-1] == 6:
        local = rot6d_decode(local)
    if local.shape[-3:] != (skeleton.n_joints, 3, 3):
        raise ShapeError(f"pose has shape {pose.local_rot.shape}, skeleton has {skeleton.n_joints} joints")
    grot, gpos = kernels.fk_forward(local, pose.root_translation, skeleton.offsets, skeleton.parents)
    return gpos, grot


def head_aligned_root(skeleton: SkeletonModel, local_rot, head_positions):
    """Root translation placing the FK head joint exactly at ``head_positions``.

    Returns ``(root_translation (..., 3), root_relative_positions (..., J, 3))``.
    """
    rel, _ = forward_kinematics(skeleton, FullPose(local_rot))
    return np.asarray(head_positions) - rel[..., skeleton.head, :], rel
