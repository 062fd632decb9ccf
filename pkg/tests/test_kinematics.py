import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sparsemotion import kernels
from sparsemotion.errors import ConfigError, DegenerateInput, ShapeError
from sparsemotion.kinematics import (
    FullPose,
    SkeletonModel,
    axis_angle_to_matrix,
    forward_kinematics,
    head_aligned_root,
    is_rotation,
    load_skeleton,
    matrix_to_axis_angle,
    matrix_to_quat,
    quat_to_matrix,
    random_rotations,
    rot6d_decode,
    rot6d_encode,
    rot6d_normalize,
    save_skeleton,
    skeleton_from_dict,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def brute_force_fk(skeleton, local, root):
    """Chain of 4x4 homogeneous transforms, one joint at a time."""
    J = skeleton.n_joints
    world = [None] * J
    for j in range(J):
        M = np.eye(4)
        M[:3, :3] = local[j]
        M[:3, 3] = root if j == 0 else skeleton.offsets[j]
        world[j] = M if j == 0 else world[skeleton.parents[j]] @ M
    return np.array([w[:3, 3] for w in world]), np.array([w[:3, :3] for w in world])


def test_6d_layout_is_first_two_columns():
    R = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    v = rot6d_encode(R)
    assert np.array_equal(v, [R[0, 0], R[1, 0], R[2, 0], R[0, 1], R[1, 1], R[2, 1]])


def test_6d_roundtrip_against_scipy(rng):
    R = Rotation.random(500, random_state=3).as_matrix()
    back = rot6d_decode(rot6d_encode(R))
    assert np.abs(back - R).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6), st.floats(1e-3, 1e3))
def test_gram_schmidt_positive_scale_invariance(v, s):
    v = np.array(v)
    try:
        R = rot6d_decode(v)
    except DegenerateInput:
        return
    assert is_rotation(R, 1e-9)
    # power-of-two scaling is exact in floating point, so the decode is too
    two = 2.0 ** np.round(np.log2(s))
    assert np.array_equal(rot6d_decode(v * two), R)
    assert np.allclose(rot6d_decode(v * s), R, atol=1e-12)


@pytest.mark.parametrize("v", [
    [0, 0, 0, 0, 1, 0],
    [1e-12, 0, 0, 0, 1, 0],
    [1, 0, 0, 2, 0, 0],
    [0, 1, 0, 0, -3, 0],
])
def test_degenerate_6d_rejected(v):
    with pytest.raises(DegenerateInput):
        rot6d_decode(np.array(v, dtype=float))


def test_degenerate_reports_batch_index():
    v = np.tile([1.0, 0, 0, 0, 1, 0], (2, 3, 1))
    v[1, 2] = [1, 0, 0, 1, 0, 0]
    with pytest.raises(DegenerateInput, match=r"\(1, 2\)"):
        rot6d_decode(v)


def test_normalize_is_idempotent(rng):
    v = rng.standard_normal((50, 6))
    n = rot6d_normalize(v)
    assert np.allclose(rot6d_normalize(n), n, atol=1e-14)


def test_quaternion_and_axis_angle_match_scipy():
    rot = Rotation.random(200, random_state=5)
    q_xyzw = rot.as_quat()
    q = np.concatenate([q_xyzw[:, 3:], q_xyzw[:, :3]], axis=1)
    assert np.allclose(quat_to_matrix(q), rot.as_matrix(), atol=1e-12)
    back = matrix_to_quat(rot.as_matrix())
    assert np.allclose(np.abs((back * q).sum(1)), 1, atol=1e-10)
    aa = rot.as_rotvec()
    assert np.allclose(axis_angle_to_matrix(aa), rot.as_matrix(), atol=1e-12)
    assert np.allclose(axis_angle_to_matrix(matrix_to_axis_angle(rot.as_matrix())), rot.as_matrix(), atol=1e-9)


def test_random_rotations_are_rotations(rng):
    assert is_rotation(random_rotations(100, rng), 1e-10)


def test_fk_matches_homogeneous_brute_force(skeleton, rng):
    J = skeleton.n_joints
    for _ in range(20):
        local = random_rotations(J, rng)
        root = rng.normal(size=3)
        pos, rot = forward_kinematics(skeleton, FullPose(rot6d_encode(local), root))
        bp, br = brute_force_fk(skeleton, local, root)
        assert np.abs(pos - bp).max() < 1e-12
        assert np.abs(rot - br).max() < 1e-12


def test_fk_backends_agree(skeleton, rng, backend):
    local = random_rotations(7 * skeleton.n_joints, rng).reshape(7, -1, 3, 3)
    root = rng.normal(size=(7, 3))
    grot, gpos = kernels.fk_forward(local, root, skeleton.offsets, skeleton.parents, impl=backend)
    ref_r, ref_p = kernels.fk_forward(local, root, skeleton.offsets, skeleton.parents,
                                      impl=kernels.implementations()["python"])
    assert np.allclose(grot, ref_r, atol=1e-13) and np.allclose(gpos, ref_p, atol=1e-13)
    g_rot, g_pos = rng.normal(size=grot.shape), rng.normal(size=gpos.shape)
    a = kernels.fk_backward(local, grot, skeleton.offsets, skeleton.parents, g_rot, g_pos, impl=backend)
    b = kernels.fk_backward(local, ref_r, skeleton.offsets, skeleton.parents, g_rot, g_pos,
                            impl=kernels.implementations()["python"])
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)


def test_rot6d_backends_agree(rng, backend):
    x = rng.normal(size=(40, 6))
    m, bad = backend.rot6d_to_matrix(x)
    ref, _ = kernels.implementations()["python"].rot6d_to_matrix(x)
    assert bad == -1 and np.allclose(m, ref, atol=1e-14)
    g = rng.normal(size=(40, 3, 3))
    assert np.allclose(backend.rot6d_to_matrix_backward(x, m, g),
                       kernels.implementations()["python"].rot6d_to_matrix_backward(x, ref, g), atol=1e-12)


def test_identity_pose_gives_rest_offsets(skeleton):
    pose = FullPose(np.tile([1.0, 0, 0, 0, 1, 0], (skeleton.n_joints, 1)))
    pos, _ = forward_kinematics(skeleton, pose)
    for j in range(1, skeleton.n_joints):
        assert np.allclose(pos[j] - pos[skeleton.parents[j]], skeleton.offsets[j])


def test_fk_batched_leading_dims(skeleton, rng):
    local = rot6d_encode(random_rotations(2 * 5 * skeleton.n_joints, rng)).reshape(2, 5, -1, 6)
    root = rng.normal(size=(2, 5, 3))
    pos, _ = forward_kinematics(skeleton, FullPose(local, root))
    single, _ = forward_kinematics(skeleton, FullPose(local[1, 3], root[1, 3]))
    assert pos.shape == (2, 5, skeleton.n_joints, 3)
    assert np.allclose(pos[1, 3], single, atol=1e-14)


def test_fk_shape_mismatch(skeleton):
    with pytest.raises(ShapeError):
        forward_kinematics(skeleton, FullPose(np.tile([1.0, 0, 0, 0, 1, 0], (5, 1))))


def test_head_aligned_root_places_head(skeleton, rng):
    local = rot6d_encode(random_rotations(4 * skeleton.n_joints, rng)).reshape(4, -1, 6)
    head = rng.normal(size=(4, 3))
    root, _ = head_aligned_root(skeleton, local, head)
    pos, _ = forward_kinematics(skeleton, FullPose(local, root))
    assert np.allclose(pos[:, skeleton.head], head, atol=1e-13)


def test_skeleton_roundtrip_and_validation(skeleton, tmp_path):
    save_skeleton(skeleton, tmp_path / "sk.json")
    back = load_skeleton(tmp_path / "sk.json")
    assert back.hash == skeleton.hash
    assert back.tracked_joints == (15, 20, 21)
    d = skeleton.to_dict()
    d["parents"] = [-1, 2] + d["parents"][2:]
    with pytest.raises(ConfigError):
        skeleton_from_dict(d)
    d = skeleton.to_dict()
    d["leg_joints"] = [1, 2]
    with pytest.raises(ConfigError):
        skeleton_from_dict(d)
    del d["offsets"]
    with pytest.raises(ConfigError, match="offsets"):
        skeleton_from_dict(d)


def test_skeleton_rejects_bad_tracked():
    with pytest.raises(ConfigError):
        SkeletonModel(parents=[-1, 0], offsets=np.zeros((2, 3)), leg_joints=(1,), tracked_joints=(0, 1, 5))
