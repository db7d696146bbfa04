"""Skeleton, forward kinematics, and motion-basis tests."""

import numpy as np
import pytest

from freeview import autodiff as ad
from freeview import skeleton as sk


def _fk_matrix_oracle(skel, angles, root_t):
    """Explicit 4x4 homogeneous matrix-product chain."""
    k = skel.bone_count
    mats = [None] * k
    for i in skel.topo_order():
        rot = np.eye(4)
        rot[:3, :3] = sk.rodrigues_np(angles[i])
        tr = np.eye(4)
        tr[:3, 3] = skel.rest_offset[i]
        p = int(skel.parent[i])
        base = np.eye(4)
        if p < 0:
            base[:3, 3] = root_t
            mats[i] = base @ tr @ rot
        else:
            mats[i] = mats[p] @ tr @ rot
    r = np.stack([m[:3, :3] for m in mats])
    t = np.stack([m[:3, 3] for m in mats])
    return r, t


class TestRodrigues:
    def test_zero_is_identity_exact(self):
        r = sk.rodrigues_np(np.zeros(3))
        assert np.array_equal(r, np.eye(3))

    def test_quarter_turn_about_z(self):
        r = sk.rodrigues_np(np.array([0.0, 0.0, np.pi / 2]))
        got = r @ np.array([1.0, 0.0, 0.0])
        assert np.max(np.abs(got - np.array([0.0, 1.0, 0.0]))) < 1e-12

    def test_full_turn_is_identity(self):
        axis = np.array([0.3, -0.5, 0.8])
        axis = axis / np.linalg.norm(axis)
        r = sk.rodrigues_np(axis * 2 * np.pi)
        assert np.max(np.abs(r - np.eye(3))) < 1e-9

    def test_tiny_angles_stay_smooth(self):
        for mag in (0.0, 1e-12, 1e-8, 1e-5, 1e-3):
            w = np.array([mag, 0.0, 0.0])
            r = sk.rodrigues_np(w)
            assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(0)
        w = ad.Tensor(rng.uniform(-1.5, 1.5, (4, 3)), requires_grad=True)
        c = ad.Tensor(rng.normal(size=(4, 3, 3)))
        err = ad.gradcheck(lambda t: ad.tsum(ad.mul(sk.rodrigues(t), c)), w)
        assert err < 1e-6

    def test_gradient_near_zero(self):
        w = ad.Tensor(np.full((2, 3), 1e-6), requires_grad=True)
        c = ad.Tensor(np.random.default_rng(1).normal(size=(2, 3, 3)))
        err = ad.gradcheck(lambda t: ad.tsum(ad.mul(sk.rodrigues(t), c)), w)
        assert err < 1e-6


class TestRotationLog:
    def test_roundtrip(self):
        rng = np.random.default_rng(2)
        w = rng.uniform(-1.0, 1.0, (8, 3))
        r = sk.rodrigues_np(w)
        back = sk.rotation_log_np(r)
        assert np.max(np.abs(back - w)) < 1e-9

    def test_identity_maps_to_zero(self):
        back = sk.rotation_log_np(np.eye(3))
        assert np.array_equal(back, np.zeros(3))

    def test_gradient_through_log(self):
        rng = np.random.default_rng(3)
        w = ad.Tensor(rng.uniform(-0.8, 0.8, (3, 3)), requires_grad=True)
        c = ad.Tensor(rng.normal(size=(3, 3)))

        def f(t):
            return ad.tsum(ad.mul(sk.rotation_log(sk.rodrigues(t)), c))

        assert ad.gradcheck(f, w) < 1e-5


class TestForwardKinematics:
    def test_canonical_pose_reproduces_rest_joints(self):
        skel = sk.default_skeleton()
        _, joints = sk.forward_kinematics_np(skel, skel.canonical_angles, skel.canonical_root)
        names = {n: i for i, n in enumerate(skel.names)}
        root = skel.canonical_root
        assert np.allclose(joints[names["pelvis"]], root)
        assert np.allclose(joints[names["spine"]], root + [0, 0.12, 0])
        assert np.allclose(joints[names["chest"]], root + [0, 0.34, 0])
        # forearm joint hangs off the 45-degree shoulder rotation
        shoulder = root + np.array([0.16, 0.46, 0.0])
        rot = sk.rodrigues_np(np.array([0.0, 0.0, -np.pi / 4]))
        assert np.allclose(joints[names["l_forearm"]], shoulder + rot @ [0.26, 0, 0], atol=1e-12)

    def test_two_bone_hand_case(self):
        skel = sk.Skeleton(
            names=["a", "b"], parent=[-1, 0],
            rest_offset=[[0, 0, 0], [1, 0, 0]],
            canonical_angles=np.zeros((2, 3)), canonical_root=np.zeros(3),
            tip=[[1, 0, 0], [1, 0, 0]])
        angles = np.array([[0.0, 0.0, np.pi / 2], [0.0, 0.0, 0.0]])
        _, joints = sk.forward_kinematics_np(skel, angles, np.zeros(3))
        assert np.max(np.abs(joints[1] - np.array([0.0, 1.0, 0.0]))) < 1e-12

    def test_matches_matrix_product_oracle(self):
        skel = sk.default_skeleton()
        rng = np.random.default_rng(4)
        angles = rng.uniform(-0.9, 0.9, (skel.bone_count, 3))
        root_t = rng.uniform(-1, 1, 3)
        r, t = sk.forward_kinematics_np(skel, angles, root_t)
        r_o, t_o = _fk_matrix_oracle(skel, angles, root_t)
        assert np.max(np.abs(r - r_o)) < 1e-12
        assert np.max(np.abs(t - t_o)) < 1e-12

    def test_deterministic(self):
        skel = sk.default_skeleton()
        angles = np.random.default_rng(5).uniform(-1, 1, (skel.bone_count, 3))
        a = sk.forward_kinematics_np(skel, angles, np.zeros(3))
        b = sk.forward_kinematics_np(skel, angles, np.zeros(3))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_gradient_through_chain(self):
        skel = sk.default_skeleton()
        rng = np.random.default_rng(6)
        angles = ad.Tensor(rng.uniform(-0.7, 0.7, (skel.bone_count, 3)), requires_grad=True)
        c = ad.Tensor(rng.normal(size=(skel.bone_count, 3)))

        def f(t):
            _, joints = sk.forward_kinematics(skel, t, ad.as_tensor(np.zeros(3)))
            return ad.tsum(ad.mul(joints, c))

        assert ad.gradcheck(f, angles, max_coords=18) < 1e-5


class TestMotionBasis:
    def test_canonical_pose_gives_identity_family(self):
        skel = sk.default_skeleton()
        pose = sk.canonical_pose(skel)
        for g in sk.motion_basis_np(skel, pose):
            assert np.max(np.abs(g.R - np.eye(3))) < 1e-12
            assert np.max(np.abs(g.t)) < 1e-12

    def test_global_translation_inverts(self):
        skel = sk.default_skeleton()
        delta = np.array([0.3, -0.1, 0.7])
        pose = sk.pose_from_angles(skel, skel.canonical_angles, skel.canonical_root + delta)
        for g in sk.motion_basis_np(skel, pose):
            assert np.max(np.abs(g.R - np.eye(3))) < 1e-12
            assert np.max(np.abs(g.t + delta)) < 1e-12

    def test_observed_joint_maps_to_canonical_joint(self):
        skel = sk.default_skeleton()
        rng = np.random.default_rng(7)
        angles = rng.uniform(-0.8, 0.8, (skel.bone_count, 3))
        pose = sk.pose_from_angles(skel, angles, np.array([0.2, 1.0, -0.4]))
        canon = sk.canonical_pose(skel)
        for i, g in enumerate(sk.motion_basis_np(skel, pose)):
            got = g.apply(pose.joints[i][None, :])[0]
            assert np.max(np.abs(got - canon.joints[i])) < 1e-9

    def test_all_bases_rigid(self):
        skel = sk.default_skeleton()
        rng = np.random.default_rng(8)
        for _ in range(5):
            angles = rng.uniform(-1.2, 1.2, (skel.bone_count, 3))
            pose = sk.pose_from_angles(skel, angles, rng.uniform(-1, 1, 3))
            for g in sk.motion_basis_np(skel, pose):
                # BoneTransform validates orthonormality and det on construction
                assert abs(np.linalg.det(g.R) - 1.0) < 1e-9


class TestSkeletonStructure:
    def test_json_roundtrip(self):
        skel = sk.default_skeleton()
        back = sk.Skeleton.from_json(skel.to_json())
        assert back.names == skel.names
        assert np.array_equal(back.parent, skel.parent)
        assert np.array_equal(back.rest_offset, skel.rest_offset)
        assert np.array_equal(back.canonical_angles, skel.canonical_angles)
        assert np.array_equal(back.tip, skel.tip)

    def test_rejects_two_roots(self):
        with pytest.raises(ValueError, match="root"):
            sk.Skeleton(names=["a", "b"], parent=[-1, -1],
                        rest_offset=np.zeros((2, 3)), canonical_angles=np.zeros((2, 3)),
                        canonical_root=np.zeros(3), tip=np.zeros((2, 3)))

    def test_rejects_cycle(self):
        with pytest.raises(ValueError):
            sk.Skeleton(names=["a", "b", "c"], parent=[-1, 2, 1],
                        rest_offset=np.zeros((3, 3)), canonical_angles=np.zeros((3, 3)),
                        canonical_root=np.zeros(3), tip=np.zeros((3, 3)))

    def test_default_skeleton_has_ten_bones(self):
        assert sk.default_skeleton().bone_count == 10

    def test_pose_validates_finiteness(self):
        with pytest.raises(ValueError):
            sk.Pose(joints=np.full((2, 3), np.nan), angles=np.zeros((2, 3)),
                    root_translation=np.zeros(3))

    def test_bone_transform_rejects_non_rigid(self):
        with pytest.raises(ValueError):
            sk.BoneTransform(np.eye(3) * 2.0, np.zeros(3))
