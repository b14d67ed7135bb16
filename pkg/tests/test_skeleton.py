import numpy as np
import pytest

from conftest import finite_diff
from uasplat.geometry import Camera, quat_from_axis_angle, quat_normalize
from uasplat.skeleton import (
    PoseFrame,
    Skeleton,
    compute_blend_weights,
    default_skeleton,
    forward_kinematics,
    lbs_backward,
    lbs_maps,
    lbs_transform,
    render_skeleton_mask,
)


def two_joint_chain(offset=(0.0, 1.0, 0.0)) -> Skeleton:
    return Skeleton(joint_names=["root", "child"], parents=[-1, 0],
                    offsets=np.array([[0.0, 0.0, 0.0], list(offset)]),
                    bone_radii=np.array([0.1]))


class TestForwardKinematics:
    def test_identity_pose_is_bind(self):
        skel = default_skeleton()
        A = forward_kinematics(skel, PoseFrame.identity(skel.num_joints))
        np.testing.assert_allclose(A[:, :3, 3], skel.bind_joint_positions(), atol=1e-14)
        np.testing.assert_allclose(A[:, :3, :3],
                                   np.broadcast_to(np.eye(3), (skel.num_joints, 3, 3)),
                                   atol=1e-14)

    def test_rotated_root_moves_child(self):
        skel = two_joint_chain()
        q = np.array([quat_from_axis_angle([0, 0, 1], np.pi / 2), [1, 0, 0, 0]])
        A = forward_kinematics(skel, PoseFrame(t=0, joint_rotations=q,
                                               root_translation=np.zeros(3)))
        np.testing.assert_allclose(A[1, :3, 3], [-1.0, 0.0, 0.0], atol=1e-12)

    def test_inverse_pose_restores_bind(self):
        skel = default_skeleton()
        rng = np.random.default_rng(0)
        q = quat_normalize(rng.normal(size=(skel.num_joints, 4)) + [2, 0, 0, 0])
        pose = PoseFrame(t=0, joint_rotations=q, root_translation=rng.normal(size=3))
        A = forward_kinematics(skel, pose)
        bind = np.eye(4)[None].repeat(skel.num_joints, axis=0)
        bind[:, :3, 3] = skel.bind_joint_positions()
        # composing each joint's forward map with its inverse must give bind
        for j in range(skel.num_joints):
            inv = np.linalg.inv(A[j])
            np.testing.assert_allclose(inv @ A[j], np.eye(4), atol=1e-12)
        np.testing.assert_allclose(
            forward_kinematics(skel, PoseFrame.identity(skel.num_joints)), bind,
            atol=1e-14)

    def test_joint_count_mismatch(self):
        skel = default_skeleton()
        with pytest.raises(ValueError):
            forward_kinematics(skel, PoseFrame.identity(skel.num_joints - 1))


class TestLbs:
    def test_identity_pose_is_identity_map(self):
        skel = default_skeleton()
        pose = PoseFrame.identity(skel.num_joints)
        rng = np.random.default_rng(1)
        w = rng.random(skel.num_joints)
        w /= w.sum()
        x = rng.normal(size=3)
        x_obs, R = lbs_transform(x, w, skel, pose)
        np.testing.assert_allclose(x_obs, x, atol=1e-12)
        np.testing.assert_allclose(R, np.eye(3), atol=1e-9)

    def test_single_joint_rotation(self):
        skel = two_joint_chain()
        q = np.array([quat_from_axis_angle([0, 0, 1], np.pi / 2), [1, 0, 0, 0]])
        pose = PoseFrame(t=0, joint_rotations=q, root_translation=np.zeros(3))
        w = np.array([1.0, 0.0])  # bound entirely to the root at the origin
        x_obs, R = lbs_transform(np.array([1.0, 0.0, 0.0]), w, skel, pose)
        np.testing.assert_allclose(x_obs, [0.0, 1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(R, np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]),
                                   atol=1e-12)

    def test_half_translation_blend(self):
        skel = Skeleton(joint_names=["root", "shift"], parents=[-1, 0],
                        offsets=np.zeros((2, 3)), bone_radii=np.array([0.1]))
        pose = PoseFrame(t=0, joint_rotations=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
                         root_translation=np.zeros(3))
        # fake a pure-translation joint by moving its bind offset through the pose:
        # instead drive the root and keep joint 1 at identity
        pose_shift = PoseFrame(t=0, joint_rotations=pose.joint_rotations,
                               root_translation=np.array([1.0, 0.0, 0.0]))
        maps_identity = lbs_maps(skel, pose, np.array([[1.0, 0.0]]))
        maps_shift = lbs_maps(skel, pose_shift, np.array([[1.0, 0.0]]))
        x = np.array([0.2, 0.3, -0.1])
        a = maps_identity.M[0] @ x + maps_identity.b[0]
        b = maps_shift.M[0] @ x + maps_shift.b[0]
        blended = 0.5 * a + 0.5 * b
        np.testing.assert_allclose(blended, x + [0.5, 0, 0], atol=1e-12)
        # same result through half/half weights on two differently-posed joints
        skel2 = Skeleton(joint_names=["root", "j"], parents=[-1, 0],
                         offsets=np.zeros((2, 3)), bone_radii=np.array([0.1]))
        # joint 1 inherits the root, so emulate via two clouds is unnecessary;
        # directly check the formula with explicit per-joint transforms
        from uasplat.skeleton import skinning_transforms
        T_a = skinning_transforms(skel2, pose)
        T_b = skinning_transforms(skel2, pose_shift)
        Mix = 0.5 * T_a[0] + 0.5 * T_b[0]
        np.testing.assert_allclose(Mix[:3, :3] @ x + Mix[:3, 3], x + [0.5, 0, 0],
                                   atol=1e-12)

    def test_linearity_in_x(self):
        skel = default_skeleton()
        rng = np.random.default_rng(2)
        q = quat_normalize(rng.normal(size=(skel.num_joints, 4)) + [2, 0, 0, 0])
        pose = PoseFrame(t=0, joint_rotations=q, root_translation=rng.normal(size=3))
        w = rng.random(skel.num_joints) + 0.1
        w /= w.sum()
        maps = lbs_maps(skel, pose, w[None])
        x, y = rng.normal(size=3), rng.normal(size=3)
        a, b = 0.3, 0.7  # affine combination (weights sum to 1)
        lhs = maps.M[0] @ (a * x + b * y) + maps.b[0]
        rhs = a * (maps.M[0] @ x + maps.b[0]) + b * (maps.M[0] @ y + maps.b[0])
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_blended_rotation_orthonormal(self):
        skel = default_skeleton()
        rng = np.random.default_rng(3)
        for _ in range(10):
            q = quat_normalize(rng.normal(size=(skel.num_joints, 4)) + [2, 0, 0, 0])
            pose = PoseFrame(t=0, joint_rotations=q, root_translation=np.zeros(3))
            w = rng.random((5, skel.num_joints)) + 0.05
            w /= w.sum(axis=1, keepdims=True)
            maps = lbs_maps(skel, pose, w)
            RtR = np.swapaxes(maps.R_blend, -1, -2) @ maps.R_blend
            np.testing.assert_allclose(RtR, np.broadcast_to(np.eye(3), RtR.shape),
                                       atol=1e-6)
            assert np.all(np.linalg.det(maps.R_blend) > 0)


class TestLbsBackward:
    def test_identity(self):
        skel = default_skeleton()
        maps = lbs_maps(skel, PoseFrame.identity(skel.num_joints),
                        np.eye(skel.num_joints)[:1])
        g = np.array([0.1, -0.2, 0.3])
        np.testing.assert_allclose(lbs_backward(g[None], maps)[0], g, atol=1e-12)

    def test_pure_rotation_adjoint(self):
        skel = two_joint_chain()
        q = np.array([quat_from_axis_angle([0, 0, 1], np.pi / 2), [1, 0, 0, 0]])
        pose = PoseFrame(t=0, joint_rotations=q, root_translation=np.zeros(3))
        maps = lbs_maps(skel, pose, np.array([[1.0, 0.0]]))
        g = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(lbs_backward(g[None], maps)[0], maps.M[0].T @ g,
                                   atol=1e-14)

    def test_matches_finite_differences(self):
        skel = default_skeleton()
        rng = np.random.default_rng(4)
        q = quat_normalize(rng.normal(size=(skel.num_joints, 4)) + [2, 0, 0, 0])
        pose = PoseFrame(t=0, joint_rotations=q, root_translation=rng.normal(size=3))
        w = rng.random(skel.num_joints) + 0.1
        w /= w.sum()
        maps = lbs_maps(skel, pose, w[None])
        up = rng.normal(size=3)
        x = rng.normal(size=3)
        ana = lbs_backward(up[None], maps)[0]
        fd = finite_diff(lambda v: float(up @ (maps.M[0] @ v + maps.b[0])), x)
        np.testing.assert_allclose(ana, fd, rtol=1e-4, atol=1e-9)


class TestBlendWeights:
    def test_rows_are_stochastic(self):
        skel = default_skeleton()
        rng = np.random.default_rng(5)
        pts = rng.normal(0, 0.5, (40, 3))
        w = compute_blend_weights(skel, pts)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)

    def test_point_on_bone_binds_to_it(self):
        skel = default_skeleton()
        bind = skel.bind_joint_positions()
        mid = 0.5 * (bind[0] + bind[1])  # middle of the root->spine bone
        w = compute_blend_weights(skel, mid[None])[0]
        assert w[0] > 0.9  # proximal joint of that bone is the root


class TestSkeletonMask:
    def _camera(self, pos=(0, 0.3, -3.0)):
        return Camera.look_at(np.array(pos), np.zeros(3), 40, 40, 32, 32)

    def test_behind_camera_empty(self):
        skel = default_skeleton()
        cam = Camera(R=np.eye(3), t=np.array([0, 0, 5.0]), fx=40, fy=40,
                     cx=15.5, cy=15.5, width=32, height=32)
        # the whole figure sits at z ~ 5 behind the camera plane... place it behind
        cam = Camera(R=np.eye(3), t=np.array([0, 0, -5.0]), fx=40, fy=40,
                     cx=15.5, cy=15.5, width=32, height=32)
        mask = render_skeleton_mask(skel, PoseFrame.identity(skel.num_joints), cam)
        assert not mask.any()

    def test_vertical_bone_blob(self):
        skel = Skeleton(joint_names=["root", "top"], parents=[-1, 0],
                        offsets=np.array([[0.0, -0.4, 0.0], [0.0, 0.8, 0.0]]),
                        bone_radii=np.array([0.12]))
        cam = Camera(R=np.eye(3), t=np.array([0, 0, 3.0]), fx=40, fy=40,
                     cx=15.5, cy=15.5, width=32, height=32)
        mask = render_skeleton_mask(skel, PoseFrame.identity(skel.num_joints), cam)
        ys, xs = np.nonzero(mask)
        assert mask[15:17, 15:17].any()  # contains image center
        assert ys.max() - ys.min() > xs.max() - xs.min()  # vertically elongated

    def test_area_monotone_in_radius(self):
        skel = default_skeleton()
        pose = PoseFrame.identity(skel.num_joints)
        cam = self._camera()
        areas = []
        for scale in (0.5, 1.0, 1.5, 2.0):
            mask = render_skeleton_mask(skel, pose, cam,
                                        capsule_radii=skel.bone_radii * scale)
            areas.append(int(mask.sum()))
        assert all(a <= b for a, b in zip(areas, areas[1:]))


class TestSkeletonValidation:
    def test_topological_order_enforced(self):
        with pytest.raises(ValueError):
            Skeleton(joint_names=["a", "b"], parents=[-1, 2],
                     offsets=np.zeros((2, 3)), bone_radii=np.array([0.1]))

    def test_blend_row_validation(self):
        with pytest.raises(ValueError):
            Skeleton(joint_names=["a", "b"], parents=[-1, 0],
                     offsets=np.zeros((2, 3)), bone_radii=np.array([0.1]),
                     bind_vertices=np.zeros((1, 3)),
                     blend_weights=np.array([[0.5, 0.6]]))
