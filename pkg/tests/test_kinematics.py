import numpy as np
import pytest

from ugcn3d.errors import BoneLengthMismatch, DegenerateBone, InvalidRotation, ZeroVector
from ugcn3d.kinematics import (
    RotationSet,
    axis_angle_matrix,
    check_rotations,
    forward_kinematics,
    inverse_kinematics_swing,
    random_swing_rotations,
    rest_bones,
    rotation_between,
)
from ugcn3d.topology import build_topology

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def assert_valid(R, tol=1e-9):
    R = np.asarray(R)
    gram = np.swapaxes(R, -1, -2) @ R - np.eye(3)
    assert np.sqrt((gram ** 2).sum(axis=(-2, -1))).max() < tol
    assert np.abs(np.linalg.det(R) - 1).max() < tol


def fk_oracle(parents, rest, rotations, translation):
    """Per-joint recursion straight from q_k = R_k (t_k - t_pa) + q_pa."""
    n = len(parents)
    q = [None] * n

    def solve(k):
        if q[k] is None:
            p = parents[k]
            if p < 0:
                q[k] = [rest[k][i] + translation[i] for i in range(3)]
            else:
                qp = solve(p)
                b = [rest[k][i] - rest[p][i] for i in range(3)]
                q[k] = [sum(rotations[k][i][j] * b[j] for j in range(3)) + qp[i] for i in range(3)]
        return q[k]

    return np.array([solve(k) for k in range(n)])


class TestRotationBetween:
    def test_equal_vectors_identity(self):
        np.testing.assert_array_equal(rotation_between([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]), np.eye(3))

    def test_x_to_z(self):
        R = rotation_between([1.0, 0, 0], [0, 0, 1.0])
        c, s = np.cos(-np.pi / 2), np.sin(-np.pi / 2)
        ry_minus90 = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        np.testing.assert_allclose(R, ry_minus90, atol=1e-15)
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 0, 1], atol=1e-15)

    def test_random_pairs(self, rng):
        u = rng.normal(size=(500, 3))
        v = rng.normal(size=(500, 3))
        R = rotation_between(u, v)
        uh = u / np.linalg.norm(u, axis=1, keepdims=True)
        vh = v / np.linalg.norm(v, axis=1, keepdims=True)
        assert np.linalg.norm(np.einsum("nij,nj->ni", R, uh) - vh, axis=1).max() < 1e-9
        assert_valid(R)
        # minimal: rotation angle equals the angle between the vectors
        angle = np.arccos(np.clip((np.trace(R, axis1=1, axis2=2) - 1) / 2, -1, 1))
        np.testing.assert_allclose(angle, np.arccos(np.clip((uh * vh).sum(1), -1, 1)), atol=1e-7)

    def test_antiparallel_uses_smallest_component_axis(self):
        u = np.array([3.0, 0.5, -2.0])
        R = rotation_between(u, -u)
        uh = u / np.linalg.norm(u)
        axis = np.cross(uh, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        np.testing.assert_allclose(R, 2 * np.outer(axis, axis) - np.eye(3), atol=1e-15)
        np.testing.assert_allclose(R @ uh, -uh, atol=1e-12)

    def test_near_antiparallel_accuracy(self):
        u = np.array([1.0, 0.0, 0.0])
        v = np.array([-1.0, 1e-7, 0.0])
        R = rotation_between(u, v)
        assert_valid(R)
        np.testing.assert_allclose(R @ u, v / np.linalg.norm(v), atol=1e-12)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            rotation_between([0.0, 0, 0], [1.0, 0, 0])


class TestForward:
    def test_identity_reproduces_rest(self, h36m, rest17):
        q = forward_kinematics(h36m, rest17, RotationSet.identity(17))
        np.testing.assert_array_equal(q, rest17)

    def test_two_joint_quarter_turn(self):
        topo = build_topology([-1, 0])
        rest = np.array([[0.0, 0, 0], [100.0, 0, 0]])
        rot = RotationSet.identity(2)
        rot.rotations[1] = RZ90
        q = forward_kinematics(topo, rest, rot)
        np.testing.assert_allclose(q[1] - q[0], [0, 100, 0], atol=1e-12)

    def test_chain_matches_oracle(self, chain3, rng):
        rest = rng.normal(size=(3, 3)) * 100
        for _ in range(10):
            rot = RotationSet.identity(3)
            rot.rotations[1:] = axis_angle_matrix(rng.normal(size=(2, 3)), rng.uniform(0, np.pi, 2))
            rot.root_translation = rng.normal(size=3) * 50
            expected = fk_oracle(chain3.parents, rest.tolist(), rot.rotations.tolist(), rot.root_translation.tolist())
            np.testing.assert_allclose(forward_kinematics(chain3, rest, rot), expected, rtol=0, atol=1e-9)

    def test_bone_lengths_preserved(self, h36m, rest17, rng):
        rot = RotationSet.identity(17, (50,))
        rot.rotations[:] = axis_angle_matrix(rng.normal(size=(50, 17, 3)), rng.uniform(0, np.pi, (50, 17)))
        q = forward_kinematics(h36m, rest17, rot)
        for k, p in h36m.bones():
            L = np.linalg.norm(rest17[k] - rest17[p])
            np.testing.assert_allclose(np.linalg.norm(q[:, k] - q[:, p], axis=1), L, rtol=1e-9)

    def test_invalid_rotation_rejected(self, chain3, rng):
        rot = RotationSet.identity(3)
        rot.rotations[2] = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvalidRotation):
            forward_kinematics(chain3, np.eye(3), rot)
        with pytest.raises(InvalidRotation):
            check_rotations(np.eye(3) * 1.001)


class TestInverse:
    def test_rest_gives_identity(self, h36m, rest17):
        rot = inverse_kinematics_swing(h36m, rest17, rest17)
        np.testing.assert_array_equal(rot.rotations, np.broadcast_to(np.eye(3), (17, 3, 3)))
        np.testing.assert_array_equal(rot.root_translation, 0)

    def test_quarter_turn(self):
        topo = build_topology([-1, 0])
        rest = np.array([[0.0, 0, 0], [100.0, 0, 0]])
        rot = inverse_kinematics_swing(topo, rest, np.array([[0.0, 0, 0], [0.0, 100, 0]]))
        np.testing.assert_allclose(rot.rotations[1], RZ90, atol=1e-15)

    def test_antiparallel_reproduced_by_fk(self):
        topo = build_topology([-1, 0])
        rest = np.array([[0.0, 0, 0], [30.0, 40.0, 0]])
        observed = np.array([[5.0, 5, 5], [-25.0, -35.0, 5]])
        rot = inverse_kinematics_swing(topo, rest, observed)
        assert_valid(rot.rotations)
        np.testing.assert_allclose(forward_kinematics(topo, rest, rot), observed, atol=1e-9)

    def test_bone_length_mismatch(self, chain3):
        rest = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        observed = rest.copy()
        observed[2, 0] = 2.01
        with pytest.raises(BoneLengthMismatch, match="joint 2"):
            inverse_kinematics_swing(chain3, rest, observed)

    def test_degenerate_bone(self, chain3):
        rest = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
        with pytest.raises(DegenerateBone, match="joint 1"):
            inverse_kinematics_swing(chain3, rest, rest)

    def test_round_trips(self, h36m, rest17):
        gen = np.random.default_rng(5)
        rot = random_swing_rotations(h36m, rest17, gen, batch=(100,))
        p = forward_kinematics(h36m, rest17, rot)
        back = inverse_kinematics_swing(h36m, rest17, p)
        np.testing.assert_allclose(back.rotations, rot.rotations, atol=1e-9)
        np.testing.assert_allclose(forward_kinematics(h36m, rest17, back), p, rtol=1e-6, atol=1e-9)

    def test_twisted_pose_positions_recovered(self, h36m, rest17, rng):
        # rotations with twist: IK drops the twist yet positions still match
        rot = RotationSet.identity(17, (20,))
        rot.rotations[:] = axis_angle_matrix(rng.normal(size=(20, 17, 3)), rng.uniform(0, np.pi, (20, 17)))
        p = forward_kinematics(h36m, rest17, rot)
        back = inverse_kinematics_swing(h36m, rest17, p)
        assert_valid(back.rotations)
        np.testing.assert_allclose(forward_kinematics(h36m, rest17, back), p, atol=1e-9)
        # the recovered rotations are swing-only: axis perpendicular to the rest bone
        bones = rest_bones(h36m, rest17)
        for k, _ in h36m.bones():
            R = back.rotations[:, k]
            axis = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
            assert np.abs(axis @ bones[k]).max() < 1e-6 * np.linalg.norm(bones[k])
