import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from trj.data.primitives import tube
from trj.data.skeleton import KinematicTree, check_weights, euler_to_matrix, forward_kinematics, lbs_pose, matrix_to_euler


def chain(n=3, step=0.5):
    offsets = np.zeros((n, 3))
    offsets[1:, 2] = step
    return KinematicTree(tuple(f"j{i}" for i in range(n)), np.arange(n) - 1, offsets)


class TestTree:
    def test_rest_positions(self):
        np.testing.assert_allclose(chain().rest_positions(), [[0, 0, 0], [0, 0, 0.5], [0, 0, 1.0]])

    def test_parent_order_enforced(self):
        with pytest.raises(ValueError, match="precede"):
            KinematicTree(("a", "b"), np.array([-1, 1]), np.zeros((2, 3)))

    def test_single_root(self):
        with pytest.raises(ValueError, match="root"):
            KinematicTree(("a", "b"), np.array([0, -1]), np.zeros((2, 3)))

    def test_non_finite_offsets(self):
        with pytest.raises(ValueError, match="finite"):
            KinematicTree(("a",), np.array([-1]), np.array([[np.nan, 0, 0]]))


class TestEuler:
    def test_matches_scipy_intrinsic_xyz(self, rng):
        a = rng.uniform(-1.2, 1.2, size=(50, 3))
        np.testing.assert_allclose(euler_to_matrix(a), Rotation.from_euler("XYZ", a).as_matrix(), atol=1e-14)

    def test_inverse(self, rng):
        a = rng.uniform(-1.2, 1.2, size=(50, 3))
        np.testing.assert_allclose(matrix_to_euler(euler_to_matrix(a)), a, atol=1e-12)


class TestLbs:
    def setup_method(self):
        self.mesh = tube(length=1.0, radius=0.1, sides=12, rings=10)
        self.tree = chain(2, 0.5)
        z = self.mesh.vertices[:, 2]
        w = np.clip((z - 0.4) / 0.2, 0, 1)
        self.weights = np.stack([1 - w, w], axis=1)

    def test_zero_pose_is_rest(self):
        out = lbs_pose(self.mesh.vertices, self.tree, self.weights, np.zeros(6))
        np.testing.assert_array_equal(out, self.mesh.vertices)

    def test_rigid_single_joint(self, rng):
        v = self.mesh.vertices
        w = np.zeros((len(v), 2))
        w[:, 1] = 1.0
        angles = np.array([0, 0, 0, 0.3, -0.7, 1.1])
        r = euler_to_matrix(angles[3:])
        c = self.tree.rest_positions()[1]
        np.testing.assert_allclose(lbs_pose(v, self.tree, w, angles), (v - c) @ r.T + c, atol=1e-14)

    def test_elbow_bend_against_independent_oracle(self):
        angles = np.array([0.2, 0.0, 0.1, np.pi / 2, 0.0, 0.0])
        out = lbs_pose(self.mesh.vertices, self.tree, self.weights, angles)
        # independent: scipy rotations, explicit per-vertex loop
        r0 = Rotation.from_euler("XYZ", angles[:3])
        r1 = r0 * Rotation.from_euler("XYZ", angles[3:])
        p0 = np.zeros(3)
        p1 = p0 + r0.apply([0, 0, 0.5])
        rest = [np.zeros(3), np.array([0, 0, 0.5])]
        expect = np.zeros_like(self.mesh.vertices)
        for i, x in enumerate(self.mesh.vertices):
            y0 = r0.apply(x - rest[0]) + p0
            y1 = r1.apply(x - rest[1]) + p1
            expect[i] = self.weights[i, 0] * y0 + self.weights[i, 1] * y1
        assert np.abs(out - expect).max() < 1e-10

    def test_sequence_matches_frames(self, rng):
        angles = rng.uniform(-0.5, 0.5, size=(4, 6))
        seq = lbs_pose(self.mesh.vertices, self.tree, self.weights, angles)
        for k in range(4):
            np.testing.assert_allclose(seq[k], lbs_pose(self.mesh.vertices, self.tree, self.weights, angles[k]), atol=1e-15)

    def test_weight_rows(self):
        w = self.weights.copy()
        w[3, 0] += 1e-6
        with pytest.raises(ValueError, match="vertex 3"):
            check_weights(w, len(w), 2)
        with pytest.raises(ValueError, match="non-negative"):
            check_weights(-self.weights, len(w), 2)

    def test_fk_shapes(self):
        rot, pos = forward_kinematics(self.tree, np.zeros((5, 2, 3)))
        assert rot.shape == (5, 2, 3, 3) and pos.shape == (5, 2, 3)
        with pytest.raises(ValueError, match="joints"):
            forward_kinematics(self.tree, np.zeros(7))
