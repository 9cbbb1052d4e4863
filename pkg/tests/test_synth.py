import numpy as np
import pytest

from trj.data.dataset import from_synth, load_dataset, read_index, write_index, write_sequence
from trj.data.preprocess import apply_global_transform, check_rigid, zero_root_orientation
from trj.data.skeleton import forward_kinematics
from trj.data.synth import PLANS, build_body, pad_beta, secondary_motion, synth_generate, zero_trajectory
from trj.mesh import check_faces, check_manifold, face_areas, is_closed


class TestBodies:
    @pytest.mark.parametrize("plan", sorted(PLANS))
    def test_closed_manifold_outward(self, plan):
        b = build_body(plan)
        check_manifold(b.mesh)
        assert is_closed(b.mesh)
        v, f = b.mesh.vertices, b.mesh.faces
        volume = np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6
        assert volume > 0

    def test_face_counts(self):
        assert build_body("arm").mesh.n_faces == 300
        assert 250 <= build_body("humanoid").mesh.n_faces <= 350
        assert 900 <= build_body("humanoid", res=2).mesh.n_faces <= 1200

    def test_limb_scale_doubles_length(self):
        base = build_body("humanoid")
        params = np.ones(len(PLANS["humanoid"].beta_keys))
        params[PLANS["humanoid"].beta_keys.index("arm_upper+arm_lower")] = 2.0
        long = build_body("humanoid", params)

        def arm_len(b):
            rest = b.tree.rest_positions()
            i, j = b.tree.index("l_shoulder"), b.tree.index("l_elbow")
            return np.linalg.norm(rest[j] - rest[i])

        assert arm_len(long) == pytest.approx(2 * arm_len(base))

    def test_tube_length(self):
        params = np.array([2.0, 1.0])
        v = build_body("arm", params).mesh.vertices
        assert np.ptp(v[:, 2]) == pytest.approx(2.0)

    @pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
    def test_invalid_shape(self, bad):
        with pytest.raises(ValueError, match="positive"):
            build_body("arm", [1.0, bad])

    def test_weights_exist_only_in_generator(self):
        b = build_body("humanoid")
        np.testing.assert_allclose(b.weights.sum(axis=1), 1.0, atol=1e-12)
        assert b.beta.shape == (16,)

    def test_pad_beta(self):
        np.testing.assert_array_equal(pad_beta([1.0, 2.0], 4), [1, 2, 0, 0])
        with pytest.raises(ValueError):
            pad_beta(np.ones(17))


class TestMotion:
    def test_zero_trajectory_is_rest(self):
        s = zero_trajectory("humanoid", frames=5)
        for f in s.frames:
            np.testing.assert_allclose(f, s.body.mesh.vertices, atol=1e-14)

    def test_first_frame_rest_pose(self):
        s = synth_generate("humanoid", motion="walk", seed=4)
        assert np.all(s.manifest.angles[0] == 0)

    def test_deterministic(self):
        a = synth_generate("quadruped", motion="wave", seed=7, frames=16)
        b = synth_generate("quadruped", motion="wave", seed=7, frames=16)
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.manifest.angles, b.manifest.angles)

    def test_seeds_differ(self):
        a = synth_generate("arm", seed=1, frames=16)
        b = synth_generate("arm", seed=2, frames=16)
        assert not np.array_equal(a.manifest.angles, b.manifest.angles)

    @pytest.mark.parametrize("plan", sorted(PLANS))
    @pytest.mark.parametrize("motion", ["walk", "wave"])
    def test_no_degenerate_faces(self, plan, motion):
        s = synth_generate(plan, motion=motion, seed=3, frames=96)
        rest = face_areas(s.body.mesh.vertices, s.body.mesh.faces)
        for f in s.frames:
            areas = check_faces(s.body.mesh, f)
            assert (areas / rest).min() > 0.05


class TestSecondaryMotion:
    def test_zero_gain_and_short(self, rng):
        x = rng.normal(size=(5, 4, 3))
        np.testing.assert_array_equal(secondary_motion(x, 30.0, np.ones(4), gain=0.0), x)
        np.testing.assert_array_equal(secondary_motion(x[:2], 30.0, np.ones(4)), x[:2])

    def test_constant_velocity_has_no_lag(self):
        x = np.arange(10.0)[:, None, None] * np.array([0.01, 0.02, 0.0]) + np.zeros((1, 3, 3))
        np.testing.assert_allclose(secondary_motion(x, 30.0, np.ones(3)), x, atol=1e-15)

    def test_causal(self, rng):
        x = np.cumsum(rng.normal(scale=0.01, size=(20, 6, 3)), axis=0)
        y = x.copy()
        y[12:] += 0.05
        a = secondary_motion(x, 30.0, np.ones(6))
        b = secondary_motion(y, 30.0, np.ones(6))
        np.testing.assert_array_equal(a[:12], b[:12])
        assert np.abs(a[14:] - b[14:] - 0.05).max() > 1e-4

    def test_lags_behind_acceleration(self):
        # a step in velocity leaves the soft vertex trailing the skin
        t = np.arange(12.0)
        x = np.zeros((12, 1, 3))
        x[:, 0, 0] = np.maximum(t - 3, 0) * 0.01
        y = secondary_motion(x, 30.0, np.ones(1))
        assert y[5, 0, 0] < x[5, 0, 0]

    def test_history_dependence(self):
        s = synth_generate("humanoid", motion="walk", seed=2, frames=30)
        flat = synth_generate("humanoid", motion="walk", seed=2, frames=30, dynamics=0.0)
        d = np.linalg.norm(s.frames - flat.frames, axis=-1)
        assert d[:2].max() == 0 and d.max() > 0.01


class TestPreprocess:
    def test_already_zero_unchanged(self):
        s = zero_trajectory("arm", frames=3)
        z = zero_root_orientation(s.manifest)
        assert np.array_equal(z.angles, s.manifest.angles) and z.root_zeroed

    def test_constant_yaw(self):
        s = zero_trajectory("arm", frames=3)
        m = s.manifest
        m.angles[:, 2] = np.pi / 2
        z = zero_root_orientation(m)
        assert np.all(z.angles[:, :3] == 0)
        r = z.global_transforms[:, :3, :3]
        np.testing.assert_allclose(r @ [1.0, 0, 0], np.tile([0, 1.0, 0], (3, 1)), atol=1e-15)

    def test_world_orientations_recovered(self):
        s = synth_generate("humanoid", motion="walk", seed=2, frames=20)
        z = zero_root_orientation(s.manifest)
        rot, pos = forward_kinematics(s.body.tree, s.manifest.angles)
        rz, pz = forward_kinematics(s.body.tree, z.angles)
        base = s.manifest.global_transforms
        g = z.global_transforms
        np.testing.assert_allclose(np.einsum("tij,tkjl->tkil", g[:, :3, :3], rz), np.einsum("tij,tkjl->tkil", base[:, :3, :3], rot), atol=1e-12)
        world = np.einsum("tij,tkj->tki", g[:, :3, :3], pz) + g[:, None, :3, 3]
        expect = np.einsum("tij,tkj->tki", base[:, :3, :3], pos) + base[:, None, :3, 3]
        np.testing.assert_allclose(world, expect, atol=1e-12)

    def test_canonical_round_trip(self):
        s = synth_generate("humanoid", motion="wave", seed=5, frames=40)
        c = from_synth(s)
        assert np.abs(apply_global_transform(c.frames, c.manifest.global_transforms) - s.frames).max() < 1e-8

    def test_height_scaling(self):
        x = np.zeros((2, 1, 3))
        t = np.tile(np.eye(4), (2, 1, 1))
        t[:, :3, 3] = [[0, 0, 0], [1.0, 2.0, 0.0]]
        np.testing.assert_allclose(apply_global_transform(x, t, 2.0)[1, 0], [2, 4, 0])

    def test_pure_translation_bit_identical_shape(self, rng):
        x = rng.normal(size=(3, 10, 3))
        t = np.tile(np.eye(4), (3, 1, 1))
        t[:, :3, 3] = 0.5
        y = apply_global_transform(x, t)
        np.testing.assert_array_equal(y, x + 0.5)

    def test_non_rigid_rejected(self):
        t = np.eye(4)[None].copy()
        t[0, 0, 0] = 1.1
        with pytest.raises(ValueError, match="not rigid"):
            check_rigid(t)


class TestDataset:
    def test_disk_round_trip(self, tmp_path):
        s = synth_generate("arm", motion="walk", seed=1, frames=6)
        entry = write_sequence(tmp_path, s, category="walk")
        write_index(tmp_path, [entry])
        entries, _ = read_index(tmp_path)
        assert entries[0].category == "walk"
        loaded = load_dataset(tmp_path)[0]
        ref = from_synth(s)
        np.testing.assert_array_equal(loaded.frames, ref.frames)
        np.testing.assert_array_equal(loaded.manifest.angles, ref.manifest.angles)
