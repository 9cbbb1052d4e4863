import numpy as np
import pytest

from trj.autodiff import Tensor, gradcheck
from trj.data.primitives import icosphere
from trj.features import (
    FeatureSpec,
    assemble_face_features,
    cached_wks,
    face_inputs,
    init_feature_net,
    laplace_beltrami_eigs,
    pointnet_features,
    wave_kernel_signature,
    wks_vertices,
)
from trj.mesh import vertex_masses


def rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


class TestPointNet:
    def test_shape(self, sphere):
        spec = FeatureSpec()
        p = init_feature_net(spec, np.random.default_rng(0))
        x = face_inputs(sphere)
        assert pointnet_features(spec, p, x[:, :3], x[:, 3:]).shape == (sphere.n_faces, 32)

    @pytest.mark.parametrize("pool", [False, True])
    def test_gradients(self, pool, rng):
        spec = FeatureSpec(hidden=8, out_dim=4, global_pool=pool)
        p = init_feature_net(spec, rng, dtype=np.float64)
        x = rng.normal(size=(7, 6))
        errs = gradcheck(lambda: (pointnet_features(spec, p, x[:, :3], x[:, 3:]) ** 2).sum(), p)
        assert max(errs.values()) < 1e-4, errs

    def test_inputs_normalized(self, sphere):
        x = face_inputs(sphere.with_vertices(sphere.vertices * 7 + 3))
        np.testing.assert_allclose(x, face_inputs(sphere), atol=1e-12)

    def test_assemble_mismatch(self):
        with pytest.raises(ValueError, match="face count"):
            assemble_face_features(Tensor(np.zeros((3, 2))), np.zeros((4, 16)))


class TestWks:
    def test_rigid_invariance(self, sphere, rng):
        moved = sphere.with_vertices(sphere.vertices @ rotation(rng).T + rng.normal(size=3))
        a = wave_kernel_signature(sphere)
        b = wave_kernel_signature(moved)
        assert np.abs(a - b).max() / np.abs(a).max() < 1e-8

    def test_shape_and_finite(self, cylinder):
        w = wave_kernel_signature(cylinder)
        assert w.shape == (cylinder.n_faces, 16) and np.all(np.isfinite(w))

    def test_partition_normalization(self, cylinder):
        evals, evecs = laplace_beltrami_eigs(cylinder, 32)
        w = wks_vertices(evals, evecs)
        np.testing.assert_allclose(vertex_masses(cylinder) @ w, 1.0, rtol=1e-10)

    def test_eigs_mass_orthonormal(self, cylinder):
        _, phi = laplace_beltrami_eigs(cylinder, 10)
        m = vertex_masses(cylinder)
        np.testing.assert_allclose(phi.T @ (m[:, None] * phi), np.eye(10), atol=1e-10)

    def test_eigen_count_bounds(self):
        tiny = icosphere(0)
        with pytest.raises(ValueError, match="k_eigen"):
            wave_kernel_signature(tiny, k_eigen=tiny.n_vertices)

    def test_cache(self, sphere, tmp_path):
        a = cached_wks(sphere, tmp_path)
        assert len(list(tmp_path.iterdir())) == 1
        b = cached_wks(sphere, tmp_path)
        assert np.array_equal(a, b)
