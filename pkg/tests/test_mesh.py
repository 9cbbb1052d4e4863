import numpy as np
import pytest
import scipy.linalg
from scipy.spatial.transform import Rotation

from conftest import bend, wavy_sheet
from trj.data.primitives import grid, icosphere, tube
from trj.mesh import (
    LOCAL,
    WORLD,
    JacobianField,
    MeshError,
    TriMesh,
    build_local_bases,
    check_manifold,
    compute_jacobians,
    cotan_laplacian,
    face_gradient_operator,
    poisson_prefactorize,
    poisson_solve,
    vertex_and_face_normals,
)

UNIT_TRI = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def aligned(system, x):
    """Shift positions so their mass-weighted centroid sits on the anchor."""
    return x - (system.centroid(x) - system.anchor)[..., None, :]


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestTriMesh:
    def test_rejects_out_of_range(self):
        with pytest.raises(MeshError):
            TriMesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_rejects_repeated_vertex(self):
        with pytest.raises(MeshError) as err:
            TriMesh(np.eye(3), [[0, 1, 2], [0, 0, 1]])
        assert err.value.face == 1

    def test_non_manifold_edge(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
        m = TriMesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
        with pytest.raises(MeshError, match="non-manifold"):
            check_manifold(m)


class TestLocalBases:
    def test_unit_triangle(self):
        b = build_local_bases(UNIT_TRI)
        np.testing.assert_allclose(b.frames[0, :, 2], [0, 0, 1])
        np.testing.assert_allclose(b.frames[0, :, 0], [1, 0, 0])
        np.testing.assert_allclose(b.centroids[0], [1 / 3, 1 / 3, 0])

    def test_rotation_equivariance(self, sheet):
        r = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
        b0 = build_local_bases(sheet)
        b1 = build_local_bases(sheet.with_vertices(sheet.vertices @ r.T))
        np.testing.assert_allclose(b1.frames, r @ b0.frames, atol=1e-12)

    def test_icosphere_orthonormal(self, sphere):
        assert sphere.n_faces == 320
        b = build_local_bases(sphere)
        eye = np.einsum("fji,fjk->fik", b.frames, b.frames)
        assert np.abs(eye - np.eye(3)).max() < 1e-10
        assert np.abs(np.linalg.det(b.frames) - 1).max() < 1e-10

    def test_degenerate_face_reported(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], float)
        m = TriMesh(v, [[0, 1, 2], [0, 1, 3]])
        with pytest.raises(MeshError) as err:
            build_local_bases(m)
        assert err.value.face == 1


class TestGradient:
    def test_constant_function(self, sheet):
        g = face_gradient_operator(sheet)
        assert np.abs(g.blocks.sum(axis=2)).max() < 1e-10
        assert np.abs(g.matrix @ np.ones(sheet.n_vertices)).max() < 1e-10

    def test_linear_function_flat(self):
        m = grid(6, 5, jitter=0.3)
        g = face_gradient_operator(m)
        b = build_local_bases(m)
        local = g.apply(m.vertices[:, :1])[..., 0]  # gradient of f = x
        world = np.einsum("fca,fa->fc", b.frames, local)
        np.testing.assert_allclose(world, np.tile([1.0, 0, 0], (m.n_faces, 1)), atol=1e-12)

    def test_matches_barycentric_finite_differences(self):
        m = wavy_sheet(16, seed=3)
        assert m.n_faces >= 500
        rng = np.random.default_rng(0)
        f = rng.normal(size=m.n_vertices)
        g = face_gradient_operator(m)
        b = build_local_bases(m)
        ours = (g.matrix @ f).reshape(-1, 3)
        p = m.vertices[m.faces]
        eps = 1e-3

        def interp(i, q):
            # barycentric coordinates of q in face i
            a, bb, c = p[i]
            t = np.column_stack([bb - a, c - a])
            lam = np.linalg.lstsq(t, q - a, rcond=None)[0]
            w = np.array([1 - lam.sum(), lam[0], lam[1]])
            return w @ f[m.faces[i]]

        fd = np.zeros((m.n_faces, 2))
        for i in range(m.n_faces):
            for a in range(2):
                d = eps * b.frames[i, :, a]
                fd[i, a] = (interp(i, b.centroids[i] + d) - interp(i, b.centroids[i] - d)) / (2 * eps)
        assert np.abs(ours[:, :2] - fd).max() < 1e-10
        assert np.all(ours[:, 2] == 0)


class TestLaplacian:
    def test_two_equilateral_triangles(self):
        h = np.sqrt(3) / 2
        v = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]])
        m = TriMesh(v, [[0, 1, 2], [1, 0, 3]])
        lap, _ = cotan_laplacian(m)
        assert lap[0, 1] == pytest.approx(-(2 / np.sqrt(3)) / 2, abs=1e-12)
        assert lap[0, 1] == pytest.approx(-0.57735, abs=1e-5)

    @pytest.mark.parametrize("name", ["sheet", "sphere", "cylinder"])
    def test_gradient_form_equals_classic(self, name, request):
        m = request.getfixturevalue(name)
        classic, areas = cotan_laplacian(m)
        g = face_gradient_operator(m)
        ours = g.laplacian()
        assert abs(ours - classic).max() < 1e-10
        np.testing.assert_allclose(areas, g.areas)
        assert abs(classic - classic.T).max() < 1e-12
        assert np.abs(classic @ np.ones(m.n_vertices)).max() < 1e-12

    def test_psd_and_pinned_positive(self, cylinder):
        lap = face_gradient_operator(cylinder).laplacian().toarray()
        ev = np.linalg.eigvalsh(lap)
        assert ev[0] > -1e-10 and ev[1] > 1e-8
        sys = poisson_prefactorize(cylinder)
        pinned = lap + np.outer(sys.masses, sys.masses)
        assert np.linalg.eigvalsh(pinned)[0] > 0

    def test_sliver_clamped_with_warning(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1e-9, 0], [0.5, -1, 0]])
        m = TriMesh(v, [[0, 1, 2], [1, 0, 3]])
        with pytest.warns(RuntimeWarning, match="clamped"):
            lap, _ = cotan_laplacian(m)
        assert np.all(np.abs(lap.data) <= 1e8)


class TestJacobians:
    def test_identity_world_and_local(self, sphere):
        b = build_local_bases(sphere)
        jf = compute_jacobians(sphere, b, sphere.vertices)
        assert jf.basis == LOCAL
        np.testing.assert_allclose(jf.matrices, b.frames, atol=1e-12)
        assert np.abs(np.linalg.det(jf.matrices) - 1).max() < 1e-10
        w = jf.to_world(b)
        assert w.basis == WORLD
        np.testing.assert_allclose(w.matrices, np.broadcast_to(np.eye(3), w.matrices.shape), atol=1e-12)

    def test_uniform_scale(self, sheet):
        b = build_local_bases(sheet)
        jf = compute_jacobians(sheet, b, 2.0 * sheet.vertices)
        sv = np.linalg.svd(jf.matrices[:, :, :2], compute_uv=False)
        np.testing.assert_allclose(sv, 2.0, atol=1e-12)

    def test_rigid_equivariance(self, cylinder, rng):
        b = build_local_bases(cylinder)
        x = bend(cylinder.vertices)
        r = Rotation.random(random_state=3).as_matrix()
        j0 = compute_jacobians(cylinder, b, x).to_world(b).matrices
        j1 = compute_jacobians(cylinder, b, x @ r.T).to_world(b).matrices
        np.testing.assert_allclose(j1, r @ j0, atol=1e-12)

    def test_shape_mismatch(self, sheet):
        with pytest.raises(ValueError):
            compute_jacobians(sheet, build_local_bases(sheet), np.zeros((3, 3)))


class TestPoisson:
    def test_round_trip_bent(self, cylinder):
        sys = poisson_prefactorize(cylinder)
        x = bend(cylinder.vertices)
        jf = compute_jacobians(cylinder, sys.bases, x)
        out = poisson_solve(sys, jf)
        assert rel_err(out, aligned(sys, x)) < 1e-6
        np.testing.assert_allclose(sys.centroid(out), sys.anchor, atol=1e-12)

    def test_identity_field_reproduces_rest(self, sphere):
        sys = poisson_prefactorize(sphere)
        out = sys.solve(sys.bases.frames)
        assert rel_err(out, sphere.vertices) < 1e-10

    def test_world_tagged_field(self, sphere):
        sys = poisson_prefactorize(sphere)
        eye = JacobianField(np.broadcast_to(np.eye(3), (sphere.n_faces, 3, 3)), WORLD)
        assert rel_err(sys.solve(eye), sphere.vertices) < 1e-10

    def test_double_identity_scales_about_anchor(self, sheet):
        sys = poisson_prefactorize(sheet)
        out = sys.solve(2 * sys.bases.frames)
        expect = sys.anchor + 2 * (sheet.vertices - sys.anchor)
        assert rel_err(out, expect) < 1e-10

    def test_factorize_once_matches_refactorizing(self, cylinder, rng):
        sys = poisson_prefactorize(cylinder)
        js = sys.bases.frames + 0.1 * rng.normal(size=(64, cylinder.n_faces, 3, 3))
        batch = sys.solve(js)
        for k in (0, 17, 63):
            fresh = poisson_prefactorize(cylinder).solve(js[k])
            np.testing.assert_array_equal(batch[k], fresh)

    def test_linearity(self, sheet, rng):
        sys = poisson_prefactorize(sheet)
        j1 = rng.normal(size=(sheet.n_faces, 3, 3))
        j2 = rng.normal(size=(sheet.n_faces, 3, 3))
        a, b = 0.7, -1.3
        lhs = sys.solve(a * j1 + b * j2)
        rhs = a * sys.solve(j1) + b * sys.solve(j2)
        rhs = aligned(sys, rhs)
        assert np.abs(lhs - rhs).max() < 1e-8

    def test_invariant_to_nullspace_field(self, rng):
        m = wavy_sheet(5)
        sys = poisson_prefactorize(m)
        op = sys.grad.matrix.T.toarray() * sys.grad.rho[None, :]
        ns = scipy.linalg.null_space(op)
        z = ns @ rng.normal(size=ns.shape[1])
        # rows are (face, local axis), columns of J are local axes
        dz = np.zeros((m.n_faces, 3, 3))
        dz[:, 0, :] = z.reshape(m.n_faces, 3)
        j = sys.bases.frames + 0.2 * rng.normal(size=(m.n_faces, 3, 3))
        np.testing.assert_allclose(sys.solve(j + dz), sys.solve(j), atol=1e-10)

    def test_rejects_non_finite(self, sheet):
        sys = poisson_prefactorize(sheet)
        j = sys.bases.frames.copy()
        j[3, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            sys.solve(j)

    def test_rejects_disconnected(self):
        a = icosphere(1)
        b = icosphere(1)
        v = np.vstack([a.vertices, b.vertices + 3])
        f = np.vstack([a.faces, b.faces + a.n_vertices])
        with pytest.raises(MeshError):
            poisson_prefactorize(TriMesh(v, f))

    def test_adjoint_is_transpose(self, sheet, rng):
        sys = poisson_prefactorize(sheet)
        j = rng.normal(size=(2, sheet.n_faces, 3, 3))
        g = rng.normal(size=(2, sheet.n_vertices, 3))
        # solve is affine; its linear part is solve(j) - solve(0)
        lin = sys.solve(j) - sys.solve(np.zeros_like(j))
        assert np.sum(lin * g) == pytest.approx(np.sum(j * sys.adjoint(g)), rel=1e-10)


class TestNormals:
    def test_flat_grid(self):
        m = grid(4, 4, jitter=0.2)
        vn, fn = vertex_and_face_normals(m)
        np.testing.assert_allclose(vn, np.tile([0, 0, 1.0], (m.n_vertices, 1)), atol=1e-12)
        np.testing.assert_allclose(fn, np.tile([0, 0, 1.0], (m.n_faces, 1)), atol=1e-12)

    def test_icosphere_radial(self, sphere):
        vn, _ = vertex_and_face_normals(sphere)
        radial = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
        ang = np.degrees(np.arccos(np.clip(np.sum(vn * radial, axis=1), -1, 1)))
        assert ang.max() < 2.0
        np.testing.assert_allclose(np.linalg.norm(vn, axis=1), 1.0)

    def test_flipped_winding(self, sphere):
        vn, fn = vertex_and_face_normals(sphere)
        flipped = TriMesh(sphere.vertices, sphere.faces[:, ::-1])
        vn2, fn2 = vertex_and_face_normals(flipped)
        np.testing.assert_allclose(vn2, -vn, atol=1e-12)
        np.testing.assert_allclose(fn2, -fn, atol=1e-12)
