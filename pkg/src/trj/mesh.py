"""Triangle-mesh kernel: local frames, intrinsic gradients, cotangent Laplacian,
per-face Jacobians and the prefactorized Poisson integration.

All geometry here runs in float64. Jacobians are stored as 3x3 matrices whose
rows are world coordinates and whose columns are the axes of the face's local
frame (two tangents, then the normal). The first two columns are the in-plane
derivatives of the deformation; the third column carries the deformed unit
normal so that the identity deformation is a rotation in the local frame.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
COT_CLAMP = 1e8

LOCAL = "local"
WORLD = "world"


class MeshError(ValueError):
    """Invalid mesh input. ``face`` holds the offending face index when known."""

    def __init__(self, message: str, face: int | None = None):
        super().__init__(message)
        self.face = face


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertex positions (N, 3) and counter-clockwise triangles (F, 3)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if f.size:
            bad = np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))
            if bad.size:
                raise MeshError(f"face {bad[0]} references a vertex outside [0, {len(v)})", int(bad[0]))
            rep = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
            if rep.size:
                raise MeshError(f"face {rep[0]} repeats a vertex", int(rep[0]))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.faces.astype("<i8").tobytes())
        return h.hexdigest()


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = vertices[..., faces, :]
    cr = np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :])
    return 0.5 * np.linalg.norm(cr, axis=-1)


def check_faces(mesh: TriMesh, positions: np.ndarray | None = None) -> np.ndarray:
    """Return face areas, raising MeshError on the first degenerate face."""
    v = mesh.vertices if positions is None else positions
    areas = face_areas(v, mesh.faces)
    bad = np.flatnonzero(~(areas > MIN_FACE_AREA))
    if bad.size:
        raise MeshError(f"face {bad[0]} is degenerate (area {areas[bad[0]]:.3g})", int(bad[0]))
    return areas


def edge_face_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges (E, 2) and the number of faces using each."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


def check_manifold(mesh: TriMesh) -> None:
    """Raise MeshError unless every edge is shared by at most two faces and
    every face has positive area."""
    check_faces(mesh)
    edges, counts = edge_face_counts(mesh.faces)
    bad = np.flatnonzero(counts > 2)
    if bad.size:
        a, b = edges[bad[0]]
        raise MeshError(f"edge ({a}, {b}) is shared by {counts[bad[0]]} faces (non-manifold)")


def is_closed(mesh: TriMesh) -> bool:
    _, counts = edge_face_counts(mesh.faces)
    return bool(np.all(counts == 2))


def vertex_adjacency(mesh: TriMesh) -> sp.csr_matrix:
    f = mesh.faces
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    n = mesh.n_vertices
    a = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    return ((a + a.T) > 0).astype(np.float64)


def n_components(mesh: TriMesh) -> int:
    count, _ = csgraph.connected_components(vertex_adjacency(mesh), directed=False)
    return int(count)


# ---------------------------------------------------------------------------
# local frames and gradients


@dataclass(frozen=True, eq=False)
class LocalBasis:
    """Per-face orthonormal frames; columns are tangent, bitangent, normal."""

    frames: np.ndarray  # (F, 3, 3)
    centroids: np.ndarray  # (F, 3)

    @property
    def normals(self) -> np.ndarray:
        return self.frames[:, :, 2]


def build_local_bases(mesh: TriMesh) -> LocalBasis:
    """Build a right-handed frame at each face centroid.

    The first tangent follows the first edge (v0 -> v1), the third axis is the
    unit normal and the second completes the frame.

    Raises
    ------
    MeshError
        If a face is degenerate; ``err.face`` is its index.
    """
    check_faces(mesh)
    p = mesh.vertices[mesh.faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    t1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    frames = np.stack([t1, t2, n], axis=2)
    return LocalBasis(frames=frames, centroids=p.mean(axis=1))


@dataclass(frozen=True, eq=False)
class GradientOperator:
    """Per-face gradient blocks and their sparse assembly.

    ``blocks[i]`` maps the three vertex values of face i to the gradient in the
    face's local frame; its third (normal) row is zero. ``matrix`` is the
    assembled (3F, N) operator with rows ordered (face, local axis). ``areas``
    are the per-face weights of the mass matrix rho.
    """

    blocks: np.ndarray  # (F, 3, 3)
    matrix: sp.csr_matrix  # (3F, N)
    areas: np.ndarray  # (F,)
    faces: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        """Diagonal of the (3F, 3F) mass matrix."""
        return np.repeat(self.areas, 3)

    def laplacian(self) -> sp.csr_matrix:
        g = self.matrix
        return (g.T @ sp.diags(self.rho) @ g).tocsr()

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Per-face local gradients of vertex data: (N, C) -> (F, 3, C)."""
        return np.einsum("fav,fvc->fac", self.blocks, values[self.faces])


def face_gradient_operator(mesh: TriMesh, bases: LocalBasis | None = None) -> GradientOperator:
    """Piecewise-linear gradient operator expressed in each face's local frame."""
    areas = check_faces(mesh)
    if bases is None:
        bases = build_local_bases(mesh)
    p = mesh.vertices[mesh.faces]
    t = bases.frames[:, :, :2]  # (F, 3, 2)
    d = np.einsum("fek,fkc->fec", p[:, 1:] - p[:, :1], t)  # rows: edge, cols: local axis
    sel = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    inplane = np.linalg.solve(d, np.broadcast_to(sel, (len(d), 2, 3)))
    blocks = np.zeros((len(d), 3, 3))
    blocks[:, :2] = inplane
    nf = mesh.n_faces
    rows = np.repeat(np.arange(3 * nf).reshape(nf, 3), 3, axis=1).reshape(nf, 3, 3)
    cols = np.broadcast_to(mesh.faces[:, None, :], (nf, 3, 3))
    mat = sp.coo_matrix(
        (blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * nf, mesh.n_vertices)
    ).tocsr()
    mat.eliminate_zeros()
    return GradientOperator(blocks=blocks, matrix=mat, areas=areas, faces=mesh.faces)


def cotan_laplacian(mesh: TriMesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Classic cotangent-weight Laplacian and the per-face areas (rho).

    Off-diagonal entries are -(cot a + cot b) / 2 for the two angles opposite
    each edge. Cotangents beyond +-1e8 are clamped with a warning.
    """
    areas = check_faces(mesh)
    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    ii, jj, ww = [], [], []
    for k in range(3):
        a, b, c = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        u = v[b] - v[a]
        w = v[c] - v[a]
        cot = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        if np.any(np.abs(cot) > COT_CLAMP):
            warnings.warn(
                f"{int(np.sum(np.abs(cot) > COT_CLAMP))} near-degenerate angles; cotangent weights clamped",
                RuntimeWarning,
                stacklevel=2,
            )
            cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        ii += [b, c]
        jj += [c, b]
        ww += [-0.5 * cot, -0.5 * cot]
    ii = np.concatenate(ii)
    jj = np.concatenate(jj)
    ww = np.concatenate(ww)
    off = sp.coo_matrix((ww, (ii, jj)), shape=(n, n)).tocsr()
    lap = off - sp.diags(np.asarray(off.sum(axis=1)).ravel())
    return lap.tocsr(), areas


def vertex_masses(mesh: TriMesh) -> np.ndarray:
    """Lumped (barycentric) vertex areas."""
    areas = face_areas(mesh.vertices, mesh.faces)
    m = np.zeros(mesh.n_vertices)
    np.add.at(m, mesh.faces.ravel(), np.repeat(areas / 3.0, 3))
    return m


# ---------------------------------------------------------------------------
# Jacobian fields


@dataclass(frozen=True, eq=False)
class JacobianField:
    """Stack of per-face 3x3 Jacobians, shape (..., F, 3, 3)."""

    matrices: np.ndarray
    basis: str = LOCAL

    def __post_init__(self):
        m = np.asarray(self.matrices)
        if m.ndim < 3 or m.shape[-2:] != (3, 3):
            raise ValueError(f"Jacobian field must have shape (..., F, 3, 3), got {m.shape}")
        if self.basis not in (LOCAL, WORLD):
            raise ValueError(f"unknown basis tag {self.basis!r}")
        object.__setattr__(self, "matrices", m)

    @property
    def n_faces(self) -> int:
        return self.matrices.shape[-3]

    def to_world(self, bases: LocalBasis) -> "JacobianField":
        if self.basis == WORLD:
            return self
        return JacobianField(self.matrices @ np.swapaxes(bases.frames, -1, -2), WORLD)

    def to_local(self, bases: LocalBasis) -> "JacobianField":
        if self.basis == LOCAL:
            return self
        return JacobianField(self.matrices @ bases.frames, LOCAL)


def compute_jacobians(
    reference: TriMesh,
    bases: LocalBasis,
    deformed_positions: np.ndarray,
    grad: GradientOperator | None = None,
) -> JacobianField:
    """Jacobians of the map reference -> deformed in the reference's local frames.

    ``deformed_positions`` is (N, 3) or a stack (T, N, 3); the result has
    matching leading dimensions.
    """
    x = np.asarray(deformed_positions, dtype=np.float64)
    if x.shape[-2:] != (reference.n_vertices, 3):
        raise ValueError(
            f"deformed positions have shape {x.shape}, expected (..., {reference.n_vertices}, 3)"
        )
    if grad is None:
        grad = face_gradient_operator(reference, bases)
    pf = x[..., reference.faces, :]  # (..., F, 3 verts, 3 world)
    jac = np.einsum("...fvc,fav->...fca", pf, grad.blocks)
    cr = np.cross(pf[..., 1, :] - pf[..., 0, :], pf[..., 2, :] - pf[..., 0, :])
    norm = np.linalg.norm(cr, axis=-1, keepdims=True)
    jac[..., 2] = cr / np.where(norm > 0, norm, 1.0)
    return JacobianField(jac, LOCAL)


# ---------------------------------------------------------------------------
# Poisson integration


@dataclass(eq=False)
class PoissonSystem:
    """Prefactorized least-squares integration of Jacobian fields.

    The translation nullspace of L is removed by the constraint that the
    mass-weighted centroid equals ``anchor`` (the centroid of X_0). The
    augmented saddle-point matrix is LU-factorized once.
    """

    grad: GradientOperator
    bases: LocalBasis
    masses: np.ndarray
    anchor: np.ndarray
    _lu: object = field(repr=False)
    _grad_rho_t: sp.csr_matrix = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.masses)

    @property
    def n_faces(self) -> int:
        return len(self.grad.areas)

    def _resolve(self, jac) -> np.ndarray:
        if isinstance(jac, JacobianField):
            jac = jac.to_local(self.bases).matrices
        jac = np.asarray(jac, dtype=np.float64)
        if jac.shape[-3:] != (self.n_faces, 3, 3):
            raise ValueError(f"Jacobian field shape {jac.shape} does not match {self.n_faces} faces")
        if not np.all(np.isfinite(jac)):
            raise ValueError("Jacobian field has non-finite entries")
        return jac

    def solve(self, jac) -> np.ndarray:
        """Vertex positions (..., N, 3) for a local-frame Jacobian stack (..., F, 3, 3)."""
        j = self._resolve(jac)
        lead = j.shape[:-3]
        j = j.reshape((-1,) + j.shape[-3:])
        b, f = j.shape[0], self.n_faces
        target = np.transpose(j, (1, 3, 0, 2)).reshape(3 * f, 3 * b)
        rhs = np.empty((self.n_vertices + 1, 3 * b))
        rhs[:-1] = self._grad_rho_t @ target
        rhs[-1] = np.tile(self.masses.sum() * self.anchor, b)
        sol = self._lu.solve(rhs)[:-1]
        x = np.transpose(sol.reshape(self.n_vertices, b, 3), (1, 0, 2))
        return x.reshape(lead + (self.n_vertices, 3))

    def adjoint(self, grad_positions: np.ndarray) -> np.ndarray:
        """Pull a gradient w.r.t. solved positions back onto the Jacobians."""
        g = np.asarray(grad_positions, dtype=np.float64)
        lead = g.shape[:-2]
        g = g.reshape((-1, self.n_vertices, 3))
        b, f = g.shape[0], self.n_faces
        rhs = np.zeros((self.n_vertices + 1, 3 * b))
        rhs[:-1] = np.transpose(g, (1, 0, 2)).reshape(self.n_vertices, 3 * b)
        y = self._lu.solve(rhs)[:-1]
        gt = self.grad.rho[:, None] * (self.grad.matrix @ y)
        gj = gt.reshape(f, 3, b, 3).transpose(2, 0, 3, 1)
        return gj.reshape(lead + (f, 3, 3))

    def centroid(self, positions: np.ndarray) -> np.ndarray:
        return np.einsum("n,...nc->...c", self.masses, positions) / self.masses.sum()


def poisson_prefactorize(mesh: TriMesh, bases: LocalBasis | None = None) -> PoissonSystem:
    """Factorize the centroid-pinned Laplacian of ``mesh`` (the rest shape X_0)."""
    check_manifold(mesh)
    if n_components(mesh) != 1:
        raise MeshError("mesh has several connected components; pinned Laplacian would be singular")
    if bases is None:
        bases = build_local_bases(mesh)
    grad = face_gradient_operator(mesh, bases)
    lap = grad.laplacian()
    m = vertex_masses(mesh)
    n = mesh.n_vertices
    col = sp.csr_matrix(m.reshape(n, 1))
    aug = sp.bmat([[lap, col], [col.T, None]], format="csc")
    try:
        lu = spla.splu(aug)
    except RuntimeError as err:
        raise MeshError(f"pinned Laplacian is singular: {err}") from err
    anchor = m @ mesh.vertices / m.sum()
    rho_t = (grad.matrix.T @ sp.diags(grad.rho)).tocsr()
    return PoissonSystem(grad=grad, bases=bases, masses=m, anchor=anchor, _lu=lu, _grad_rho_t=rho_t)


def poisson_solve(system: PoissonSystem, jac) -> np.ndarray:
    return system.solve(jac)


# ---------------------------------------------------------------------------
# normals


def face_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = positions[..., faces, :]
    cr = np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :])
    norm = np.linalg.norm(cr, axis=-1, keepdims=True)
    return cr / np.where(norm > 0, norm, 1.0)


def vertex_and_face_normals(mesh: TriMesh, positions: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted unit vertex normals and unit face normals.

    Zero-area faces carry no weight; an isolated vertex gets a zero normal.
    """
    x = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    p = x[mesh.faces]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])  # length = 2 * area
    vn = np.zeros_like(x)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], cr)
    vnorm = np.linalg.norm(vn, axis=1, keepdims=True)
    vn = vn / np.where(vnorm > 0, vnorm, 1.0)
    return vn, face_normals(x, mesh.faces)
