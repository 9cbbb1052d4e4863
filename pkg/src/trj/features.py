"""Per-face descriptors: a learned point-feature network over face centroids
and normals, concatenated with precomputed Wave Kernel Signatures."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import TriMesh, build_local_bases, cotan_laplacian, vertex_masses
from .nn import MlpSpec, Params, init_mlp, mlp_forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureSpec:
    hidden: int = 64
    out_dim: int = 32
    global_pool: bool = False

    def mlp(self) -> MlpSpec:
        return MlpSpec((6, self.hidden, self.hidden, self.hidden, self.out_dim))


def init_feature_net(spec: FeatureSpec, rng: np.random.Generator, dtype=np.float32, zero_last: bool = False) -> Params:
    widths = list(spec.mlp().widths)
    params = init_mlp(MlpSpec(tuple(widths)), rng, dtype, zero_last=zero_last)
    if spec.global_pool:
        # layer 1 sees [local, max-pooled] hidden features
        fan_in = 2 * spec.hidden
        bound = np.sqrt(6.0 / fan_in)
        params["w1"] = Tensor(rng.uniform(-bound, bound, (fan_in, spec.hidden)).astype(dtype), requires_grad=True)
    return params


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the mean and divide by the bounding-sphere radius."""
    c = points - points.mean(axis=0)
    r = np.linalg.norm(c, axis=1).max()
    return c / (r if r > 0 else 1.0)


def face_inputs(mesh: TriMesh) -> np.ndarray:
    """(F, 6) network input: normalized centroids and unit normals of X_0."""
    b = build_local_bases(mesh)
    return np.concatenate([normalize_points(b.centroids), b.normals], axis=1)


def pointnet_features(spec: FeatureSpec, params: Params, centroids: np.ndarray, normals: np.ndarray) -> Tensor:
    """Per-face embedding (F, out_dim).

    Centroids must already be normalized (see ``normalize_points``). With
    ``spec.global_pool`` a max-pooled context of the first hidden layer is
    appended to every face before the remaining layers.
    """
    dtype = params["w0"].dtype
    x = Tensor(np.concatenate([centroids, normals], axis=1).astype(dtype))
    mlp = spec.mlp()
    if not spec.global_pool:
        return mlp_forward(mlp, params, x)
    h = ad.relu(ad.linear(x, params["w0"], params["b0"]))
    pooled = ad.broadcast_to(ad.amax(h, axis=0, keepdims=True), h.shape)
    h = ad.concat([h, pooled], axis=-1)
    for k in range(1, mlp.n_layers):
        h = ad.linear(h, params[f"w{k}"], params[f"b{k}"])
        if k < mlp.n_layers - 1:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------------------
# wave kernel signature


def laplace_beltrami_eigs(mesh: TriMesh, k: int, name: str = "mesh") -> tuple[np.ndarray, np.ndarray]:
    """First ``k`` eigenpairs of L phi = lambda M phi with lumped mass M.

    Eigenvectors are M-orthonormal. Dense solve; intended for meshes of a few
    thousand vertices.
    """
    lap, _ = cotan_laplacian(mesh)
    m = vertex_masses(mesh)
    s = 1.0 / np.sqrt(m)
    a = (lap.toarray() * s[:, None]) * s[None, :]
    try:
        evals, evecs = scipy.linalg.eigh(a, subset_by_index=[0, k - 1])
    except (np.linalg.LinAlgError, ValueError) as err:
        raise RuntimeError(f"eigensolver failed on {name}: {err}") from err
    return np.maximum(evals, 0.0), evecs * s[:, None]


def wks_vertices(evals: np.ndarray, evecs: np.ndarray, n_bins: int = 16, variance: float = 7.0) -> np.ndarray:
    """Vertex WKS (N, n_bins) from eigenpairs; the constant mode is skipped.

    Log-energies span [log lambda_2, log lambda_K]; each bin is divided by
    its partition sum so sum_x m_x WKS(x, e) = 1.
    """
    lam = evals[1:]
    phi2 = evecs[:, 1:] ** 2
    log_l = np.log(np.maximum(lam, 1e-12))
    e = np.linspace(log_l[0], log_l[-1], n_bins)
    sigma = variance * (log_l[-1] - log_l[0]) / n_bins
    if sigma <= 0:
        sigma = 1.0
    g = np.exp(-((e[:, None] - log_l[None, :]) ** 2) / (2 * sigma**2))  # (bins, K-1)
    return (phi2 @ g.T) / g.sum(axis=1)[None, :]


def wave_kernel_signature(
    mesh: TriMesh, k_eigen: int | None = None, k_wks: int = 16, name: str = "mesh"
) -> np.ndarray:
    """Face WKS (F, k_wks): vertex signatures averaged over each triangle."""
    n = mesh.n_vertices
    k = min(64, n - 2) if k_eigen is None else k_eigen
    if not 2 <= k <= n - 2:
        raise ValueError(f"k_eigen must lie in [2, {n - 2}], got {k}")
    evals, evecs = laplace_beltrami_eigs(mesh, k, name)
    return wks_vertices(evals, evecs, k_wks)[mesh.faces].mean(axis=1)


def cached_wks(mesh: TriMesh, cache_dir: str | Path | None, k_wks: int = 16) -> np.ndarray:
    """WKS with an on-disk cache keyed by the mesh content hash."""
    if cache_dir is None:
        return wave_kernel_signature(mesh, k_wks=k_wks)
    from .data.formats import read_chunks, write_chunks

    path = Path(cache_dir) / f"wks_{mesh.content_hash()[:32]}_{k_wks}.trj"
    if path.exists():
        return read_chunks(path)["wks"]
    wks = wave_kernel_signature(mesh, k_wks=k_wks)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_chunks(path, {"wks": wks})
    return wks


def assemble_face_features(learned: Tensor, wks: np.ndarray) -> Tensor:
    """Concatenate [learned | wks] per face."""
    learned = ad.as_tensor(learned)
    if learned.shape[0] != wks.shape[0]:
        raise ValueError(f"face count mismatch: learned {learned.shape[0]} vs WKS {wks.shape[0]}")
    return ad.concat([learned, Tensor(np.asarray(wks, dtype=learned.dtype))], axis=1)
