"""VertexODE baseline: an MLP predicts per-vertex velocities that are
integrated with explicit Euler steps. No Jacobians and no Poisson solve."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import vertex_and_face_normals
from .nn import MlpSpec, Params, init_mlp, mlp_forward, positional_encoding


@dataclass(frozen=True)
class VertexOdeConfig:
    n_joints: int
    window: int = 32
    hidden: int = 128
    beta_dim: int = 16
    pe_bands: int = 4

    def mlp(self) -> MlpSpec:
        """Input: [x0 (3) | n0 (3) | x - x0 (3) | M_t | beta | PE(t)]."""
        h = self.hidden
        return MlpSpec((9 + 3 * self.n_joints + self.beta_dim + 2 * self.pe_bands, h, h, h, 3))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class VertexOde:
    config: VertexOdeConfig
    params: Params

    def flat_params(self) -> Params:
        return {f"vode.{k}": v for k, v in self.params.items()}


def init_vertex_ode(config: VertexOdeConfig, seed: int = 0, dtype=np.float32) -> VertexOde:
    return VertexOde(config, init_mlp(config.mlp(), np.random.default_rng(seed), dtype, zero_last=True))


def vertex_ode_window(
    model: VertexOde, rest: np.ndarray, normals: np.ndarray, beta: np.ndarray, angles: np.ndarray,
    start: int, stop: int, h: float, state: Tensor | None,
) -> Tensor:
    """Positions for frames [start, stop): X_0 = rest, X_k = X_{k-1} + h v(X_{k-1}, t_{k-1}).

    ``state`` is X_{start-1} (None for the first window).
    """
    cfg = model.config
    dtype = model.params["w0"].dtype
    n = len(rest)
    static = np.concatenate([rest, normals], axis=1).astype(dtype)
    frames = []
    if start == 0:
        x = Tensor(rest)
        frames.append(x)
    else:
        x = state
    for k in range(max(start, 1), stop):
        t = (k - 1) * h
        cond = np.concatenate([angles[k - 1], beta, positional_encoding(t, cfg.pe_bands)]).astype(dtype)
        inp = ad.concat(
            [Tensor(static), ad.cast(ad.sub(x, Tensor(rest)), dtype), Tensor(np.broadcast_to(cond, (n, cond.size)))], axis=1
        )
        v = ad.cast(mlp_forward(cfg.mlp(), model.params, inp), np.float64)
        x = ad.add(x, ad.mul(v, h))
        frames.append(x)
    return ad.stack(frames, axis=0)


def rest_normals(mesh) -> np.ndarray:
    return vertex_and_face_normals(mesh)[0]
