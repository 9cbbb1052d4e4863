"""Sequence model: per-frame posing in Jacobian space, window attention
encodings, Euler-integrated residual Jacobians and the Poisson solve.

Networks run in float32. Jacobian composition, the Poisson solve and the
losses run in float64; ``ad.cast`` bridges the two.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data.preprocess import apply_global_transform  # noqa: F401  (re-exported)
from .features import FeatureSpec, assemble_face_features, cached_wks, face_inputs, init_feature_net, pointnet_features
from .mesh import JacobianField, LocalBasis, PoissonSystem, TriMesh, compute_jacobians, poisson_prefactorize
from .nn import AttentionSpec, MlpSpec, Params, init_attention, init_mlp, multihead_attention, positional_encoding

VARIANTS = ("trj", "njf_mt")


@dataclass(frozen=True)
class ModelConfig:
    n_joints: int
    window: int = 32
    hidden_pose: int = 128
    hidden_res: int = 128
    feat_hidden: int = 64
    feat_dim: int = 32
    wks_dim: int = 16
    beta_dim: int = 16
    pe_bands: int = 4
    att_dim: int = 32
    heads: int = 2
    global_pool: bool = False
    variant: str = "trj"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.window < 1:
            raise ValueError("window must be at least one frame")

    @property
    def pe_dim(self) -> int:
        return 2 * self.pe_bands

    @property
    def face_dim(self) -> int:
        return self.feat_dim + self.wks_dim

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self.feat_hidden, self.feat_dim, self.global_pool)

    def pose_spec(self) -> MlpSpec:
        """Input rows: [J0 (9) | C | M_t (3 per joint)]."""
        h = self.hidden_pose
        return MlpSpec((9 + 3 * self.n_joints + self.face_dim, h, h, h, 9))

    def res_spec(self) -> MlpSpec:
        """Input rows: [J0 (9) | E^P | E^R | beta | PE(t)]."""
        h = self.hidden_res
        return MlpSpec((9 + 2 * self.att_dim + self.beta_dim + self.pe_dim, h, h, 9))

    def attention_spec(self) -> AttentionSpec:
        return AttentionSpec(9, self.pe_dim, self.heads, self.att_dim, self.att_dim, self.att_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Model:
    config: ModelConfig
    params: dict[str, Params]

    def flat_params(self) -> Params:
        return {f"{g}.{k}": v for g, group in self.params.items() for k, v in group.items()}

    def zero_grad(self) -> None:
        for p in self.flat_params().values():
            p.grad = None


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Final layers of f_P and f_R start at zero, so the untrained model
    reproduces the rest shape at every frame."""
    rng = np.random.default_rng(seed)
    params = {
        "feat": init_feature_net(config.feature_spec(), rng, dtype),
        "pose": init_mlp(config.pose_spec(), rng, dtype, zero_last=True),
    }
    if config.variant == "trj":
        params["res"] = init_mlp(config.res_spec(), rng, dtype, zero_last=True)
        params["att_p"] = init_attention(config.attention_spec(), rng, dtype)
        params["att_r"] = init_attention(config.attention_spec(), rng, dtype)
    return Model(config, params)


# ---------------------------------------------------------------------------
# per-shape precomputation


@dataclass(eq=False)
class ShapeContext:
    """Everything derived from the rest mesh X_0 and its signature beta."""

    mesh: TriMesh
    bases: LocalBasis
    system: PoissonSystem
    j0: np.ndarray  # (F, 3, 3) rest Jacobians in local frames
    face_in: np.ndarray  # (F, 6) feature-net input
    wks: np.ndarray  # (F, k)
    beta: np.ndarray

    @property
    def n_faces(self) -> int:
        return self.mesh.n_faces


def prepare_shape(mesh: TriMesh, beta, wks_dim: int = 16, cache_dir=None, beta_dim: int = 16) -> ShapeContext:
    system = poisson_prefactorize(mesh)
    bases = system.bases
    j0 = compute_jacobians(mesh, bases, mesh.vertices, system.grad).matrices
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if beta.size != beta_dim:
        raise ValueError(f"beta has {beta.size} entries, model expects {beta_dim}")
    return ShapeContext(mesh, bases, system, j0, face_inputs(mesh), cached_wks(mesh, cache_dir, wks_dim), beta)


def time_grid(n_frames: int) -> tuple[np.ndarray, float]:
    """Normalized frame times in [0, 1] and the Euler step between frames."""
    if n_frames < 1:
        raise ValueError("sequence needs at least one frame")
    if n_frames == 1:
        return np.zeros(1), 1.0
    h = 1.0 / (n_frames - 1)
    return np.arange(n_frames) * h, h


def window_bounds(n_frames: int, window: int) -> list[tuple[int, int]]:
    return [(s, min(s + window, n_frames)) for s in range(0, n_frames, window)]


# ---------------------------------------------------------------------------
# components


def face_features(model: Model, ctx: ShapeContext) -> Tensor:
    """Per-face descriptor C: learned point features with the WKS appended."""
    spec = model.config.feature_spec()
    learned = pointnet_features(spec, model.params["feat"], ctx.face_in[:, :3], ctx.face_in[:, 3:])
    return assemble_face_features(learned, ctx.wks)


def _split_first_layer(params: Params, x_face: Tensor, x_frame: Tensor, n_face: int) -> Tensor:
    """First affine layer over [face inputs | frame inputs] without
    materializing the (frames, faces, width) input."""
    w0 = params["w0"]
    hf = ad.matmul(x_face, w0[:n_face])  # (F, H)
    ht = ad.linear(x_frame, w0[n_face:], params["b0"])  # (T, H)
    return ad.relu(ad.add(ad.reshape(ht, (ht.shape[0], 1, ht.shape[1])), hf))


def _mlp_tail(spec: MlpSpec, params: Params, h: Tensor) -> Tensor:
    for k in range(1, spec.n_layers):
        h = ad.linear(h, params[f"w{k}"], params[f"b{k}"])
        if k < spec.n_layers - 1:
            h = ad.relu(h)
    return h


def posing_forward(model: Model, j0: np.ndarray, angles: np.ndarray, c: Tensor) -> Tensor:
    """J^P_t = J0 + f_P(J0, M_t, C) for every frame: (T, F, 3, 3) float64."""
    cfg = model.config
    params = model.params["pose"]
    angles = np.atleast_2d(np.asarray(angles))
    f = j0.shape[0]
    if c.shape[0] != f:
        raise ValueError(f"face features cover {c.shape[0]} faces, mesh has {f}")
    if angles.shape[1] != 3 * cfg.n_joints:
        raise ValueError(f"pose vector width {angles.shape[1]} does not match {cfg.n_joints} joints")
    dtype = params["w0"].dtype
    x_face = ad.concat([Tensor(j0.reshape(f, 9).astype(dtype)), ad.cast(c, dtype)], axis=1)
    spec = cfg.pose_spec()
    h = _split_first_layer(params, x_face, Tensor(angles.astype(dtype)), 9 + cfg.face_dim)
    delta = _mlp_tail(spec, params, h)  # (T, F, 9)
    delta = ad.reshape(ad.cast(delta, np.float64), (angles.shape[0], f, 3, 3))
    return ad.add(delta, Tensor(j0))


def encode_window(model: Model, which: str, jac: Tensor | None, times: np.ndarray | None) -> Tensor:
    """Attention summary (F, att_dim) of a window of per-face Jacobians.

    ``which`` is "att_p" or "att_r". ``jac`` is (T, F, 3, 3); passing None
    encodes the first window's empty residual history as a single zero token
    with a zero time encoding, for ``n_faces`` taken from ``times`` (an int).
    """
    cfg = model.config
    params = model.params[which]
    spec = cfg.attention_spec()
    dtype = params["wq"].dtype
    if jac is None:
        n_faces = int(times)
        tokens = Tensor(np.zeros((n_faces, 1, 9), dtype=dtype))
        enc = np.zeros((1, cfg.pe_dim))
    else:
        t, f = jac.shape[:2]
        if t < 1:
            raise ValueError("cannot encode an empty window")
        tokens = ad.transpose(ad.reshape(ad.cast(jac, dtype), (t, f, 9)), (1, 0, 2))
        enc = positional_encoding(times, cfg.pe_bands)
    return multihead_attention(spec, params, tokens, enc)


def residual_derivative(model: Model, j0: np.ndarray, e_p: Tensor, e_r: Tensor, beta: np.ndarray, t) -> Tensor:
    """dJ^R/dt at normalized times ``t`` (K,): (K, F, 3, 3) float64."""
    cfg = model.config
    params = model.params["res"]
    dtype = params["w0"].dtype
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    f = j0.shape[0]
    if e_p.shape != (f, cfg.att_dim) or e_r.shape != (f, cfg.att_dim):
        raise ValueError(f"encodings {e_p.shape}, {e_r.shape} do not match ({f}, {cfg.att_dim})")
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (cfg.beta_dim,):
        raise ValueError(f"beta of shape {beta.shape}, expected ({cfg.beta_dim},)")
    x_face = ad.concat([Tensor(j0.reshape(f, 9).astype(dtype)), e_p, e_r], axis=1)
    x_time = np.concatenate([np.broadcast_to(beta, (t.size, cfg.beta_dim)), positional_encoding(t, cfg.pe_bands)], axis=1)
    h = _split_first_layer(params, x_face, Tensor(x_time.astype(dtype)), 9 + 2 * cfg.att_dim)
    rate = _mlp_tail(cfg.res_spec(), params, h)
    return ad.reshape(ad.cast(rate, np.float64), (t.size, f, 3, 3))


def euler_integrate_window(rate_fn, start: int, stop: int, h: float, carry) -> Tensor:
    """Residuals J^R_k for frames k in [start, stop).

    J^R_0 = 0 and J^R_k = J^R_{k-1} + h f(t_{k-1}); ``carry`` is J^R_{start-1}
    (ignored, and required to be zero, when start == 0). ``rate_fn`` maps an
    array of times (K,) to rates (K, F, 3, 3).
    """
    if not 0 <= start < stop:
        raise ValueError(f"bad window [{start}, {stop})")
    carry = ad.as_tensor(carry)
    first = max(start, 1)
    pieces = []
    if start == 0:
        if np.any(carry.data):
            raise ValueError("the residual at frame 0 must be zero")
        pieces.append(ad.reshape(ad.mul(carry, 0.0), (1,) + carry.shape))
    if stop > first:
        taus = (np.arange(first, stop) - 1) * h
        rates = rate_fn(taus)
        bad = np.flatnonzero(~np.isfinite(rates.data).reshape(len(taus), -1).all(axis=1))
        if bad.size:
            raise FloatingPointError(f"non-finite residual rate at frame {first + bad[0]}")
        steps = ad.cumsum(ad.mul(rates, h), axis=0)
        pieces.append(ad.add(steps, ad.reshape(carry, (1,) + carry.shape)))
    return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)


def compose_jacobians(posed: Tensor, residual: Tensor | None) -> Tensor:
    if residual is None:
        return posed
    if posed.shape != residual.shape:
        raise ValueError(f"posed {posed.shape} and residual {residual.shape} Jacobians differ in shape")
    return ad.add(posed, residual)


def poisson_op(system: PoissonSystem, jac: Tensor) -> Tensor:
    """Differentiable Poisson solve of local-frame Jacobians (..., F, 3, 3)."""
    if isinstance(jac, JacobianField):
        jac = Tensor(jac.to_local(system.bases).matrices)
    return ad.linear_map(jac, system.solve, system.adjoint)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(eq=False)
class WindowOutput:
    positions: Tensor  # (T_w, N, 3)
    jacobians: Tensor  # (T_w, F, 3, 3) composed, local frames
    posed: Tensor
    residual: Tensor | None


@dataclass(eq=False)
class SequenceOutput:
    positions: np.ndarray
    jacobians: np.ndarray
    posed: np.ndarray
    residual: np.ndarray | None
    windows: list = field(default_factory=list)


def window_forward(
    model: Model,
    ctx: ShapeContext,
    angles: np.ndarray,
    start: int,
    stop: int,
    carry: Tensor | np.ndarray | None = None,
    history: Tensor | None = None,
    history_times: np.ndarray | None = None,
    c: Tensor | None = None,
) -> WindowOutput:
    """Forward pass over frames [start, stop) of a sequence of ``len(angles)`` frames.

    ``carry`` is the last residual of the previous window and ``history`` /
    ``history_times`` its residual block; both are None for the first window.
    """
    n = len(angles)
    times, h = time_grid(n)
    if c is None:
        c = face_features(model, ctx)
    posed = posing_forward(model, ctx.j0, angles[start:stop], c)
    if model.config.variant == "njf_mt":
        jac = posed
        residual = None
    else:
        e_p = encode_window(model, "att_p", posed, times[start:stop])
        if history is None:
            e_r = encode_window(model, "att_r", None, ctx.n_faces)
        else:
            e_r = encode_window(model, "att_r", history, history_times)
        if carry is None:
            carry = np.zeros((ctx.n_faces, 3, 3))
        residual = euler_integrate_window(
            lambda taus: residual_derivative(model, ctx.j0, e_p, e_r, ctx.beta, taus), start, stop, h, carry
        )
        jac = compose_jacobians(posed, residual)
    return WindowOutput(poisson_op(ctx.system, jac), jac, posed, residual)


def iterate_windows(model: Model, ctx: ShapeContext, angles: np.ndarray, keep_graph: bool = False):
    """Yield (start, stop, WindowOutput) across the sequence, carrying the
    residual state between windows. Unless ``keep_graph`` is set, the carry
    is detached so each window's graph stands alone."""
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    times, _ = time_grid(len(angles))
    carry = history = history_times = None
    c = face_features(model, ctx) if keep_graph else None
    for start, stop in window_bounds(len(angles), model.config.window):
        out = window_forward(model, ctx, angles, start, stop, carry, history, history_times, c)
        yield start, stop, out
        if out.residual is not None:
            res = out.residual if keep_graph else out.residual.detach()
            carry = res[-1]
            history, history_times = res, times[start:stop]


def sequence_forward(model: Model, ctx: ShapeContext, angles: np.ndarray) -> SequenceOutput:
    """Predicted canonical positions (T, N, 3) for a joint-angle track."""
    pos, jac, posed, res = [], [], [], []
    for _, _, out in iterate_windows(model, ctx, angles):
        pos.append(out.positions.data)
        jac.append(out.jacobians.data)
        posed.append(out.posed.data)
        if out.residual is not None:
            res.append(out.residual.data)
    return SequenceOutput(
        np.concatenate(pos), np.concatenate(jac), np.concatenate(posed), np.concatenate(res) if res else None
    )


def sequence_graph(model: Model, ctx: ShapeContext, angles: np.ndarray) -> tuple[Tensor, Tensor]:
    """Positions and Jacobians for the whole sequence as one differentiable graph."""
    outs = [o for _, _, o in iterate_windows(model, ctx, angles, keep_graph=True)]
    return ad.concat([o.positions for o in outs], axis=0), ad.concat([o.jacobians for o in outs], axis=0)
