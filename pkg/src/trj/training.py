"""Losses, the training loop, evaluation metrics and the three methods
compared in the ablation (TRJ, per-frame NJF conditioned on M_t, VertexODE)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baselines import VertexOde, VertexOdeConfig, init_vertex_ode, rest_normals, vertex_ode_window
from .data.formats import append_log, load_checkpoint, save_checkpoint
from .data.preprocess import CanonicalSequence
from .mesh import compute_jacobians, face_normals
from .model import Model, ModelConfig, ShapeContext, init_model, prepare_shape, time_grid, window_bounds, window_forward
from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)

ALPHA = 0.05
CONVERGENCE = 3e-4
MAX_EPOCHS = 300
METHODS = ("trj", "njf_mt", "vertex_ode")


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossReport:
    vertex: float
    jacobian: float
    alpha: float = ALPHA

    @property
    def total(self) -> float:
        return self.vertex + self.alpha * self.jacobian


def vertex_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean over frames and vertices of the squared Euclidean distance."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"predicted positions {pred.shape} vs gt {gt.shape}")
    d = ad.sub(pred, Tensor(gt))
    return ad.mul(ad.tsum(ad.mul(d, d)), 1.0 / (gt.size // 3))


def jacobian_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean over frames and faces of the squared Frobenius distance."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"predicted Jacobians {pred.shape} vs gt {gt.shape}")
    d = ad.sub(pred, Tensor(gt))
    return ad.mul(ad.tsum(ad.mul(d, d)), 1.0 / (gt.size // 9))


def compute_losses(pred_pos: Tensor, pred_jac: Tensor | None, gt_pos: np.ndarray, gt_jac: np.ndarray | None, alpha: float = ALPHA):
    """Returns (differentiable total, LossReport)."""
    lv = vertex_loss(pred_pos, gt_pos)
    if pred_jac is None:
        return lv, LossReport(float(lv.data), 0.0, alpha)
    lj = jacobian_loss(pred_jac, gt_jac)
    total = ad.add(lv, ad.mul(lj, alpha))
    return total, LossReport(float(lv.data), float(lj.data), alpha)


# ---------------------------------------------------------------------------
# training data


@dataclass(eq=False)
class TrainItem:
    name: str
    ctx: ShapeContext
    angles: np.ndarray
    frames: np.ndarray  # canonical gt (T, N, 3)
    jacobians: np.ndarray  # gt (T, F, 3, 3), local frames of X_0

    @property
    def n_frames(self) -> int:
        return len(self.angles)


def make_item(seq: CanonicalSequence, cache_dir=None) -> TrainItem:
    if seq.frames is None:
        raise ValueError(f"{seq.name}: sequence has no ground truth")
    ctx = prepare_shape(seq.rest, seq.manifest.beta, cache_dir=cache_dir)
    jac = compute_jacobians(seq.rest, ctx.bases, seq.frames, ctx.system.grad).matrices
    return TrainItem(seq.name, ctx, seq.manifest.angles, seq.frames, jac)


# ---------------------------------------------------------------------------
# methods


class Method:
    """Uniform interface over TRJ, NJF(M_t) and VertexODE for training,
    inference and checkpointing."""

    kind: str
    uses_jacobians: bool = True

    def flat_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def window(self, item: TrainItem, start: int, stop: int, state, detach: bool = True):
        """(positions, jacobians or None, next state) for frames [start, stop).

        With ``detach`` the returned state is cut from the graph; otherwise
        gradients of later windows flow back through it."""
        raise NotImplementedError

    def config_dict(self) -> dict:
        raise NotImplementedError

    def predict(self, ctx: ShapeContext, angles: np.ndarray) -> np.ndarray:
        item = TrainItem("predict", ctx, np.atleast_2d(angles), None, None)
        out, state = [], None
        for start, stop in window_bounds(item.n_frames, self.window_size):
            pos, _, state = self.window(item, start, stop, state)
            out.append(pos.data)
        return np.concatenate(out)

    @property
    def window_size(self) -> int:
        return self.config.window


class JacobianMethod(Method):
    def __init__(self, model: Model):
        self.model = model
        self.config = model.config
        self.kind = model.config.variant

    def flat_params(self):
        return self.model.flat_params()

    def window(self, item, start, stop, state, detach=True):
        carry, history, history_times = state if state is not None else (None, None, None)
        out = window_forward(self.model, item.ctx, item.angles, start, stop, carry, history, history_times)
        nxt = None
        if out.residual is not None:
            res = out.residual.detach() if detach else out.residual
            times, _ = time_grid(item.n_frames)
            nxt = (res[-1], res, times[start:stop])
        return out.positions, out.jacobians, nxt

    def config_dict(self):
        return {"method": self.kind, "model": self.config.to_dict()}


class VertexOdeMethod(Method):
    kind = "vertex_ode"
    uses_jacobians = False

    def __init__(self, model: VertexOde):
        self.model = model
        self.config = model.config
        self._normals: dict[int, np.ndarray] = {}

    def flat_params(self):
        return self.model.flat_params()

    def window(self, item, start, stop, state, detach=True):
        key = id(item.ctx)
        if key not in self._normals:
            self._normals = {key: rest_normals(item.ctx.mesh)}
        _, h = time_grid(item.n_frames)
        pos = vertex_ode_window(
            self.model, item.ctx.mesh.vertices, self._normals[key], item.ctx.beta, item.angles, start, stop, h, state
        )
        return pos, None, pos[-1].detach() if detach else pos[-1]

    def config_dict(self):
        return {"method": self.kind, "model": self.config.to_dict()}


def build_method(kind: str, n_joints: int, seed: int = 0, window: int = 32, **overrides) -> Method:
    if kind == "vertex_ode":
        return VertexOdeMethod(init_vertex_ode(VertexOdeConfig(n_joints=n_joints, window=window, **overrides), seed))
    if kind in ("trj", "njf_mt"):
        return JacobianMethod(init_model(ModelConfig(n_joints=n_joints, window=window, variant=kind, **overrides), seed))
    raise ValueError(f"unknown method {kind!r}; choose one of {METHODS}")


def method_from_config(cfg: dict) -> Method:
    kind = cfg["method"]
    m = dict(cfg["model"])
    if kind == "vertex_ode":
        return VertexOdeMethod(init_vertex_ode(VertexOdeConfig(**m)))
    return JacobianMethod(init_model(ModelConfig(**m)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = MAX_EPOCHS
    lr: float = 1e-3
    alpha: float = ALPHA
    convergence: float = CONVERGENCE
    seed: int = 0
    log_path: str | None = None
    step: str = "sequence"  # "sequence": one update per sequence; "window": one per window
    freeze: tuple[str, ...] = ()  # parameter-name prefixes left untouched, e.g. ("res.",)

    def __post_init__(self):
        if self.step not in ("sequence", "window"):
            raise ValueError(f"step must be 'sequence' or 'window', got {self.step!r}")


@dataclass
class TrainResult:
    history: list[LossReport] = field(default_factory=list)
    converged: bool = False
    epoch: int = 0  # epochs completed in total, including resumed ones
    optimizer: AdamState | None = None

    @property
    def best_vertex(self) -> float:
        return min(r.vertex for r in self.history) if self.history else float("inf")


def _update(method: Method, params, opt: AdamState, item: TrainItem, windows, state, config: TrainConfig, epoch: int):
    """Forward the given windows (keeping the carry in the graph between
    them), take one Adam step on their mean loss and return the loss report,
    frame count and outgoing state."""
    pos, jac = [], []
    for start, stop in windows:
        p, j, state = method.window(item, start, stop, state, detach=False)
        pos.append(p)
        jac.append(j)
    lo, hi = windows[0][0], windows[-1][1]
    pos = pos[0] if len(pos) == 1 else ad.concat(pos, axis=0)
    use_j = method.uses_jacobians
    jac = (jac[0] if len(jac) == 1 else ad.concat(jac, axis=0)) if use_j else None
    loss, rep = compute_losses(pos, jac, item.frames[lo:hi], item.jacobians[lo:hi] if use_j else None, config.alpha)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss in epoch {epoch + 1} ({item.name}, frames {lo}-{hi})")
    for p in params.values():
        p.grad = None
    loss.backward()
    adam_step(params, {k: p.grad for k, p in params.items()}, opt)
    return rep, hi - lo, _detach_state(state)


def _detach_state(state):
    if state is None:
        return None
    if isinstance(state, Tensor):
        return state.detach()
    return tuple(x.detach() if isinstance(x, Tensor) else x for x in state)


def train(method: Method, items: list[TrainItem], config: TrainConfig, optimizer: AdamState | None = None, start_epoch: int = 0) -> TrainResult:
    """Adam over all parameters.

    Sequences are visited in a seeded shuffled order each epoch. With
    ``step="sequence"`` every window of a sequence is run in time order with
    the residual carry kept in the graph and one update is taken on the
    sequence's mean loss; ``step="window"`` updates after every window and
    cuts the carry. Stops once the epoch's mean L_vertex is below
    ``config.convergence`` or after ``config.epochs`` epochs in total.
    """
    if not items:
        raise ValueError("no training sequences")
    params = {k: p for k, p in method.flat_params().items() if not (config.freeze and k.startswith(tuple(config.freeze)))}
    if not params:
        raise ValueError("every parameter is frozen")
    opt = optimizer or AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed + start_epoch)
    result = TrainResult(optimizer=opt, epoch=start_epoch)
    for epoch in range(start_epoch, config.epochs):
        lv_sum = lj_sum = 0.0
        n_frames = 0
        for i in rng.permutation(len(items)):
            item = items[i]
            bounds = window_bounds(item.n_frames, method.window_size)
            groups = [bounds] if config.step == "sequence" else [[b] for b in bounds]
            state = None
            for windows in groups:
                rep, w, state = _update(method, params, opt, item, windows, state, config, epoch)
                lv_sum += rep.vertex * w
                lj_sum += rep.jacobian * w
                n_frames += w
        rep = LossReport(lv_sum / n_frames, lj_sum / n_frames, config.alpha)
        result.history.append(rep)
        result.epoch = epoch + 1
        if config.log_path:
            append_log(config.log_path, epoch + 1, rep.vertex, rep.jacobian, rep.total)
        logger.info("epoch %d  L_vertex %.3e  L_Jacobian %.3e", epoch + 1, rep.vertex, rep.jacobian)
        if rep.vertex < config.convergence:
            result.converged = True
            break
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_method(path, method: Method, result: TrainResult | None = None) -> None:
    arrays = {k: v.data for k, v in method.flat_params().items()}
    cfg = method.config_dict()
    if result is not None:
        cfg["epoch"] = result.epoch
        cfg["converged"] = result.converged
        opt = result.optimizer
        if opt is not None:
            cfg["adam"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step, "skipped": opt.skipped}
            for k in opt.m:
                arrays[f"adam.m.{k}"] = opt.m[k]
                arrays[f"adam.v.{k}"] = opt.v[k]
    save_checkpoint(path, arrays, cfg)


def load_method(path) -> tuple[Method, dict, AdamState | None]:
    ckpt = load_checkpoint(path)
    method = method_from_config(ckpt.config)
    load_checkpoint_into(method, ckpt, path)
    opt = None
    if "adam" in ckpt.config:
        a = ckpt.config["adam"]
        opt = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"], skipped=a["skipped"])
        for name in method.flat_params():
            if f"adam.m.{name}" in ckpt.arrays:
                opt.m[name] = ckpt.arrays[f"adam.m.{name}"].copy()
                opt.v[name] = ckpt.arrays[f"adam.v.{name}"].copy()
    return method, ckpt.config, opt


def load_checkpoint_into(method: Method, ckpt, path) -> None:
    from .data.formats import FormatError

    for name, p in method.flat_params().items():
        if name not in ckpt.arrays:
            raise FormatError(f"{path}: checkpoint has no tensor {name!r}")
        a = ckpt.arrays[name]
        if a.shape != p.data.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {a.shape}, model expects {p.data.shape}")
        p.data = a.astype(p.dtype, copy=True)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricReport:
    l2_v_cm: float
    l2_j: float
    l2_n_deg: float
    jitter: float  # cm per frame^2

    def as_dict(self) -> dict[str, float]:
        return {"l2_v_cm": self.l2_v_cm, "l2_j": self.l2_j, "l2_n_deg": self.l2_n_deg, "jitter": self.jitter}


def jitter(positions: np.ndarray) -> float:
    """Mean norm (cm) of the second finite difference of vertex trajectories."""
    x = np.asarray(positions, dtype=np.float64)
    if len(x) < 3:
        return 0.0
    return float(100.0 * np.linalg.norm(x[2:] - 2 * x[1:-1] + x[:-2], axis=-1).mean())


def normal_angles(pred: np.ndarray, gt: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-frame, per-face angle (degrees) between predicted and gt face normals."""
    a = face_normals(pred, faces)
    b = face_normals(gt, faces)
    # atan2 stays exact near 0 and 180 degrees where arccos loses precision
    cos = np.einsum("...c,...c->...", a, b)
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.degrees(np.arctan2(sin, cos))


def compute_metrics(pred: np.ndarray, gt: np.ndarray, ctx: ShapeContext) -> MetricReport:
    """L2-V (cm), L2-J (Jacobians recomputed from both position sets),
    L2-N (degrees) and the prediction's jitter."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has shape {pred.shape}, gt {gt.shape}")
    l2v = 100.0 * np.linalg.norm(pred - gt, axis=-1).mean()
    jp = compute_jacobians(ctx.mesh, ctx.bases, pred, ctx.system.grad).matrices
    jg = compute_jacobians(ctx.mesh, ctx.bases, gt, ctx.system.grad).matrices
    l2j = np.linalg.norm(jp - jg, axis=(-2, -1)).mean()
    l2n = normal_angles(pred, gt, ctx.mesh.faces).mean()
    return MetricReport(float(l2v), float(l2j), float(l2n), jitter(pred))


def aggregate(reports: list[MetricReport]) -> MetricReport:
    arr = np.array([[r.l2_v_cm, r.l2_j, r.l2_n_deg, r.jitter] for r in reports])
    return MetricReport(*map(float, arr.mean(axis=0)))


def evaluate(method: Method, items: list[TrainItem]) -> tuple[dict[str, MetricReport], MetricReport]:
    reports = {}
    for item in items:
        if item.frames is None:
            raise ValueError(f"{item.name}: no ground truth to evaluate against")
        reports[item.name] = compute_metrics(method.predict(item.ctx, item.angles), item.frames, item.ctx)
    return reports, aggregate(list(reports.values()))


def resume_or_new(checkpoint: Path | None, kind: str, n_joints: int, seed: int, window: int):
    if checkpoint is not None and Path(checkpoint).exists():
        method, cfg, opt = load_method(checkpoint)
        return method, opt, int(cfg.get("epoch", 0))
    return build_method(kind, n_joints, seed, window), None, 0
