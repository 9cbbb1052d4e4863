"""Layers on top of the autodiff engine: MLPs, multi-head attention,
sinusoidal time encoding and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output; ReLU between layers, the
    final layer is affine."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32, zero_last: bool = False) -> Params:
    """Kaiming-uniform weights for ReLU-fed layers, zero biases."""
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        last = k == spec.n_layers - 1
        bound = np.sqrt((3.0 if last else 6.0) / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if last and zero_last:
            w = np.zeros_like(w)
        params[f"w{k}"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"b{k}"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
    return params


def mlp_forward(spec: MlpSpec, params: Params, x: Tensor) -> Tensor:
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"MLP expects input width {spec.widths[0]}, got {x.shape[-1]}")
    h = x
    for k in range(spec.n_layers):
        h = ad.linear(h, params[f"w{k}"], params[f"b{k}"])
        if k < spec.n_layers - 1:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionSpec:
    token_dim: int
    time_dim: int = 8
    heads: int = 2
    kv_dim: int = 32
    ff_width: int = 32
    out_dim: int = 32

    def __post_init__(self):
        if self.kv_dim % self.heads:
            raise ValueError(f"kv_dim {self.kv_dim} is not divisible by {self.heads} heads")

    @property
    def in_dim(self) -> int:
        return self.token_dim + self.time_dim


def init_attention(spec: AttentionSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    def lin(name, fan_in, fan_out, gain=3.0):
        bound = np.sqrt(gain / fan_in)
        return {
            f"w{name}": Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), requires_grad=True),
            f"b{name}": Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True),
        }

    p = {}
    p |= lin("q", spec.in_dim, spec.kv_dim)
    p |= lin("k", spec.in_dim, spec.kv_dim)
    p |= lin("v", spec.in_dim, spec.kv_dim)
    p |= lin("o", spec.kv_dim, spec.kv_dim)
    p |= lin("f1", spec.kv_dim, spec.ff_width, gain=6.0)
    p |= lin("f2", spec.ff_width, spec.out_dim)
    return p


def multihead_attention(spec: AttentionSpec, params: Params, tokens: Tensor, times: np.ndarray) -> Tensor:
    """Encode a window of tokens into one fixed-size vector per batch row.

    tokens: (B, T, token_dim); times: (T, time_dim) encoded time stamps.
    Returns (B, out_dim): self-attention, output projection and a ReLU
    feed-forward layer, mean-pooled over the T tokens.
    """
    tokens = ad.as_tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[1] < 1:
        raise ValueError(f"attention needs a non-empty window of shape (B, T, D), got {tokens.shape}")
    b, t, _ = tokens.shape
    times = np.asarray(times, dtype=tokens.dtype)
    if times.shape != (t, spec.time_dim):
        raise ValueError(f"time block shape {times.shape} does not match ({t}, {spec.time_dim})")
    x = ad.concat([tokens, Tensor(np.broadcast_to(times, (b, t, spec.time_dim)))], axis=-1)
    h, dh = spec.heads, spec.kv_dim // spec.heads

    def split(z):
        return ad.transpose(z.reshape(b, t, h, dh), (0, 2, 1, 3))

    q = split(ad.linear(x, params["wq"], params["bq"]))
    k = split(ad.linear(x, params["wk"], params["bk"]))
    v = split(ad.linear(x, params["wv"], params["bv"]))
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    ctx = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)).reshape(b, t, spec.kv_dim)
    y = ad.linear(ctx, params["wo"], params["bo"])
    y = ad.linear(ad.relu(ad.linear(y, params["wf1"], params["bf1"])), params["wf2"], params["bf2"])
    return ad.mean(y, axis=1)


def positional_encoding(t, bands: int = 4) -> np.ndarray:
    """Sinusoids sin/cos(2^k pi t), k = 0..bands-1, interleaved per band.

    ``t`` may be a scalar or an array; output has a trailing axis of 2*bands.
    """
    t = np.asarray(t, dtype=np.float64)[..., None]
    freqs = (2.0 ** np.arange(bands)) * np.pi
    ang = t * freqs
    out = np.empty(ang.shape[:-1] + (2 * bands,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: dict[str, np.ndarray | None], state: AdamState, lr: float | None = None) -> bool:
    """Update ``params`` in place. Returns False (and counts a skip) when any
    gradient is non-finite, leaving parameters and moments untouched."""
    lr = state.lr if lr is None else lr
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return True
