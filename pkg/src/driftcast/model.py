"""Spatio-temporal forecasting backbone.

Per node: a gated recurrent encoder summarizes the input window into a
128-dim context, two graph-convolution layers (learned self + neighbor terms
over row-normalized edge weights) mix information across sites, a multi-head
additive attention layer (LeakyReLU scoring, softmax over neighbors and self)
produces the 64-dim embeddings, and a per-node linear head with optional
sigmoid emits the forecast.  Stack: d -> 128 -> 64 -> 64 -> 64 -> 1.

Forward passes run on a numerics Tape when gradients are needed; with
``tape=None`` the same code path executes as plain numpy (used for teacher
passes and deployment predictions).

Input windows carry ``d`` data features; internally an extra time-mask flag
channel is appended (the masking augmentation sets it), so the first weight
matrix has ``d + 1`` input rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import binio
from . import numerics as nm
from .graph import SiteGraph

CHECKPOINT_MAGIC = b"DCKP"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int                 # data features per node per step
    window: int                    # steps fed to the encoder
    horizon: int                   # forecast offset
    d_emb: int = 128               # temporal context width
    d_h: int = 64                  # graph-layer / embedding width
    attention_heads: int = 4
    leaky_slope: float = 0.2
    dropout: float = 0.5
    output: str = "sigmoid"        # "sigmoid" for [0,1]-scaled targets, else "linear"

    def validate(self) -> None:
        if min(self.input_dim, self.window, self.horizon, self.d_emb, self.d_h) < 1:
            raise ModelError("all dimensions must be >= 1")
        if self.attention_heads < 1 or self.d_h % self.attention_heads != 0:
            raise ModelError("attention_heads must divide d_h")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError("dropout must be in [0, 1)")
        if self.output not in ("sigmoid", "linear"):
            raise ModelError(f"unknown output activation {self.output!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def parameter_specs(config: ModelConfig) -> list[tuple[str, tuple]]:
    d, e, h = config.input_dim, config.d_emb, config.d_h
    dk = h // config.attention_heads
    return [
        ("gru.Wx", (d + 1, 3 * e)),
        ("gru.Wh", (e, 3 * e)),
        ("gru.b", (3 * e,)),
        ("conv1.Wself", (e, h)),
        ("conv1.Wnb", (e, h)),
        ("conv1.b", (h,)),
        ("conv2.Wself", (h, h)),
        ("conv2.Wnb", (h, h)),
        ("conv2.b", (h,)),
        ("attn.W", (h, h)),
        ("attn.a_src", (config.attention_heads, dk)),
        ("attn.a_dst", (config.attention_heads, dk)),
        ("head.W", (h, 1)),
        ("head.b", (1,)),
    ]


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].reshape(-1) for n, _ in parameter_specs(self.config)])

    def from_vector(self, vec: np.ndarray) -> None:
        offset = 0
        for name, shape in parameter_specs(self.config):
            n = int(np.prod(shape))
            self.params[name] = vec[offset:offset + n].reshape(shape).copy()
            offset += n
        if offset != vec.size:
            raise ModelError("vector length does not match parameter count")

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, _ in parameter_specs(self.config):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def init(config: ModelConfig, seed: int) -> ModelState:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed.

    Uniform bounds preserve activation variance: sqrt(3/fan_in) generally,
    sqrt(6/fan_in) into the ReLU propagation layers to compensate the halving.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_specs(config):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[1] if name in ("attn.a_src", "attn.a_dst") else shape[0]
        gain = 6.0 if name.startswith("conv") else 3.0
        bound = np.sqrt(gain / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelState(config, params, seed)


@dataclass
class ForwardOutput:
    """prediction (B, N); embeddings (B, N, d_h); temporal (B, N, d_emb).

    Fields are numerics Tensors; ``.data`` gives the numpy values.  Singleton
    batch inputs keep a leading batch axis of 1.
    """

    prediction: nm.Tensor
    embeddings: nm.Tensor
    temporal: nm.Tensor


def _wrap_params(state: ModelState, tape: Optional[nm.Tape]) -> dict[str, nm.Tensor]:
    if tape is None:
        return {k: nm.Tensor(v) for k, v in state.params.items()}
    return {k: tape.leaf(v, k) for k, v in state.params.items()}


def _prepare_input(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Accept (w,N,d), (w,N,d+1), (B,w,N,d), (B,w,N,d+1); return (B,w,N,d+1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ModelError(f"window must have 3 or 4 axes, got {x.ndim}")
    b, w, n, d = x.shape
    if w != config.window:
        raise ModelError(f"window length {w}, model expects {config.window}")
    if d == config.input_dim:
        x = np.concatenate([x, np.zeros((b, w, n, 1))], axis=-1)
    elif d != config.input_dim + 1:
        raise ModelError(f"feature dim {d}, model expects {config.input_dim} (+1 flag)")
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite values in input window")
    return x


def encode_temporal(
    state: ModelState,
    window: np.ndarray,
    tape: Optional[nm.Tape] = None,
    p: Optional[dict[str, nm.Tensor]] = None,
) -> nm.Tensor:
    """Shared-weight recurrent pass over the window; returns (B, N, d_emb)."""
    config = state.config
    x = _prepare_input(window, config)
    b, w, n, d1 = x.shape
    e = config.d_emb
    if p is None:
        p = _wrap_params(state, tape)
    # project inputs for every step at once: (w, B, N, d1) flattened so the
    # per-step rows are contiguous slices
    x_steps = np.ascontiguousarray(np.transpose(x, (1, 0, 2, 3))).reshape(w * b * n, d1)
    xp = nm.add(nm.matmul(nm.Tensor(x_steps), p["gru.Wx"]), p["gru.b"])
    rows = b * n
    h: nm.Tensor = nm.Tensor(np.zeros((rows, e)))
    for t in range(w):
        xp_t = nm.narrow(xp, t * rows, rows, axis=0)
        hp = nm.matmul(h, p["gru.Wh"])
        zr = nm.sigmoid(nm.add(nm.narrow(xp_t, 0, 2 * e), nm.narrow(hp, 0, 2 * e)))
        z = nm.narrow(zr, 0, e)
        r = nm.narrow(zr, e, e)
        cand = nm.tanh(nm.add(nm.narrow(xp_t, 2 * e, e), nm.mul(r, nm.narrow(hp, 2 * e, e))))
        # h' = (1 - z) * cand + z * h
        h = nm.add(cand, nm.mul(z, nm.sub(h, cand)))
    return nm.reshape(h, (b, n, e))


def _dropout(t: nm.Tensor, prob: float, mode: str, rng) -> nm.Tensor:
    if mode != "train" or prob <= 0.0:
        return t
    if rng is None:
        raise ModelError("train-mode forward needs an rng for dropout")
    mask = (rng.random(t.data.shape) >= prob) / (1.0 - prob)
    return nm.mul(t, mask)


def propagate(
    state: ModelState,
    temporal: nm.Tensor,
    graph: SiteGraph,
    mode: str = "eval",
    rng=None,
    p: Optional[dict[str, nm.Tensor]] = None,
) -> nm.Tensor:
    """Two graph-conv layers then multi-head attention; returns Z (B, N, d_h)."""
    config = state.config
    if graph.alpha is None:
        raise ModelError("graph must be normalized (alpha missing)")
    if temporal.data.shape[-2] != graph.n_nodes:
        raise ModelError(
            f"graph has {graph.n_nodes} nodes, temporal context has {temporal.data.shape[-2]} rows"
        )
    if p is None:
        p = _wrap_params(state, temporal.tape)
    alpha = graph.alpha
    h = temporal
    for layer in ("conv1", "conv2"):
        own = nm.matmul(h, p[f"{layer}.Wself"])
        nb = nm.matmul(alpha, nm.matmul(h, p[f"{layer}.Wnb"]))
        h = nm.relu(nm.add(nm.add(own, nb), p[f"{layer}.b"]))
        h = _dropout(h, config.dropout, mode, rng)

    # additive multi-head attention over neighbors-plus-self
    b, n, dh = h.data.shape
    heads = config.attention_heads
    dk = dh // heads
    q = nm.reshape(nm.matmul(h, p["attn.W"]), (b, n, heads, dk))
    s_src = nm.tsum(nm.mul(q, p["attn.a_src"]), axis=-1)        # (B, N, heads)
    s_dst = nm.tsum(nm.mul(q, p["attn.a_dst"]), axis=-1)
    scores = nm.add(
        nm.reshape(s_src, (b, n, 1, heads)), nm.reshape(s_dst, (b, 1, n, heads))
    )                                                            # (B, v, u, heads)
    scores = nm.leaky_relu(scores, config.leaky_slope)
    allowed = ((alpha > 0.0) | np.eye(n, dtype=bool)).astype(np.float64)
    attn = nm.softmax_masked(scores, allowed[None, :, :, None], axis=2)
    attn_h = nm.transpose(attn, (0, 3, 1, 2))                    # (B, heads, v, u)
    q_h = nm.transpose(q, (0, 2, 1, 3))                          # (B, heads, u, dk)
    z = nm.transpose(nm.matmul(attn_h, q_h), (0, 2, 1, 3))       # (B, v, heads, dk)
    return nm.reshape(z, (b, n, dh))


def forward(
    state: ModelState,
    window: np.ndarray,
    graph: SiteGraph,
    mode: str = "eval",
    rng=None,
    tape: Optional[nm.Tape] = None,
) -> ForwardOutput:
    """Full pass: temporal encoder -> propagation -> head.

    Eval mode is deterministic (dropout off); train mode applies dropout in
    the propagation layers and requires ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ModelError(f"unknown mode {mode!r}")
    p = _wrap_params(state, tape)
    temporal = encode_temporal(state, window, tape, p=p)
    z = propagate(state, temporal, graph, mode=mode, rng=rng, p=p)
    raw = nm.add(nm.matmul(z, p["head.W"]), p["head.b"])
    b, n = z.data.shape[0], z.data.shape[1]
    raw = nm.reshape(raw, (b, n))
    pred = nm.sigmoid(raw) if state.config.output == "sigmoid" else raw
    return ForwardOutput(prediction=pred, embeddings=z, temporal=temporal)


def predict(state: ModelState, window: np.ndarray, graph: SiteGraph) -> np.ndarray:
    """Deployment prediction: eval mode, no tape, squeezed batch axis."""
    out = forward(state, window, graph, mode="eval")
    pred = out.prediction.data
    return pred[0] if np.asarray(window).ndim == 3 else pred


def save_checkpoint(state: ModelState, path) -> None:
    meta = {
        "kind": "model-state",
        "config": state.config.to_dict(),
        "config_digest": state.config.digest(),
        "seed": state.seed,
    }
    binio.write_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, state.params)


def load_checkpoint(path) -> ModelState:
    meta, arrays = binio.read_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = ModelConfig.from_dict(meta["config"])
    for name, shape in parameter_specs(config):
        if name not in arrays:
            raise binio.FileFormatError(f"{path}: missing tensor {name}")
        if arrays[name].shape != shape:
            raise binio.FileFormatError(
                f"{path}: tensor {name} has shape {arrays[name].shape}, config implies {shape}"
            )
    extra = set(arrays) - {n for n, _ in parameter_specs(config)}
    if extra:
        raise binio.FileFormatError(f"{path}: unexpected tensors {sorted(extra)}")
    return ModelState(config, arrays, int(meta["seed"]))
