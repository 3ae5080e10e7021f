"""Continual source-free adaptation engine.

Per arriving window, one step does (in order): sample a replay batch, build
two stochastic views of the current window, run the teacher (no gradients) on
the raw window and both views plus the replay views, mask nodes whose teacher
predictions disagree across views, run the student once over everything on a
tape, combine the losses

    total = lam_t * (l1 * pseudo_label + l2 * consistency)
            + l3 * graph + l4 * replay + l5 * disagreement

(lam_t = sigmoid(gamma * (drift - delta)) gates the teacher-matching pair),
take one optimizer step on the student, EMA the teacher, and offer the window
to the reservoir.  During the first `warmup_steps` arrivals the pseudo-label
and disagreement terms are weighted zero: early teacher outputs are not yet
trustworthy and both terms chase the teacher directly.

The teacher never receives gradients: its passes run off-tape, so its outputs
enter the losses as constants.  No target label ever reaches this module;
passing a labeled window is an error.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import memory as mem
from . import model as md
from . import numerics as nm
from .data import WindowBatch
from .graph import SiteGraph
from .optim import make_optimizer


class AdaptError(RuntimeError):
    pass


@dataclass
class AugmentParams:
    jitter_sigma: float = 0.01
    mask_ratio: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1
    warp_max_shift: int = 1

    def validate(self) -> None:
        if self.jitter_sigma < 0 or not (0.0 <= self.mask_ratio <= 1.0):
            raise AdaptError("bad augmentation magnitudes")
        if not (0.0 < self.scale_min <= self.scale_max):
            raise AdaptError("scale range must satisfy 0 < min <= max")
        if self.warp_max_shift < 0:
            raise AdaptError("warp_max_shift must be nonnegative")


@dataclass
class AdaptConfig:
    ema_momentum: float = 0.99            # teacher EMA coefficient
    confidence_threshold: float = 0.8     # tau: nodes below are masked out
    confidence_temperature: float = 0.1   # sigma, in normalized-target units
    weight_pl: float = 1.0                # l1
    weight_cons: float = 1.0              # l2
    weight_graph: float = 0.1             # l3
    weight_replay: float = 1.0            # l4
    weight_ent: float = 0.1               # l5
    drift_gamma: float = 10.0
    drift_delta: float = 0.5              # embedding-norm units
    warmup_steps: int = 200
    lr: float = 1e-3
    optimizer: str = "adam"
    steps_per_arrival: int = 1
    buffer_size: int = 200
    replay_batch: int = 8
    augment: AugmentParams = field(default_factory=AugmentParams)
    mape_epsilon: float = 1e-8
    grad_clip: float = 0.0                # 0 disables clipping
    seed: int = 0
    # ablation switches
    no_replay: bool = False
    no_graph: bool = False
    no_drift: bool = False
    single_model: bool = False

    def validate(self) -> None:
        if not (0.0 <= self.ema_momentum < 1.0):
            raise AdaptError("ema_momentum must be in [0, 1)")
        if not (0.0 < self.confidence_threshold <= 1.0):
            raise AdaptError("confidence_threshold must be in (0, 1]")
        if self.confidence_temperature <= 0:
            raise AdaptError("confidence_temperature must be positive")
        for name in ("weight_pl", "weight_cons", "weight_graph", "weight_replay", "weight_ent"):
            if getattr(self, name) < 0:
                raise AdaptError(f"{name} must be nonnegative")
        if self.drift_gamma <= 0:
            raise AdaptError("drift_gamma must be positive")
        if self.warmup_steps < 0 or self.buffer_size < 0 or self.replay_batch < 0:
            raise AdaptError("counts must be nonnegative")
        if self.lr <= 0 or self.steps_per_arrival < 1:
            raise AdaptError("lr must be positive, steps_per_arrival >= 1")
        if self.grad_clip < 0:
            raise AdaptError("grad_clip must be nonnegative")
        self.augment.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentParams(**d["augment"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AdaptError(f"unknown adapt config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TeacherStudent:
    student: md.ModelState
    teacher: md.ModelState
    step: int = 0
    optimizer: object = None

    @classmethod
    def from_pretrained(cls, state: md.ModelState, config: AdaptConfig) -> "TeacherStudent":
        ts = cls(student=state.copy(), teacher=state.copy())
        ts.optimizer = make_optimizer(config.optimizer, config.lr)
        return ts


@dataclass
class StepDiagnostics:
    t: int
    loss_pl: float
    loss_cons: float
    loss_graph: float
    loss_replay: float
    loss_ent: float
    drift: float
    lam: float
    conf_rate: float
    step_us: float
    total: float = 0.0
    warmup: bool = False
    skipped: bool = False


# ---------------------------------------------------------------------------
# primitive operations

def ema_update(ts: TeacherStudent, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    for name, tv in ts.teacher.params.items():
        sv = ts.student.params[name]
        if tv.shape != sv.shape:
            raise AdaptError(f"teacher/student shape mismatch on {name}")
        tv *= momentum
        tv += (1.0 - momentum) * sv


def _one_view(window: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Jitter always, then one of time-mask / scale / warp; appends the
    time-mask flag channel (so views carry d+1 features)."""
    w, n, d = window.shape
    view = window + rng.normal(0.0, params.jitter_sigma, size=window.shape) \
        if params.jitter_sigma > 0 else window.copy()
    flag = np.zeros((w, n, 1))
    kind = int(rng.integers(0, 3))
    if kind == 0 and params.mask_ratio > 0:
        n_mask = int(round(params.mask_ratio * w))
        if n_mask > 0:
            steps = rng.choice(w, size=min(n_mask, w), replace=False)
            view[steps] = 0.0
            flag[steps] = 1.0
    elif kind == 1:
        s = rng.uniform(params.scale_min, params.scale_max)
        view = view * s
    elif kind == 2 and params.warp_max_shift > 0:
        shift = int(rng.integers(-params.warp_max_shift, params.warp_max_shift + 1))
        if shift != 0:
            view = np.roll(view, shift, axis=0)
            if shift > 0:
                view[:shift] = view[shift]          # replicate the edge frame
            else:
                view[shift:] = view[shift - 1]
    return np.concatenate([view, flag], axis=-1)


def augment(window: np.ndarray, params: AugmentParams, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented copies; same seed gives the same pair.
    Targets are never touched (the window carries none)."""
    window = np.asarray(window, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return _one_view(window, params, rng), _one_view(window, params, rng)


def _pad_flag(window: np.ndarray) -> np.ndarray:
    """Unaugmented window with a zero mask-flag channel."""
    w, n, d = window.shape
    return np.concatenate([window, np.zeros((w, n, 1))], axis=-1)


def confidence_from_predictions(p1: np.ndarray, p2: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise AdaptError("confidence temperature must be positive")
    return np.exp(-np.abs(p1 - p2) / sigma)


def confidence_scores(teacher: md.ModelState, view1: np.ndarray, view2: np.ndarray,
                      graph: SiteGraph, sigma: float) -> np.ndarray:
    """exp(-|teacher(view1) - teacher(view2)| / sigma), per node, in (0, 1]."""
    p1 = md.predict(teacher, view1, graph)
    p2 = md.predict(teacher, view2, graph)
    return confidence_from_predictions(p1, p2, sigma)


def masked_l1(pred: nm.Tensor, target: np.ndarray, mask: np.ndarray) -> nm.Tensor:
    """Mean absolute error over mask-passing nodes; constant 0 if none pass."""
    k = float(mask.sum())
    if k == 0.0:
        return nm.Tensor(0.0)
    return nm.div(nm.tsum(nm.mul(nm.absolute(nm.sub(pred, target)), mask)), k)


def graph_penalty_tensor(z: nm.Tensor, graph: SiteGraph) -> nm.Tensor:
    """Sum over unordered edges of w_uv * ||Z_u - Z_v||^2, batch-averaged.

    Uses the Laplacian identity: sum_{u<v} w_uv ||Z_u - Z_v||^2 = <Z, L Z>
    with L = diag(W 1) - W over the symmetric-normalized weights.
    """
    if graph.reg_weights is None:
        raise AdaptError("graph must be normalized before use")
    w = graph.reg_weights
    lap = np.diag(w.sum(axis=1)) - w
    if z.data.ndim == 2:
        zz = nm.reshape(z, (1,) + z.data.shape)
    else:
        zz = z
    per_window = nm.tsum(nm.mul(zz, nm.matmul(lap, zz)), axis=(1, 2))
    return nm.tmean(per_window)


def graph_regularizer(embeddings: np.ndarray, graph: SiteGraph) -> float:
    """Plain-array evaluation of the embedding-smoothness penalty."""
    return float(graph_penalty_tensor(nm.Tensor(embeddings), graph).data)


def pseudo_label_loss(student: md.ModelState, teacher: md.ModelState, window: np.ndarray,
                      mask: np.ndarray, graph: SiteGraph, mode: str = "eval",
                      rng=None) -> float:
    """Masked L1 between the student's prediction and the teacher pseudo-label
    on the raw window; 0 when every node is masked out."""
    pseudo = md.predict(teacher, window, graph)
    pred = md.forward(student, window, graph, mode=mode, rng=rng).prediction.data[0]
    return float(masked_l1(nm.Tensor(pred), pseudo, np.asarray(mask, float)).data)


def consistency_loss(student: md.ModelState, teacher: md.ModelState, view1: np.ndarray,
                     view2: np.ndarray, graph: SiteGraph, config: AdaptConfig,
                     mode: str = "eval", rng=None) -> float:
    """Masked L1 between student(view2) and the constant teacher(view1)."""
    target = md.predict(teacher, view1, graph)
    c = confidence_scores(teacher, view1, view2, graph, config.confidence_temperature)
    mask = (c >= config.confidence_threshold).astype(np.float64)
    pred = md.forward(student, view2, graph, mode=mode, rng=rng).prediction.data[0]
    return float(masked_l1(nm.Tensor(pred), target, mask).data)


def entropy_proxy_loss(student: md.ModelState, teacher: md.ModelState, window: np.ndarray,
                       graph: SiteGraph, mode: str = "eval", rng=None) -> float:
    """Mean squared student-teacher disagreement on the raw window."""
    t_pred = md.predict(teacher, window, graph)
    s_pred = md.forward(student, window, graph, mode=mode, rng=rng).prediction.data[0]
    return float(np.mean((s_pred - t_pred) ** 2))


def drift_score(embeddings: np.ndarray, memory: mem.ReplayMemory) -> float:
    """L2 distance between the current mean embedding and the memory's cached
    mean; 0 on an empty (or uncached) memory."""
    cached = memory.cached_embedding_mean()
    if cached is None:
        return 0.0
    current = np.asarray(embeddings).mean(axis=0)
    return float(np.linalg.norm(current - cached))


def drift_coefficient(d_t: float, gamma: float, delta: float) -> float:
    if gamma <= 0:
        raise AdaptError("gamma must be positive")
    return float(1.0 / (1.0 + np.exp(-gamma * (d_t - delta))))


# ---------------------------------------------------------------------------
# the per-arrival step

@dataclass
class _StepContext:
    """Everything the student loss needs, with teacher outputs frozen."""

    graph: SiteGraph
    student_inputs: np.ndarray          # (2 + R, w, N, d+1): [raw, view2, replay view2s]
    teacher_pred_raw: np.ndarray        # (N,)
    teacher_pred_view1: np.ndarray      # (N,)
    mask: np.ndarray                    # (N,) 0/1 confidence mask
    replay_targets: list[np.ndarray]    # teacher(view1_i) per replay window
    replay_masks: list[np.ndarray]
    lam: float
    weight_pl: float                    # warm-up-gated l1
    weight_ent: float                   # warm-up-gated l5
    config: AdaptConfig
    dropout_seed: int = 0


def _adapt_loss(student: md.ModelState, ctx: _StepContext, tape: Optional[nm.Tape]):
    """Total adaptation loss (and its parts) on one tape."""
    cfg = ctx.config
    n_replay = len(ctx.replay_targets)
    rng = np.random.default_rng(ctx.dropout_seed)
    out = md.forward(student, ctx.student_inputs, ctx.graph, mode="train", rng=rng, tape=tape)
    pred = out.prediction                     # (2 + R, N)
    z = out.embeddings                        # (2 + R, N, d_z)

    pred_raw = nm.narrow(pred, 0, 1, axis=0)
    pred_v2 = nm.narrow(pred, 1, 1, axis=0)
    l_pl = masked_l1(nm.reshape(pred_raw, (-1,)), ctx.teacher_pred_raw, ctx.mask)
    l_cons = masked_l1(nm.reshape(pred_v2, (-1,)), ctx.teacher_pred_view1, ctx.mask)
    l_ent = nm.tmean(nm.square(nm.sub(nm.reshape(pred_raw, (-1,)), ctx.teacher_pred_raw)))
    if cfg.no_graph:
        l_graph = nm.Tensor(0.0)
    else:
        l_graph = graph_penalty_tensor(nm.narrow(z, 0, 1, axis=0), ctx.graph)

    if n_replay:
        parts = []
        for i in range(n_replay):
            p_i = nm.reshape(nm.narrow(pred, 2 + i, 1, axis=0), (-1,))
            term = masked_l1(p_i, ctx.replay_targets[i], ctx.replay_masks[i])
            if not cfg.no_graph:
                term = nm.add(term, graph_penalty_tensor(nm.narrow(z, 2 + i, 1, axis=0), ctx.graph))
            parts.append(term)
        l_replay = nm.mul(parts[0], 1.0 / n_replay)
        for p in parts[1:]:
            l_replay = nm.add(l_replay, nm.mul(p, 1.0 / n_replay))
    else:
        l_replay = nm.Tensor(0.0)

    gated = nm.add(nm.mul(l_pl, ctx.weight_pl), nm.mul(l_cons, cfg.weight_cons))
    total = nm.mul(gated, ctx.lam)
    total = nm.add(total, nm.mul(l_graph, 0.0 if cfg.no_graph else cfg.weight_graph))
    total = nm.add(total, nm.mul(l_replay, 0.0 if cfg.no_replay else cfg.weight_replay))
    total = nm.add(total, nm.mul(l_ent, ctx.weight_ent))
    parts_out = {
        "pl": float(l_pl.data), "cons": float(l_cons.data),
        "graph": float(l_graph.data), "replay": float(l_replay.data),
        "ent": float(l_ent.data),
    }
    return total, parts_out


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def _step_seed(config: AdaptConfig, step_index: int, k: int) -> int:
    return int((config.seed * 1_000_003 + step_index) * 8 + k) & 0x7FFFFFFF


def adapt_step(ts: TeacherStudent, window, graph: SiteGraph,
               memory: mem.ReplayMemory, config: AdaptConfig) -> StepDiagnostics:
    """One arrival of the unlabeled target stream.

    A non-finite loss or gradient skips the update (diagnostics flag it) so a
    pathological window cannot poison a deployment.
    """
    t_start = time.perf_counter()
    if isinstance(window, WindowBatch):
        if window.target is not None:
            raise AdaptError("a labeled window reached adapt_step; strip targets upstream")
        x = window.inputs
    else:
        x = window
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise AdaptError("window must be (w, N, d)")
    step_index = ts.step
    warmup = step_index < config.warmup_steps
    teacher_state = ts.student if config.single_model else ts.teacher

    # replay batch
    use_replay = not config.no_replay and memory.capacity > 0
    sampled = mem.sample_replay(memory, config.replay_batch, _step_seed(config, step_index, 0)) \
        if use_replay else []
    replay_windows = [e.window.astype(np.float64) for _, e in sampled]

    # views of the current window and of every replayed window
    view1, view2 = augment(x, config.augment, _step_seed(config, step_index, 1))
    replay_views = [
        augment(w_i, config.augment, _step_seed(config, step_index, 2) + i)
        for i, w_i in enumerate(replay_windows)
    ]

    # batched teacher pass, off-tape: raw + both views + replay views
    raw = _pad_flag(x)
    teacher_batch = [raw, view1, view2]
    for v1, v2 in replay_views:
        teacher_batch.append(v1)
    for v1, v2 in replay_views:
        teacher_batch.append(v2)
    t_out = md.forward(teacher_state, np.stack(teacher_batch), graph, mode="eval")
    t_pred = t_out.prediction.data
    t_emb = t_out.embeddings.data
    n_replay = len(replay_views)

    c = confidence_from_predictions(t_pred[1], t_pred[2], config.confidence_temperature)
    mask = (c >= config.confidence_threshold).astype(np.float64)
    replay_targets, replay_masks = [], []
    for i in range(n_replay):
        p_v1 = t_pred[3 + i]
        p_v2 = t_pred[3 + n_replay + i]
        c_i = confidence_from_predictions(p_v1, p_v2, config.confidence_temperature)
        replay_targets.append(p_v1)
        replay_masks.append((c_i >= config.confidence_threshold).astype(np.float64))

    # drift gate from the teacher's raw-window embeddings vs the memory cache
    emb_raw_mean = t_emb[0].mean(axis=0)
    d_t = drift_score(t_emb[0], memory)
    lam = 1.0 if config.no_drift else drift_coefficient(d_t, config.drift_gamma, config.drift_delta)

    ctx = _StepContext(
        graph=graph,
        student_inputs=np.stack([raw, view2] + [v2 for _, v2 in replay_views]),
        teacher_pred_raw=t_pred[0],
        teacher_pred_view1=t_pred[1],
        mask=mask,
        replay_targets=replay_targets,
        replay_masks=replay_masks,
        lam=lam,
        weight_pl=0.0 if warmup else config.weight_pl,
        weight_ent=0.0 if warmup else config.weight_ent,
        config=config,
    )

    parts = {"pl": 0.0, "cons": 0.0, "graph": 0.0, "replay": 0.0, "ent": 0.0}
    total_value = 0.0
    skipped = False
    for inner in range(config.steps_per_arrival):
        ctx.dropout_seed = _step_seed(config, step_index, 3) + inner
        tape = nm.Tape()
        total, parts = _adapt_loss(ts.student, ctx, tape)
        total_value = float(total.data)
        if not np.isfinite(total_value):
            skipped = True
            break
        grads = nm.backward(tape, total)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            skipped = True
            break
        if config.grad_clip > 0:
            _clip_grads(grads, config.grad_clip)
        ts.optimizer.step(ts.student.params, grads)
        if not config.single_model:
            ema_update(ts, config.ema_momentum)

    if not skipped and use_replay:
        # refresh sampled caches from the teacher's view-1 embeddings (cheap
        # augmented approximation of the raw-window embedding)
        for pos, (idx, entry) in enumerate(sampled):
            entry.emb_mean = t_emb[3 + pos].mean(axis=0).copy()
            entry.refreshed_at = step_index + 1
        mem.reservoir_insert(memory, x, memory.t_seen + 1, emb_mean=emb_raw_mean)

    ts.step = step_index + 1
    elapsed_us = (time.perf_counter() - t_start) * 1e6
    return StepDiagnostics(
        t=step_index,
        loss_pl=parts["pl"], loss_cons=parts["cons"], loss_graph=parts["graph"],
        loss_replay=parts["replay"], loss_ent=parts["ent"],
        drift=d_t, lam=lam, conf_rate=float(mask.mean()),
        step_us=elapsed_us, total=total_value, warmup=warmup, skipped=skipped,
    )


def gradcheck_adapt_loss(
    seed: int = 0, n_nodes: int = 3, window: int = 3, input_dim: int = 2,
    d_emb: int = 8, d_h: int = 8, heads: int = 2, replay: int = 2,
    tolerance: float = 1e-4, eps: float = 1e-5,
):
    """Finite-difference check of the full adaptation loss on a small instance.

    Builds a deterministic step context with every loss term active, replay
    batch nonempty, and a partially active confidence mask, then compares the
    tape gradients of the student parameters against central differences.
    """
    from .graph import normalize as _normalize

    cfg_model = md.ModelConfig(
        input_dim=input_dim, window=window, horizon=1, d_emb=d_emb, d_h=d_h,
        attention_heads=heads, dropout=0.0, output="sigmoid",
    )
    rng = np.random.default_rng(seed)
    student = md.init(cfg_model, seed)
    teacher = md.init(cfg_model, seed + 1009)
    A = np.ones((n_nodes, n_nodes)) - np.eye(n_nodes)
    graph = _normalize(SiteGraph([f"s{i}" for i in range(n_nodes)], A))
    config = AdaptConfig(warmup_steps=0, buffer_size=replay, replay_batch=replay, seed=seed)

    x = rng.normal(size=(window, n_nodes, input_dim)) * 0.5 + 0.4
    replay_raw = [rng.normal(size=(window, n_nodes, input_dim)) * 0.5 + 0.4
                  for _ in range(replay)]
    view1, view2 = augment(x, config.augment, seed)
    replay_views = [augment(w_i, config.augment, seed + 11 + i)
                    for i, w_i in enumerate(replay_raw)]
    raw = _pad_flag(x)
    batch = [raw, view1, view2] + [v1 for v1, _ in replay_views] + [v2 for _, v2 in replay_views]
    t_pred = md.forward(teacher, np.stack(batch), graph, mode="eval").prediction.data

    c = confidence_from_predictions(t_pred[1], t_pred[2], config.confidence_temperature)
    # put the threshold strictly inside the score range so the mask is partial
    tau = float((c.min() + c.max()) / 2.0)
    mask = (c > tau).astype(np.float64)
    if mask.sum() in (0, len(mask)):
        mask[0] = 1.0 - mask[0]
    replay_targets, replay_masks = [], []
    for i in range(replay):
        c_i = confidence_from_predictions(
            t_pred[3 + i], t_pred[3 + replay + i], config.confidence_temperature)
        replay_targets.append(t_pred[3 + i])
        replay_masks.append((c_i > tau).astype(np.float64))

    ctx = _StepContext(
        graph=graph,
        student_inputs=np.stack([raw, view2] + [v2 for _, v2 in replay_views]),
        teacher_pred_raw=t_pred[0],
        teacher_pred_view1=t_pred[1],
        mask=mask,
        replay_targets=replay_targets,
        replay_masks=replay_masks,
        lam=drift_coefficient(0.6, config.drift_gamma, config.drift_delta),
        weight_pl=config.weight_pl,
        weight_ent=config.weight_ent,
        config=config,
        dropout_seed=seed,
    )

    def loss_fn(params):
        st = md.ModelState(cfg_model, {k: np.asarray(v) for k, v in params.items()}, 0)
        tape = nm.Tape()
        total, _ = _adapt_loss(st, ctx, tape)
        return float(total.data), nm.backward(tape, total)

    report = nm.check_gradients(loss_fn, student.params, tolerance=tolerance, eps=eps)
    report.meta = {
        "mask_active": int(mask.sum()),
        "n_nodes": n_nodes,
        "replay": replay,
        "n_params": student.n_params(),
    }
    return report
