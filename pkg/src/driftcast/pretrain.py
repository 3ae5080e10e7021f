"""Multi-source supervised pretraining.

Minimizes the summed forecasting loss over K labeled source domains by
mini-batch gradient descent.  Batches are drawn per source (each source keeps
its own graph) and interleaved by a global shuffle, so sources contribute in
proportion to their window counts.  The last tenth of each source's windows
(by anchor order) is held out for validation; the best-validation parameters
are returned.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import model as md
from . import numerics as nm
from .data import DataError, Dataset, make_windows
from .graph import SiteGraph
from .optim import make_optimizer

logger = logging.getLogger(__name__)

VALIDATION_FRACTION = 0.1


class PretrainError(RuntimeError):
    pass


@dataclass
class SourceSet:
    datasets: list[Dataset]
    graphs: list[SiteGraph]
    names: Optional[list[str]] = None

    def __post_init__(self):
        if len(self.datasets) < 1:
            raise DataError("need at least one source domain")
        if len(self.graphs) != len(self.datasets):
            raise DataError("one graph per source dataset required")
        dims = {ds.n_features for ds in self.datasets}
        if len(dims) != 1:
            raise DataError(f"sources disagree on feature dimension: {sorted(dims)}")
        if self.names is None:
            self.names = [f"source{i}" for i in range(len(self.datasets))]


@dataclass
class TrainConfig:
    lr: float = 0.01
    optimizer: str = "adam"
    batch_size: int = 32
    epochs: int = 100
    loss: str = "mae"            # "mae" | "huber" (delta 1.0)
    seed: int = 0
    patience: int = 10           # early-stop epochs without val improvement; 0 disables

    def validate(self) -> None:
        if self.lr <= 0:
            raise PretrainError("learning rate must be positive")
        if self.epochs < 0:
            raise PretrainError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise PretrainError("batch size must be >= 1")
        if self.loss not in ("mae", "huber"):
            raise PretrainError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise PretrainError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


HUBER_DELTA = 1.0


def loss_value(pred: np.ndarray, target: np.ndarray, kind: str = "mae") -> float:
    """Scalar forecasting loss on plain arrays."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise PretrainError(f"shape mismatch {pred.shape} vs {target.shape}")
    r = np.abs(pred - target)
    if kind == "mae":
        return float(r.mean())
    if kind == "huber":
        quad = r <= HUBER_DELTA
        return float(np.where(quad, 0.5 * r * r, HUBER_DELTA * (r - 0.5 * HUBER_DELTA)).mean())
    raise PretrainError(f"unknown loss {kind!r}")


def loss_tensor(pred: nm.Tensor, target: np.ndarray, kind: str) -> nm.Tensor:
    """Differentiable counterpart of loss_value."""
    r = nm.absolute(nm.sub(pred, target))
    if kind == "mae":
        return nm.tmean(r)
    # Huber: the region mask is a constant of the forward values, which gives
    # the exact (almost-everywhere) gradient
    quad = (r.data <= HUBER_DELTA).astype(np.float64)
    quadratic = nm.mul(nm.square(r), 0.5)
    linear = nm.sub(nm.mul(r, HUBER_DELTA), 0.5 * HUBER_DELTA * HUBER_DELTA)
    return nm.tmean(nm.add(nm.mul(quadratic, quad), nm.mul(linear, 1.0 - quad)))


@dataclass
class LossCurvePoint:
    epoch: int
    source: str
    loss: float
    val_loss: float


@dataclass
class PretrainResult:
    state: md.ModelState
    curve: list[LossCurvePoint] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def _eval_loss(state: md.ModelState, windows, graph: SiteGraph, kind: str,
               chunk: int = 256) -> float:
    if not windows:
        return float("nan")
    total, count = 0.0, 0
    for lo in range(0, len(windows), chunk):
        part = windows[lo:lo + chunk]
        x = np.stack([w.inputs for w in part])
        y = np.stack([w.target for w in part])
        pred = md.forward(state, x, graph, mode="eval").prediction.data
        total += loss_value(pred, y, kind) * len(part)
        count += len(part)
    return total / count


def pretrain(sources: SourceSet, model_config: md.ModelConfig,
             train_config: TrainConfig) -> PretrainResult:
    """Train from scratch on the source domains; returns best-validation state."""
    train_config.validate()
    model_config.validate()
    if model_config.input_dim != sources.datasets[0].n_features:
        raise PretrainError(
            f"model expects {model_config.input_dim} features, sources have "
            f"{sources.datasets[0].n_features}"
        )
    state = md.init(model_config, train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    w, h = model_config.window, model_config.horizon

    per_source_train: list[list] = []
    per_source_val: list[list] = []
    for ds, name in zip(sources.datasets, sources.names):
        wins = make_windows(ds, w, h)
        if not wins:
            raise PretrainError(f"source {name} yields no windows")
        n_val = int(len(wins) * VALIDATION_FRACTION)
        split_at = len(wins) - n_val if n_val > 0 else len(wins)
        per_source_train.append(wins[:split_at])
        per_source_val.append(wins[split_at:])

    if train_config.epochs == 0:
        return PretrainResult(state=state)

    optimizer = make_optimizer(train_config.optimizer, train_config.lr)
    best: Optional[md.ModelState] = None
    best_val = np.inf
    best_epoch = -1
    bad_epochs = 0
    curve: list[LossCurvePoint] = []
    stopped = False

    for epoch in range(train_config.epochs):
        batches: list[tuple[int, np.ndarray]] = []
        for si, wins in enumerate(per_source_train):
            order = rng.permutation(len(wins))
            for lo in range(0, len(wins), train_config.batch_size):
                batches.append((si, order[lo:lo + train_config.batch_size]))
        rng.shuffle(batches)

        epoch_loss = {si: [0.0, 0] for si in range(len(per_source_train))}
        for si, idx in batches:
            wins = per_source_train[si]
            x = np.stack([wins[i].inputs for i in idx])
            y = np.stack([wins[i].target for i in idx])
            tape = nm.Tape()
            out = md.forward(
                state, x, sources.graphs[si], mode="train",
                rng=np.random.default_rng(rng.integers(2 ** 63)), tape=tape,
            )
            loss = loss_tensor(out.prediction, y, train_config.loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise PretrainError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"source {sources.names[si]} (lr {train_config.lr})"
                )
            grads = nm.backward(tape, loss)
            optimizer.step(state.params, grads)
            epoch_loss[si][0] += value * len(idx)
            epoch_loss[si][1] += len(idx)

        val_losses = []
        for si, name in enumerate(sources.names):
            vl = _eval_loss(state, per_source_val[si], sources.graphs[si], train_config.loss)
            tl = epoch_loss[si][0] / max(1, epoch_loss[si][1])
            curve.append(LossCurvePoint(epoch, name, tl, vl))
            if np.isfinite(vl):
                val_losses.append(vl)
        mean_val = float(np.mean(val_losses)) if val_losses else float("nan")

        if np.isfinite(mean_val) and mean_val < best_val:
            best_val = mean_val
            best = state.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if train_config.patience > 0 and bad_epochs >= train_config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                stopped = True
                break

    final = best if best is not None else state
    return PretrainResult(state=final, curve=curve, best_epoch=best_epoch, stopped_early=stopped)


def write_loss_curve(curve: list[LossCurvePoint], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "source", "loss", "val_loss"])
        for pt in curve:
            writer.writerow([pt.epoch, pt.source, f"{pt.loss:.17g}", f"{pt.val_loss:.17g}"])
