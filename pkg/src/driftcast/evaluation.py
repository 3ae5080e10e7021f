"""Metrics and the pretrain / deploy / adapt streaming protocol.

The protocol is prequential (test-then-adapt): at every stream position the
current student scores the window first, and only afterwards may the window
be used for an adaptation update, with its label stripped.  Labels live in a
``LabelStore`` that counts every read and its declared purpose, so a run can
prove that ground truth was touched exactly once per scored step and only for
evaluation; the adaptation path receives target-free windows and cannot reach
the store at all.

Metric sets store running sums, which makes block ("rolling") metrics
aggregate exactly to the final numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from . import adapt as ad
from . import memory as mem
from . import model as md
from .data import Dataset, make_windows
from .graph import SiteGraph


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricSet:
    """Forecast errors over a sample; kept as sums so sets merge exactly."""

    n: int = 0
    sum_abs: float = 0.0
    sum_sq: float = 0.0
    sum_ape: float = 0.0
    sum_sape: float = 0.0

    @property
    def mae(self) -> float:
        return self.sum_abs / self.n if self.n else 0.0

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.sum_sq / self.n)) if self.n else 0.0

    @property
    def mape(self) -> float:
        return self.sum_ape / self.n if self.n else 0.0

    @property
    def smape(self) -> float:
        return self.sum_sape / self.n if self.n else 0.0

    def merge(self, other: "MetricSet") -> "MetricSet":
        return MetricSet(
            self.n + other.n, self.sum_abs + other.sum_abs, self.sum_sq + other.sum_sq,
            self.sum_ape + other.sum_ape, self.sum_sape + other.sum_sape,
        )

    def as_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape,
                "smape": self.smape, "count": self.n}


def compute_metrics(pred: np.ndarray, truth: np.ndarray, eps: float = 1e-8) -> MetricSet:
    """MAE, RMSE, MAPE, sMAPE as printed formulas (fractions, not percent).

    MAPE divides by |y| + eps; an sMAPE term with y = yhat = 0 contributes 0.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise EvalError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EvalError("empty input")
    err = np.abs(truth - pred)
    denom = np.abs(truth) + np.abs(pred)
    with np.errstate(invalid="ignore", divide="ignore"):
        sape = np.where(denom > 0.0, 2.0 * err / denom, 0.0)
    return MetricSet(
        n=pred.size,
        sum_abs=float(err.sum()),
        sum_sq=float(((truth - pred) ** 2).sum()),
        sum_ape=float((err / (np.abs(truth) + eps)).sum()),
        sum_sape=float(sape.sum()),
    )


# ---------------------------------------------------------------------------
# label audit

class LabelStore:
    """Sole gate to stream ground truth; every read is counted and purposed."""

    def __init__(self, targets: np.ndarray):
        self._targets = targets
        self.reads = 0
        self.non_evaluation_reads = 0

    def read(self, index: int, purpose: str) -> np.ndarray:
        if purpose != "evaluation":
            self.non_evaluation_reads += 1
        self.reads += 1
        return self._targets[index]


# ---------------------------------------------------------------------------
# stream protocol

@dataclass
class StepRecord:
    t: int
    anchor_time: float
    prediction: np.ndarray      # (N,)
    truth: np.ndarray           # (N,)
    scored: bool                # included in final metrics (post-warm-up)


@dataclass
class StreamReport:
    mode: str
    steps: list[StepRecord]
    diagnostics: list[ad.StepDiagnostics]
    final: MetricSet
    final_denorm: Optional[MetricSet]
    rolling: list[MetricSet]
    manifest: dict
    label_reads: int
    runtime_s: float = 0.0

    def digest(self) -> str:
        """Deterministic digest of predictions, truths, and final metrics."""
        h = hashlib.sha256()
        for rec in self.steps:
            h.update(np.ascontiguousarray(rec.prediction, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(rec.truth, dtype="<f8").tobytes())
        h.update(json.dumps(self.final.as_dict(), sort_keys=True).encode())
        return h.hexdigest()


def run_stream_protocol(
    theta0: md.ModelState,
    dataset: Dataset,
    graph: SiteGraph,
    config: ad.AdaptConfig,
    mode: str = "adapt",
    include_warmup: bool = False,
    rolling_window: int = 100,
) -> StreamReport:
    """Walk the target stream chronologically, score-then-adapt.

    ``frozen`` mode never updates anything (the source-only baseline);
    ``adapt`` mode feeds each window, label stripped, to the adaptation step
    after its prediction is recorded.  Final metrics cover post-warm-up steps
    unless include_warmup (frozen runs share the same mask so comparisons stay
    paired).
    """
    if mode not in ("adapt", "frozen"):
        raise EvalError(f"unknown mode {mode!r}")
    config.validate()
    w, h = theta0.config.window, theta0.config.horizon
    if dataset.n_features != theta0.config.input_dim:
        raise EvalError(
            f"checkpoint expects {theta0.config.input_dim} features, "
            f"dataset has {dataset.n_features}"
        )
    if graph.n_nodes != dataset.n_sites:
        raise EvalError("graph and dataset disagree on the number of sites")
    windows = make_windows(dataset, w, h, with_targets=False)
    if not windows:
        raise EvalError(f"stream shorter than w + h = {w + h}")
    labels = LabelStore(dataset.targets)

    t_start = time.perf_counter()
    ts = ad.TeacherStudent.from_pretrained(theta0, config)
    memory = mem.ReplayMemory(config.buffer_size, seed=config.seed)
    steps: list[StepRecord] = []
    diagnostics: list[ad.StepDiagnostics] = []
    for i, wb in enumerate(windows):
        pred = md.predict(ts.student, wb.inputs, graph)
        truth = labels.read(wb.anchor_index + h, purpose="evaluation")
        # frozen runs share the warm-up mask so comparisons stay paired
        scored = include_warmup or i >= config.warmup_steps
        steps.append(StepRecord(i, wb.anchor_time, pred, np.asarray(truth, float).copy(), scored))
        if mode == "adapt":
            diagnostics.append(ad.adapt_step(ts, wb, graph, memory, config))

    scored_steps = [s for s in steps if s.scored]
    if not scored_steps:
        raise EvalError("no post-warm-up steps to score; stream too short or warmup too long")
    final = MetricSet()
    rolling: list[MetricSet] = []
    block = MetricSet()
    for k, rec in enumerate(scored_steps):
        m = compute_metrics(rec.prediction, rec.truth, config.mape_epsilon)
        final = final.merge(m)
        block = block.merge(m)
        if (k + 1) % rolling_window == 0:
            rolling.append(block)
            block = MetricSet()
    if block.n:
        rolling.append(block)

    final_denorm = None
    if dataset.norm and "target_min" in dataset.norm:
        fd = MetricSet()
        for rec in scored_steps:
            fd = fd.merge(compute_metrics(
                dataset.denormalize_targets(rec.prediction),
                dataset.denormalize_targets(rec.truth),
                config.mape_epsilon,
            ))
        final_denorm = fd

    runtime = time.perf_counter() - t_start
    manifest = {
        "mode": mode,
        "model_config": theta0.config.to_dict(),
        "model_digest": theta0.digest(),
        "adapt_config": config.to_dict(),
        "include_warmup": include_warmup,
        "rolling_window": rolling_window,
        "n_steps": len(steps),
        "n_scored": len(scored_steps),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "blas_threads": os.environ.get("OPENBLAS_NUM_THREADS", "unset"),
        "label_reads": labels.reads,
        "label_non_evaluation_reads": labels.non_evaluation_reads,
    }
    return StreamReport(
        mode=mode, steps=steps, diagnostics=diagnostics, final=final,
        final_denorm=final_denorm, rolling=rolling, manifest=manifest,
        label_reads=labels.reads, runtime_s=runtime,
    )


ABLATION_VARIANTS = ("full", "no-replay", "no-graph", "no-drift", "single-model")


def variant_config(config: ad.AdaptConfig, variant: str) -> ad.AdaptConfig:
    if variant == "full":
        return replace(config)
    if variant == "no-replay":
        return replace(config, no_replay=True)
    if variant == "no-graph":
        return replace(config, no_graph=True)
    if variant == "no-drift":
        return replace(config, no_drift=True)
    if variant == "single-model":
        return replace(config, single_model=True)
    raise EvalError(f"unknown ablation variant {variant!r} (known: {ABLATION_VARIANTS})")


def ablation_suite(
    theta0: md.ModelState,
    dataset: Dataset,
    graph: SiteGraph,
    config: ad.AdaptConfig,
    variants=ABLATION_VARIANTS,
) -> dict[str, StreamReport]:
    """One protocol run per variant, shared checkpoint and seeds."""
    reports = {}
    for variant in variants:
        reports[variant] = run_stream_protocol(
            theta0, dataset, graph, variant_config(config, variant), mode="adapt"
        )
    return reports


# ---------------------------------------------------------------------------
# artifact writers

def write_report_csv(report: StreamReport, path, site_names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["t", "anchor_time", "scored"]
        header += [f"pred_{s}" for s in site_names] + [f"truth_{s}" for s in site_names]
        writer.writerow(header)
        for rec in report.steps:
            row = [rec.t, f"{rec.anchor_time:.17g}", int(rec.scored)]
            row += [f"{v:.17g}" for v in rec.prediction]
            row += [f"{v:.17g}" for v in rec.truth]
            writer.writerow(row)


def write_diagnostics_csv(report: StreamReport, path) -> None:
    """Per-step adaptation diagnostics; step_us is wall-clock and not digested."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "L_PL", "L_cons", "L_graph", "L_replay", "L_ent",
                         "d_t", "lambda_t", "conf_rate", "step_us"])
        for d in report.diagnostics:
            writer.writerow([
                d.t, f"{d.loss_pl:.17g}", f"{d.loss_cons:.17g}", f"{d.loss_graph:.17g}",
                f"{d.loss_replay:.17g}", f"{d.loss_ent:.17g}", f"{d.drift:.17g}",
                f"{d.lam:.17g}", f"{d.conf_rate:.17g}", f"{d.step_us:.1f}",
            ])


def write_summary_json(report: StreamReport, path) -> None:
    payload = {
        "final": report.final.as_dict(),
        "final_denormalized": report.final_denorm.as_dict() if report.final_denorm else None,
        "rolling": [m.as_dict() for m in report.rolling],
        "manifest": report.manifest,
        "digest": report.digest(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_ablation_csv(reports: dict[str, StreamReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mae", "rmse", "mape", "smape", "count"])
        for variant, rep in reports.items():
            m = rep.final
            writer.writerow([variant, f"{m.mae:.17g}", f"{m.rmse:.17g}",
                             f"{m.mape:.17g}", f"{m.smape:.17g}", m.n])
