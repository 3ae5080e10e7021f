"""Command-line surface.

Commands: synth, ingest, pretrain, adapt, evaluate, ablate, sweep,
memory dump, gradcheck.  Every command takes a single JSON config (plus
`--set key=value` overrides) and writes its artifacts and a manifest into an
output directory; the manifest embeds the fully resolved config and the
sha256 of every artifact, and is itself accepted anywhere a config is, so any
run can be reproduced bit-exactly from its manifest.

Exit codes: 0 success, 1 validation failure, 2 runtime failure; failures
print a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__


def _heavy():
    """Import the working set lazily so --help stays fast."""
    import numpy as np

    from . import adapt as ad
    from . import binio
    from . import config as cf
    from . import data as dt
    from . import evaluation as ev
    from . import graph as gr
    from . import memory as mem
    from . import model as md
    from . import pretrain as pt
    from . import synth as sy
    return locals()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(args, cfg=None) -> Path:
    out = getattr(args, "out", None) or os.environ.get("DRIFTCAST_OUT") \
        or (cfg.output_dir if cfg is not None else "runs")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir: Path, command: str, config_doc: dict,
                    overrides: list[str], artifacts: dict[str, Path]) -> Path:
    manifest = {
        "command": command,
        "config": config_doc,
        "overrides": list(overrides),
        "package_version": __version__,
        "artifacts": {name: {"path": str(p), "sha256": _sha256(p)}
                      for name, p in artifacts.items()},
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_config(args) -> "object":
    m = _heavy()
    cf = m["cf"]
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    doc = cf.apply_overrides(doc, getattr(args, "set", []) or [])
    return cf.RunConfig.from_dict(doc)


def _apply_ablation_flags(cfg, args) -> None:
    for flag, field in (("no_replay", "no_replay"), ("no_graph", "no_graph"),
                        ("no_drift", "no_drift"), ("single_model", "single_model")):
        if getattr(args, flag, False):
            setattr(cfg.adapt, field, True)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    m = _heavy()
    sy, cf = m["sy"], m["cf"]
    with open(args.spec, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "command" in doc and "config" in doc:
        doc = doc["config"]["spec"] if "spec" in doc.get("config", {}) else doc["config"]
    doc = cf.apply_overrides(doc, args.set or [])
    spec = sy.SynthSpec.from_dict(doc)
    dataset, events = sy.generate_synthetic(spec)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "site", "power"] + dataset.feature_names[1:])
        for i, t in enumerate(dataset.timestamps):
            for s, site in enumerate(dataset.site_names):
                row = [f"{t:.17g}", site, f"{dataset.targets[i, s]:.17g}"]
                row += [f"{v:.17g}" for v in dataset.features[i, s, 1:]]
                writer.writerow(row)
    sidecar = out_csv.with_suffix(".drift.json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"events": events, "seed": spec.seed, "length": spec.length},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    out_dir = out_csv.parent
    _write_manifest(out_dir, "synth", {"spec": spec.to_dict()}, args.set or [],
                    {"stream": out_csv, "drift_schedule": sidecar})
    print(f"wrote {out_csv} ({spec.sites} sites x {spec.length} steps), "
          f"{len(events)} drift events")
    return 0


def cmd_ingest(args) -> int:
    m = _heavy()
    dt = m["dt"]
    schema = args.schema
    if schema.endswith(".json"):
        with open(schema, encoding="utf-8") as fh:
            schema = json.load(fh)
    dataset = dt.ingest_csv(args.csv, schema)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.save(out)
    _write_manifest(out.parent, "ingest",
                    {"csv": str(args.csv), "schema": args.schema}, [],
                    {"dataset": out})
    print(f"ingested {dataset.n_steps} steps x {dataset.n_sites} sites "
          f"({len(dataset.segments)} segments) -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    m = _heavy()
    cf, pt, md = m["cf"], m["pt"], m["md"]
    cfg = _load_config(args)
    out_dir = _out_dir(args, cfg)
    sources, _ = cf.prepare_sources(cfg)
    if cfg.model.input_dim != sources.datasets[0].n_features:
        cfg.model.input_dim = sources.datasets[0].n_features
    result = pt.pretrain(sources, cfg.model, cfg.train)
    ckpt = out_dir / "checkpoint.bin"
    md.save_checkpoint(result.state, ckpt)
    curve = out_dir / "loss_curve.csv"
    pt.write_loss_curve(result.curve, curve)
    _write_manifest(out_dir, "pretrain", cfg.resolve(), args.set or [],
                    {"checkpoint": ckpt, "loss_curve": curve})
    last_val = result.curve[-1].val_loss if result.curve else float("nan")
    print(f"pretrained on {len(sources.datasets)} source(s); best epoch "
          f"{result.best_epoch}; final val loss {last_val:.6g}; -> {ckpt}")
    return 0


def _run_protocol_command(args, mode: str) -> int:
    m = _heavy()
    cf, ev, md = m["cf"], m["ev"], m["md"]
    cfg = _load_config(args)
    _apply_ablation_flags(cfg, args)
    out_dir = _out_dir(args, cfg)
    theta0 = md.load_checkpoint(args.checkpoint)
    target = cf.prepare_target(cfg)
    report = ev.run_stream_protocol(
        theta0, target.test, target.graph, cfg.adapt, mode=mode,
        include_warmup=getattr(args, "include_warmup", False),
    )
    report_csv = out_dir / "report.csv"
    ev.write_report_csv(report, report_csv, target.test.site_names)
    summary = out_dir / "summary.json"
    ev.write_summary_json(report, summary)
    artifacts = {"report": report_csv, "summary": summary}
    if mode == "adapt":
        diag = out_dir / "diagnostics.csv"
        ev.write_diagnostics_csv(report, diag)
        # step_us is wall clock; everything digested must be deterministic
    _write_manifest(out_dir, mode if mode == "adapt" else "evaluate",
                    cfg.resolve(), args.set or [], artifacts)
    fm = report.final
    print(f"{mode}: {report.manifest['n_scored']} scored steps | "
          f"MAE {fm.mae:.6g} RMSE {fm.rmse:.6g} MAPE {fm.mape:.6g} "
          f"sMAPE {fm.smape:.6g}")
    return 0


def cmd_adapt(args) -> int:
    return _run_protocol_command(args, "adapt")


def cmd_evaluate(args) -> int:
    return _run_protocol_command(args, "frozen")


def cmd_ablate(args) -> int:
    m = _heavy()
    cf, ev, md = m["cf"], m["ev"], m["md"]
    cfg = _load_config(args)
    out_dir = _out_dir(args, cfg)
    theta0 = md.load_checkpoint(args.checkpoint)
    target = cf.prepare_target(cfg)
    variants = tuple(args.variants.split(",")) if args.variants else ev.ABLATION_VARIANTS
    reports = ev.ablation_suite(theta0, target.test, target.graph, cfg.adapt, variants)
    path = out_dir / "ablation.csv"
    ev.write_ablation_csv(reports, path)
    artifacts = {"ablation": path}
    for variant, rep in reports.items():
        spath = out_dir / f"summary_{variant}.json"
        ev.write_summary_json(rep, spath)
        artifacts[f"summary_{variant}"] = spath
    _write_manifest(out_dir, "ablate", cfg.resolve(), args.set or [], artifacts)
    for variant, rep in reports.items():
        print(f"{variant}: MAE {rep.final.mae:.6g} RMSE {rep.final.rmse:.6g}")
    return 0


def cmd_sweep(args) -> int:
    m = _heavy()
    cf, ev, md, pt = m["cf"], m["ev"], m["md"], m["pt"]
    cfg0 = _load_config(args)
    out_dir = _out_dir(args, cfg0)
    values = [json.loads(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg0.adapt.seed]
    needs_pretrain = args.param.split(".")[0] in ("model", "train")
    theta0 = None if needs_pretrain else md.load_checkpoint(args.checkpoint)

    rows = []
    for value in values:
        for seed in seeds:
            doc = cfg0.resolve()
            cf.apply_overrides(doc, [f"{args.param}={json.dumps(value)}"])
            doc["adapt"]["seed"] = seed
            target_entry = doc["data"].get("target", {})
            if target_entry.get("kind") == "synth":
                target_entry["spec"]["seed"] = int(target_entry["spec"].get("seed", 0)) + seed
            cfg = cf.RunConfig.from_dict(doc)
            if needs_pretrain:
                sources, _ = cf.prepare_sources(cfg)
                theta = pt.pretrain(sources, cfg.model, cfg.train).state
            else:
                theta = theta0
            target = cf.prepare_target(cfg)
            rep = ev.run_stream_protocol(theta, target.test, target.graph,
                                         cfg.adapt, mode="adapt")
            fm = rep.final
            rows.append([args.param, json.dumps(value), seed,
                         f"{fm.mae:.17g}", f"{fm.rmse:.17g}",
                         f"{fm.mape:.17g}", f"{fm.smape:.17g}"])
            print(f"{args.param}={value} seed={seed}: MAE {fm.mae:.6g}")

    path = out_dir / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "seed", "mae", "rmse", "mape", "smape"])
        writer.writerows(rows)
    _write_manifest(out_dir, "sweep", cfg0.resolve(), args.set or [], {"sweep": path})
    return 0


def cmd_memory_dump(args) -> int:
    m = _heavy()
    cf, md, ad, mem, dt = m["cf"], m["md"], m["ad"], m["mem"], m["dt"]
    cfg = _load_config(args)
    out_dir = _out_dir(args, cfg)
    theta0 = md.load_checkpoint(args.checkpoint)
    target = cf.prepare_target(cfg)
    windows = dt.make_windows(target.test, cfg.model.window, cfg.model.horizon,
                              with_targets=False)
    ts = ad.TeacherStudent.from_pretrained(theta0, cfg.adapt)
    memory = mem.ReplayMemory(cfg.adapt.buffer_size, seed=cfg.adapt.seed)
    for wb in windows:
        ad.adapt_step(ts, wb, target.graph, memory, cfg.adapt)
    path = out_dir / "memory.bin"
    mem.save_snapshot(memory, path)
    _write_manifest(out_dir, "memory-dump", cfg.resolve(), args.set or [],
                    {"memory": path})
    print(f"buffer: {memory.size}/{memory.capacity} entries after "
          f"{memory.t_seen} arrivals ({memory.nbytes()} bytes) -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    m = _heavy()
    ad = m["ad"]
    failures = 0
    for seed in range(args.seeds):
        report = ad.gradcheck_adapt_loss(seed=seed, tolerance=args.tol)
        status = "PASS" if report.passed else "FAIL"
        worst = max(report.max_rel_err.values())
        print(f"seed {seed}: {status} (worst rel err {worst:.3e}, "
              f"mask {report.meta['mask_active']}/{report.meta['n_nodes']} nodes)")
        if not report.passed:
            failures += 1
            print(report.summary())
    if failures:
        raise RuntimeError(f"gradient check failed on {failures}/{args.seeds} seeds")
    print(f"all {args.seeds} seeds passed at rel tol {args.tol:g}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _config_reference() -> str:
    from .adapt import AdaptConfig, AugmentParams
    from .model import ModelConfig
    from .pretrain import TrainConfig

    lines = ["config keys and defaults:"]
    for section, cls in (("model", ModelConfig), ("train", TrainConfig),
                         ("adapt", AdaptConfig)):
        for f in dataclasses.fields(cls):
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                default = f.default_factory()
            else:
                default = "(required)"
            lines.append(f"  {section}.{f.name} = {default}")
    for f in dataclasses.fields(AugmentParams):
        lines.append(f"  adapt.augment.{f.name} = {f.default}")
    lines += [
        "  data.sources = (required for pretrain)",
        "  data.target = (required for adapt/evaluate/ablate/sweep)",
        "  data.split_ratio = 0.8",
        "  data.add_time_feature = False",
        "  graph.method = correlation",
        "  graph.rho_min = 0.3",
        "  output_dir = runs",
    ]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftcast",
        description="Continual source-free adaptation for graph-structured "
                    "energy forecasting streams.",
        epilog=_config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic stream CSV + drift sidecar")
    p.add_argument("spec", help="SynthSpec JSON (or a synth manifest)")
    p.add_argument("out", help="output CSV path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse a CSV into a dataset file")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True,
                   help="builtin schema name or a schema JSON path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    def common(p, checkpoint=True):
        p.add_argument("--config", required=True, help="run config JSON (or a manifest)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default=None, help="output dir (env DRIFTCAST_OUT)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("pretrain", help="multi-source supervised pretraining")
    common(p, checkpoint=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="stream the target with online adaptation")
    common(p)
    p.add_argument("--include-warmup", action="store_true")
    for flag in ("no-replay", "no-graph", "no-drift", "single-model"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="frozen source-only baseline on the target")
    common(p)
    p.add_argument("--include-warmup", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation variants")
    common(p)
    p.add_argument("--variants", default=None,
                   help="comma list of full,no-replay,no-graph,no-drift,single-model")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="vary one config key across values")
    common(p)
    p.add_argument("--param", required=True, help="dotted key, e.g. adapt.buffer_size")
    p.add_argument("--values", required=True, help="comma list of JSON values")
    p.add_argument("--seeds", default=None, help="comma list of paired-run seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("memory", help="replay-buffer tools")
    msub = p.add_subparsers(dest="memory_command", required=True)
    pd = msub.add_parser("dump", help="run adaptation and export the buffer")
    common(pd)
    pd.set_defaults(func=cmd_memory_dump)

    p = sub.add_parser("gradcheck", help="finite-difference check of the adaptation loss")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    m = _heavy()
    validation_errors = (
        m["cf"].ConfigError, m["dt"].DataError, m["gr"].GraphError,
        m["md"].ModelError, m["ev"].EvalError, m["binio"].FileFormatError,
        FileNotFoundError, json.JSONDecodeError, ValueError,
    )
    try:
        return args.func(args)
    except validation_errors as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
