"""Run configuration: one JSON document driving every CLI command.

Layout (all sections optional unless a command needs them):

    {
      "schema_version": 1,
      "model":  { ... ModelConfig fields ... },
      "train":  { ... TrainConfig fields ... },
      "adapt":  { ... AdaptConfig fields, "augment" nested ... },
      "data": {
        "sources": [ {"kind": "synth", "spec": {...}}
                     | {"kind": "csv", "path": "...", "schema": "..."}
                     | {"kind": "dataset", "path": "..."} , ... ],
        "target":  { same shape as one source entry },
        "split_ratio": 0.8,
        "add_time_feature": false
      },
      "graph":  { "method": "correlation" | "distance" | "complete" | "single",
                  "rho_min": 0.3, "kappa": ..., "radius": ..., "coords": "..." },
      "output_dir": "runs"
    }

Unknown keys anywhere are rejected.  ``resolve()`` folds every default back
into the document, and its digest pins a run; a manifest produced by any
command embeds the resolved config and is itself accepted wherever a config
is, which is what makes re-runs bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import data as dt
from . import graph as gr
from .adapt import AdaptConfig
from .model import ModelConfig
from .pretrain import SourceSet, TrainConfig
from .synth import SynthSpec, generate_synthetic


class ConfigError(ValueError):
    pass


_SECTION_KEYS = {"schema_version", "model", "train", "adapt", "data", "graph", "output_dir"}
_DATA_KEYS = {"sources", "target", "split_ratio", "add_time_feature"}
_ENTRY_KEYS = {"kind", "spec", "path", "schema"}
_GRAPH_KEYS = {"method", "rho_min", "kappa", "radius", "coords"}

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    adapt: AdaptConfig
    data: dict
    graph: dict
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if "command" in doc and "config" in doc:
            doc = doc["config"]  # a manifest wraps the resolved config
        unknown = set(doc) - _SECTION_KEYS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version}, expected {SCHEMA_VERSION}")

        model_doc = doc.get("model")
        if model_doc is None:
            raise ConfigError("config needs a model section")
        try:
            model = ModelConfig.from_dict(model_doc)
        except TypeError as exc:
            raise ConfigError(f"bad model section: {exc}") from None

        train_doc = dict(doc.get("train", {}))
        try:
            train = TrainConfig(**train_doc)
            train.validate()
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from None

        adapt = AdaptConfig.from_dict(doc.get("adapt", {}))

        data = dict(doc.get("data", {}))
        unknown = set(data) - _DATA_KEYS
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        data.setdefault("split_ratio", 0.8)
        data.setdefault("add_time_feature", False)
        for entry in list(data.get("sources", [])) + ([data["target"]] if data.get("target") else []):
            bad = set(entry) - _ENTRY_KEYS
            if bad:
                raise ConfigError(f"unknown data entry keys: {sorted(bad)}")

        graph_doc = dict(doc.get("graph", {}))
        unknown = set(graph_doc) - _GRAPH_KEYS
        if unknown:
            raise ConfigError(f"unknown graph keys: {sorted(unknown)}")
        graph_doc.setdefault("method", "correlation")
        graph_doc.setdefault("rho_min", 0.3)

        return cls(model=model, train=train, adapt=adapt, data=data,
                   graph=graph_doc, output_dir=doc.get("output_dir", "runs"))

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def resolve(self) -> dict:
        """Full document with every default made explicit."""
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "adapt": self.adapt.to_dict(),
            "data": self.data,
            "graph": self.graph,
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.resolve(), sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()[:16]


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """`--set dotted.key=value` assignments; values parse as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {part!r} of {key!r}")
        node[parts[-1]] = value
    return doc


# ---------------------------------------------------------------------------
# dataset / graph assembly

def load_entry(entry: dict) -> tuple[dt.Dataset, list[dict]]:
    """One data entry -> (dataset, drift events if synthetic)."""
    kind = entry.get("kind")
    if kind == "synth":
        spec = SynthSpec.from_dict(entry["spec"])
        return generate_synthetic(spec)
    if kind == "csv":
        return dt.ingest_csv(entry["path"], entry.get("schema", "wind-scada")), []
    if kind == "dataset":
        return dt.Dataset.load(entry["path"]), []
    raise ConfigError(f"unknown data entry kind {kind!r}")


def build_graph(graph_cfg: dict, train_split: dt.Dataset) -> gr.SiteGraph:
    """Graph for one domain; correlation graphs use only the training rows."""
    method = graph_cfg.get("method", "correlation")
    names = train_split.site_names
    n = len(names)
    if n == 1 or method == "single":
        return gr.single_node_graph(names[0])
    if method == "correlation":
        g = gr.build_adjacency_correlation(train_split.targets, names,
                                           rho_min=graph_cfg.get("rho_min", 0.3))
    elif method == "distance":
        coords, coord_names = gr.load_coords_csv(graph_cfg["coords"])
        if coord_names != names:
            raise ConfigError("coordinate file node order must match the dataset sites")
        g = gr.build_adjacency_distance(coords, names, kappa=graph_cfg["kappa"],
                                        radius=graph_cfg["radius"])
    elif method == "complete":
        g = gr.SiteGraph(names, np.ones((n, n)) - np.eye(n))
    else:
        raise ConfigError(f"unknown graph method {method!r}")
    return gr.normalize(g)


@dataclass
class PreparedDomain:
    train: dt.Dataset
    test: dt.Dataset
    graph: gr.SiteGraph
    events: list[dict]


def prepare_domain(entry: dict, cfg: RunConfig) -> PreparedDomain:
    """Load, split chronologically, fit preprocessing on train, build graph."""
    ds, events = load_entry(entry)
    w_h = cfg.model.window + cfg.model.horizon
    train, test = dt.split(ds, cfg.data.get("split_ratio", 0.8), min_rows=w_h)
    pre = dt.Preprocessor(add_time_feature=cfg.data.get("add_time_feature", False)).fit(train)
    ptrain, ptest = pre.transform(train), pre.transform(test)
    graph = build_graph(cfg.graph, train)
    return PreparedDomain(train=ptrain, test=ptest, graph=graph, events=events)


def prepare_sources(cfg: RunConfig) -> tuple[SourceSet, list[PreparedDomain]]:
    entries = cfg.data.get("sources", [])
    if not entries:
        raise ConfigError("config data.sources is empty")
    domains = [prepare_domain(e, cfg) for e in entries]
    sources = SourceSet(
        datasets=[d.train for d in domains],
        graphs=[d.graph for d in domains],
        names=[f"source{i}" for i in range(len(domains))],
    )
    return sources, domains


def prepare_target(cfg: RunConfig) -> PreparedDomain:
    entry = cfg.data.get("target")
    if not entry:
        raise ConfigError("config data.target is missing")
    return prepare_domain(entry, cfg)
