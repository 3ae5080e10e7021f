"""Dataset ingestion, preprocessing, and rolling-window construction.

The pipeline is deliberately staged to keep statistics leak-free:

  1. ``ingest_csv`` parses and structurally assembles a Dataset: dedup,
     drop timestamps with missing targets, reconstruct the uniform grid
     (short gaps become NaN rows, long gaps break the stream into segments).
  2. ``split`` slices chronologically (80/20 by default, never shuffled).
  3. ``Preprocessor.fit`` learns imputation means, categorical modes and
     category sets, timestamp min/max, feature z-score stats, and target
     min/max from the training split only; ``transform`` applies them to any
     split.  Transforming an already-processed dataset is a no-op.
  4. ``make_windows`` produces rolling (w, N, d) input windows with the
     target at horizon h, never crossing segment boundaries.

Feature columns carry a kind tag: "numeric" (z-scored), "onehot", "time"
(normalized timestamp, may exceed 1 beyond the training range), or "flag".
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import binio

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"DCDS"
DATASET_VERSION = 1

MAX_IMPUTED_GAP = 3          # consecutive missing steps; longer gaps split segments
UNPARSEABLE_FRACTION = 0.01


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# column-level preprocessing primitives

def impute_numeric(column: np.ndarray) -> np.ndarray:
    """Replace NaNs with the mean of observed values."""
    column = np.asarray(column, dtype=np.float64)
    observed = column[~np.isnan(column)]
    if observed.size == 0:
        raise DataError("cannot impute a fully-missing numeric column")
    out = column.copy()
    out[np.isnan(out)] = observed.mean()
    return out


def impute_categorical(column: list) -> list:
    """Replace None with the modal category; ties break lexicographically."""
    observed = [v for v in column if v is not None]
    if not observed:
        raise DataError("cannot impute a fully-missing categorical column")
    counts: dict[str, int] = {}
    for v in observed:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    mode = min(k for k, c in counts.items() if c == top)
    return [mode if v is None else v for v in column]


def one_hot(values: list, categories: list[str]) -> np.ndarray:
    """(n, k) indicator matrix in the fixed category order."""
    if len(categories) == 1:
        logger.warning("one-hot of a single-category column is a constant feature")
    index = {c: i for i, c in enumerate(categories)}
    out = np.zeros((len(values), len(categories)))
    for row, v in enumerate(values):
        if v not in index:
            raise DataError(f"unseen category {v!r} (known: {categories})")
        out[row, index[v]] = 1.0
    return out


def normalize_timestamps(ts: np.ndarray, t_min: float, t_max: float) -> np.ndarray:
    """(t - min) / (max - min); values beyond the fitted range exceed [0, 1]."""
    if t_max <= t_min:
        raise DataError("constant timestamps cannot be normalized")
    return (np.asarray(ts, dtype=np.float64) - t_min) / (t_max - t_min)


# ---------------------------------------------------------------------------
# dataset container

@dataclass
class Dataset:
    timestamps: np.ndarray                  # (T,) seconds or ordinal units
    features: np.ndarray                    # (T, N, d) float64, NaN = missing
    targets: np.ndarray                     # (T, N) float64
    feature_names: list[str]
    feature_kinds: list[str]                # numeric | onehot | time | flag
    site_names: list[str]
    segments: list[tuple[int, int]]         # half-open [start, end) row ranges
    categorical: dict[str, list[list]] = field(default_factory=dict)  # name -> (T, N) nested lists
    norm: Optional[dict] = None             # set by Preprocessor.transform
    freq: float = 1.0

    @property
    def n_steps(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_sites(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[2])

    def validate_processed(self) -> None:
        if np.isnan(self.features).any() or np.isnan(self.targets).any():
            raise DataError("processed dataset still contains missing values")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")

    def denormalize_targets(self, values: np.ndarray) -> np.ndarray:
        if not self.norm or "target_min" not in self.norm:
            return values
        lo, hi = self.norm["target_min"], self.norm["target_max"]
        return values * (hi - lo) + lo

    def save(self, path) -> None:
        cats = {}
        cat_codes: dict[str, np.ndarray] = {}
        for name, rows in self.categorical.items():
            values = sorted({v for row in rows for v in row if v is not None})
            index = {v: i for i, v in enumerate(values)}
            # stored as float codes (-1 = missing); rebuilt on load
            cat_codes[name] = np.array(
                [[-1.0 if v is None else float(index[v]) for v in row] for row in rows]
            )
            cats[name] = values
        meta = {
            "kind": "dataset",
            "feature_names": self.feature_names,
            "feature_kinds": self.feature_kinds,
            "site_names": self.site_names,
            "segments": [list(s) for s in self.segments],
            "categories": cats,
            "norm": self.norm,
            "freq": self.freq,
        }
        arrays = {
            "timestamps": self.timestamps,
            "features": self.features,
            "targets": self.targets,
        }
        for name, codes in cat_codes.items():
            arrays[f"cat.{name}"] = codes
        binio.write_arrays(path, DATASET_MAGIC, DATASET_VERSION, meta, arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = binio.read_arrays(path, DATASET_MAGIC, DATASET_VERSION)
        categorical = {}
        for name, values in meta.get("categories", {}).items():
            codes = arrays[f"cat.{name}"]
            categorical[name] = [
                [None if c < 0 else values[int(c)] for c in row] for row in codes
            ]
        return cls(
            timestamps=arrays["timestamps"],
            features=arrays["features"],
            targets=arrays["targets"],
            feature_names=list(meta["feature_names"]),
            feature_kinds=list(meta["feature_kinds"]),
            site_names=list(meta["site_names"]),
            segments=[tuple(s) for s in meta["segments"]],
            categorical=categorical,
            norm=meta.get("norm"),
            freq=float(meta.get("freq", 1.0)),
        )


def split(dataset: Dataset, ratio: float = 0.8, min_rows: int = 1) -> tuple[Dataset, Dataset]:
    """Chronological split: first `ratio` of rows train, rest test."""
    if not (0.0 < ratio < 1.0):
        raise DataError("split ratio must be in (0, 1)")
    t = dataset.n_steps
    n_train = int(math.floor(t * ratio))
    if n_train < min_rows or t - n_train < min_rows:
        raise DataError(
            f"split leaves too few rows (train {n_train}, test {t - n_train}, need {min_rows})"
        )

    def _slice(lo: int, hi: int) -> Dataset:
        segs = []
        for s, e in dataset.segments:
            s2, e2 = max(s, lo), min(e, hi)
            if e2 - s2 > 0:
                segs.append((s2 - lo, e2 - lo))
        cats = {
            name: [row for row in rows[lo:hi]] for name, rows in dataset.categorical.items()
        }
        return replace(
            dataset,
            timestamps=dataset.timestamps[lo:hi],
            features=dataset.features[lo:hi],
            targets=dataset.targets[lo:hi],
            segments=segs,
            categorical=cats,
        )

    return _slice(0, n_train), _slice(n_train, t)


@dataclass
class WindowBatch:
    """One rolling window: inputs over [t-w+1, t], target at t+h (optional)."""

    inputs: np.ndarray                      # (w, N, d)
    target: Optional[np.ndarray]            # (N,) or None for unlabeled streams
    anchor_index: int
    anchor_time: float


def make_windows(dataset: Dataset, w: int, h: int, stride: int = 1,
                 with_targets: bool = True) -> list[WindowBatch]:
    """All complete windows, ordered by anchor, never crossing segments."""
    if w <= 0 or h <= 0:
        raise DataError("window length and horizon must be positive")
    if stride <= 0:
        raise DataError("stride must be positive")
    if dataset.n_steps < w + h:
        raise DataError(f"dataset has {dataset.n_steps} rows, needs at least {w + h}")
    out: list[WindowBatch] = []
    for seg_start, seg_end in dataset.segments:
        first_anchor = seg_start + w - 1
        last_anchor = seg_end - 1 - h
        for anchor in range(first_anchor, last_anchor + 1, stride):
            target = dataset.targets[anchor + h] if with_targets else None
            out.append(
                WindowBatch(
                    inputs=dataset.features[anchor - w + 1: anchor + 1],
                    target=target,
                    anchor_index=anchor,
                    anchor_time=float(dataset.timestamps[anchor]),
                )
            )
    return out


# ---------------------------------------------------------------------------
# fitted preprocessing

@dataclass
class Preprocessor:
    add_time_feature: bool = True
    fitted: Optional[dict] = None

    def fit(self, train: Dataset) -> "Preprocessor":
        feats = train.features
        numeric_means = []
        for j in range(train.n_features):
            col = feats[:, :, j].reshape(-1)
            observed = col[~np.isnan(col)]
            if observed.size == 0:
                raise DataError(f"feature {train.feature_names[j]!r} fully missing in training data")
            numeric_means.append(float(observed.mean()))
        cat_stats = {}
        for name, rows in train.categorical.items():
            flat = [v for row in rows for v in row]
            observed = [v for v in flat if v is not None]
            if not observed:
                raise DataError(f"categorical {name!r} fully missing in training data")
            counts: dict[str, int] = {}
            for v in observed:
                counts[v] = counts.get(v, 0) + 1
            top = max(counts.values())
            mode = min(k for k, c in counts.items() if c == top)
            cat_stats[name] = {"categories": sorted(counts), "mode": mode}
        t_min, t_max = float(train.timestamps.min()), float(train.timestamps.max())
        if t_max <= t_min:
            raise DataError("constant timestamps in training data")

        # z-score stats over imputed training features
        imputed = feats.copy()
        for j, m in enumerate(numeric_means):
            col = imputed[:, :, j]
            col[np.isnan(col)] = m
        mean = imputed.reshape(-1, train.n_features).mean(axis=0)
        std = imputed.reshape(-1, train.n_features).std(axis=0)
        std[std == 0.0] = 1.0

        tgt = train.targets[~np.isnan(train.targets)]
        if tgt.size == 0:
            raise DataError("no observed targets in training data")
        target_min, target_max = float(tgt.min()), float(tgt.max())
        if target_max <= target_min:
            raise DataError("constant training targets cannot be min-max scaled")

        self.fitted = {
            "numeric_means": numeric_means,
            "categorical": cat_stats,
            "t_min": t_min,
            "t_max": t_max,
            "feature_mean": mean.tolist(),
            "feature_std": std.tolist(),
            "target_min": target_min,
            "target_max": target_max,
        }
        return self

    def transform(self, dataset: Dataset) -> Dataset:
        if self.fitted is None:
            raise DataError("Preprocessor.transform called before fit")
        if dataset.norm is not None:
            return dataset  # idempotent: already processed
        st = self.fitted
        feats = dataset.features.copy()
        for j, m in enumerate(st["numeric_means"]):
            col = feats[:, :, j]
            col[np.isnan(col)] = m
        mean = np.array(st["feature_mean"])
        std = np.array(st["feature_std"])
        scaled = feats.copy()
        for j, kind in enumerate(dataset.feature_kinds):
            if kind == "numeric":
                scaled[:, :, j] = (feats[:, :, j] - mean[j]) / std[j]
        columns = [scaled]
        names = list(dataset.feature_names)
        kinds = list(dataset.feature_kinds)

        for name, rows in dataset.categorical.items():
            cats = st["categorical"][name]["categories"]
            mode = st["categorical"][name]["mode"]
            filled = [[mode if v is None else v for v in row] for row in rows]
            t, n = len(filled), dataset.n_sites
            flat = [v for row in filled for v in row]
            hot = one_hot(flat, cats).reshape(t, n, len(cats))
            columns.append(hot)
            names.extend(f"{name}={c}" for c in cats)
            kinds.extend("onehot" for _ in cats)

        if self.add_time_feature:
            tnorm = normalize_timestamps(dataset.timestamps, st["t_min"], st["t_max"])
            columns.append(np.tile(tnorm[:, None, None], (1, dataset.n_sites, 1)))
            names.append("time")
            kinds.append("time")

        lo, hi = st["target_min"], st["target_max"]
        targets = (dataset.targets - lo) / (hi - lo)
        out = replace(
            dataset,
            features=np.concatenate(columns, axis=-1),
            targets=targets,
            feature_names=names,
            feature_kinds=kinds,
            categorical={},
            norm={
                "target_min": lo,
                "target_max": hi,
                "t_min": st["t_min"],
                "t_max": st["t_max"],
                "feature_mean": st["feature_mean"],
                "feature_std": st["feature_std"],
            },
        )
        out.validate_processed()
        return out


# ---------------------------------------------------------------------------
# CSV ingestion

BUILTIN_SCHEMAS: dict[str, dict] = {
    # GEFCom2012 wind track power file: hourly, wide per-farm columns.
    # NWP forecast features live in separate per-farm files; merge them into a
    # long CSV and use a custom schema to include them (see docs/DATASETS.md).
    "gefcom2012-wind": {
        "format": "wide",
        "timestamp": "date",
        "timestamp_format": "%Y%m%d%H",
        "wide_sites": {f"wp{i}": f"wf{i}" for i in range(1, 8)},
        "numeric": [],
        "categorical": [],
        "duplicate_policy": "first",
    },
    # Solar plant generation file: 15-minute, long by inverter; inverters are
    # averaged per plant per timestamp (duplicate_policy "mean").
    "solar-pv": {
        "format": "long",
        "timestamp": "DATE_TIME",
        "timestamp_format": "%d-%m-%Y %H:%M",
        "site": "PLANT_ID",
        "target": "AC_POWER",
        "numeric": ["DC_POWER"],
        "categorical": [],
        "duplicate_policy": "mean",
    },
    # Single-turbine SCADA log: 10-minute resolution, one site.
    "wind-scada": {
        "format": "long",
        "timestamp": "Date/Time",
        "timestamp_format": "%d %m %Y %H:%M",
        "site": None,
        "target": "LV ActivePower (kW)",
        "numeric": ["Wind Speed (m/s)", "Wind Direction (°)"],
        "categorical": [],
        "duplicate_policy": "first",
    },
}


def _parse_time(raw: str, fmt: str) -> float:
    if fmt == "epoch":
        return float(raw)
    dt = datetime.strptime(raw.strip(), fmt)
    return dt.replace(tzinfo=timezone.utc).timestamp()


def ingest_csv(path, schema) -> Dataset:
    """Parse a CSV into a structurally complete Dataset (pre-normalization).

    ``schema`` is a builtin name or a dict following the builtin shape.
    Timestamps must be non-decreasing after deduplication; rows whose target
    is missing are dropped; gaps of at most three steps are kept as NaN rows
    for later imputation, longer gaps split the stream into segments.
    """
    if isinstance(schema, str):
        if schema not in BUILTIN_SCHEMAS:
            raise DataError(f"unknown schema {schema!r} (builtins: {sorted(BUILTIN_SCHEMAS)})")
        schema = BUILTIN_SCHEMAS[schema]
    fmt = schema.get("format", "long")
    ts_col = schema["timestamp"]
    ts_fmt = schema.get("timestamp_format", "epoch")
    policy = schema.get("duplicate_policy", "first")

    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")

    bad = 0
    if fmt == "wide":
        site_cols = schema["wide_sites"]
        sites = list(site_cols.values())
        records: dict[float, dict] = {}
        order: list[float] = []
        for row in rows:
            try:
                t = _parse_time(row[ts_col], ts_fmt)
                vals = {}
                for col in site_cols:
                    raw = (row.get(col) or "").strip()
                    vals[col] = float(raw) if raw != "" else np.nan
            except (ValueError, KeyError):
                bad += 1
                continue
            if t in records:
                continue  # duplicate timestamp: keep first
            records[t] = vals
            order.append(t)
        _check_bad(bad, len(rows), path)
        _check_monotone(order, path)
        times = np.array(order)
        target = np.array([[records[t][c] for c in site_cols] for t in order])
        feats = target[:, :, None].copy()
        fnames, fkinds = ["power"], ["numeric"]
        cat_data: dict[str, list[list]] = {}
    else:
        site_col = schema.get("site")
        target_col = schema["target"]
        numeric_cols = list(schema.get("numeric", []))
        cat_cols = list(schema.get("categorical", []))
        parsed: list[tuple[float, str, float, list, list]] = []
        for row in rows:
            try:
                t = _parse_time(row[ts_col], ts_fmt)
                site = str(row[site_col]) if site_col else "site0"
                raw_y = (row.get(target_col) or "").strip()
                y = float(raw_y) if raw_y != "" else np.nan
                nums = []
                for col in numeric_cols:
                    raw = (row.get(col) or "").strip()
                    nums.append(float(raw) if raw != "" else np.nan)
                cats = [(row.get(col) or "").strip() or None for col in cat_cols]
            except (ValueError, KeyError):
                bad += 1
                continue
            parsed.append((t, site, y, nums, cats))
        _check_bad(bad, len(rows), path)
        sites = sorted({p[1] for p in parsed})
        site_idx = {s: i for i, s in enumerate(sites)}
        cells: dict[tuple[float, int], list] = {}
        order = []
        seen_t = set()
        prev_t = None
        for t, site, y, nums, cats in parsed:
            if prev_t is not None and t < prev_t:
                raise DataError(f"{path}: non-monotone timestamps after dedup (sort the file)")
            prev_t = t
            if t not in seen_t:
                seen_t.add(t)
                order.append(t)
            key = (t, site_idx[site])
            if key in cells:
                if policy == "mean":
                    cells[key].append((y, nums, cats))
                # policy "first": drop the duplicate record
            else:
                cells[key] = [(y, nums, cats)]
        times = np.array(order)
        n = len(sites)
        target = np.full((len(order), n), np.nan)
        feats_num = np.full((len(order), n, len(numeric_cols)), np.nan)
        cat_data = {c: [[None] * n for _ in order] for c in cat_cols}
        t_index = {t: i for i, t in enumerate(order)}
        for (t, si), entries in cells.items():
            ti = t_index[t]
            ys = [e[0] for e in entries if not np.isnan(e[0])]
            target[ti, si] = float(np.mean(ys)) if ys else np.nan
            for j in range(len(numeric_cols)):
                vs = [e[1][j] for e in entries if not np.isnan(e[1][j])]
                feats_num[ti, si, j] = float(np.mean(vs)) if vs else np.nan
            for cj, c in enumerate(cat_cols):
                vals = [e[2][cj] for e in entries if e[2][cj] is not None]
                cat_data[c][ti][si] = vals[0] if vals else None
        feats = np.concatenate([target[:, :, None], feats_num], axis=-1)
        fnames = ["power"] + numeric_cols
        fkinds = ["numeric"] * (1 + len(numeric_cols))

    # drop timestamps where any site's target is missing
    keep = ~np.isnan(target).any(axis=1)
    n_dropped = int((~keep).sum())
    if n_dropped:
        logger.info("dropped %d timestamps with missing targets", n_dropped)
    times, target, feats = times[keep], target[keep], feats[keep]
    cat_data = {c: [row for row, k in zip(rows_, keep) if k] for c, rows_ in cat_data.items()}
    if times.size < 2:
        raise DataError(f"{path}: fewer than two usable timestamps")

    return _regrid(times, feats, target, fnames, fkinds, sites, cat_data, path)


def _check_bad(bad: int, total: int, path) -> None:
    if bad > max(1, UNPARSEABLE_FRACTION * total):
        raise DataError(f"{path}: {bad}/{total} unparseable rows exceeds the 1% threshold")
    if bad:
        logger.warning("%s: skipped %d unparseable rows", path, bad)


def _check_monotone(order: list, path) -> None:
    arr = np.asarray(order)
    if np.any(np.diff(arr) < 0):
        raise DataError(f"{path}: non-monotone timestamps after dedup (sort the file)")


def _regrid(times, feats, target, fnames, fkinds, sites, cat_data, path) -> Dataset:
    """Reconstruct a uniform grid; NaN-fill short gaps, segment long ones."""
    diffs = np.diff(times)
    if np.any(diffs <= 0):
        raise DataError(f"{path}: duplicate or non-increasing timestamps survived dedup")
    # gaps only lengthen diffs, so the smallest diff is the base frequency
    freq = float(diffs.min())
    rows_t = [times[0]]
    rows_f = [feats[0]]
    rows_y = [target[0]]
    rows_c = {c: [cat_data[c][0]] for c in cat_data}
    segments: list[tuple[int, int]] = []
    seg_start = 0
    n = len(sites)
    for i in range(1, len(times)):
        steps = int(round((times[i] - times[i - 1]) / freq))
        missing = steps - 1
        if missing > 0:
            if missing <= MAX_IMPUTED_GAP:
                for k in range(1, steps):
                    rows_t.append(times[i - 1] + k * freq)
                    rows_f.append(np.full_like(feats[0], np.nan))
                    rows_y.append(np.full(n, np.nan))
                    for c in rows_c:
                        rows_c[c].append([None] * n)
            else:
                segments.append((seg_start, len(rows_t)))
                seg_start = len(rows_t)
        rows_t.append(times[i])
        rows_f.append(feats[i])
        rows_y.append(target[i])
        for c in rows_c:
            rows_c[c].append(cat_data[c][i])
    segments.append((seg_start, len(rows_t)))

    timestamps = np.array(rows_t)
    features = np.stack(rows_f)
    targets = np.stack(rows_y)
    # gap targets get the stream's mean so the tensor is complete; features are
    # imputed later from training statistics
    gap_rows = np.isnan(targets).any(axis=1)
    if gap_rows.any():
        col_means = np.nanmean(targets, axis=0)
        for si in range(n):
            col = targets[:, si]
            col[np.isnan(col)] = col_means[si]
    return Dataset(
        timestamps=timestamps,
        features=features,
        targets=targets,
        feature_names=fnames,
        feature_kinds=fkinds,
        site_names=list(sites),
        segments=segments,
        categorical={c: rows for c, rows in rows_c.items()},
        freq=freq,
    )
