"""Drift-aware replay: reservoir buffer, sampling, replay loss.

The buffer keeps a uniform random sample of the target stream (classic
algorithm-R reservoir: arrival t enters with probability min(1, B/t) and
replaces a uniformly chosen slot).  Windows are stored as float32 to keep the
footprint near the B*w*N*d budget; they come back as float64 constants when
replayed.  Each entry caches the teacher's mean embedding of the stored
window, refreshed whenever the entry is sampled for replay, so the drift
score costs O(B) per step instead of B forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import binio

SNAPSHOT_MAGIC = b"DCMB"
SNAPSHOT_VERSION = 1


@dataclass
class MemoryEntry:
    window: np.ndarray                  # (w, N, d) float32 storage
    inserted_at: int
    emb_mean: Optional[np.ndarray]      # (d_z,) float64 cached teacher embedding mean
    refreshed_at: int


@dataclass
class ReplayMemory:
    capacity: int
    seed: int = 0
    entries: list[MemoryEntry] = field(default_factory=list)
    t_seen: int = 0
    rng: np.random.Generator = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be nonnegative")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def size(self) -> int:
        return len(self.entries)

    def nbytes(self) -> int:
        total = 0
        for e in self.entries:
            total += e.window.nbytes
            if e.emb_mean is not None:
                total += e.emb_mean.nbytes
        return total

    def cached_embedding_mean(self) -> Optional[np.ndarray]:
        cached = [e.emb_mean for e in self.entries if e.emb_mean is not None]
        if not cached:
            return None
        return np.mean(np.stack(cached), axis=0)


def reservoir_insert(
    memory: ReplayMemory, window: np.ndarray, t: int,
    emb_mean: Optional[np.ndarray] = None,
) -> bool:
    """Offer arrival t (1-based, strictly increasing) to the reservoir.

    Returns True when stored.  One uniform draw j in [0, t) decides both
    acceptance (j < B) and the replaced slot (j), which realizes
    "insert with probability B/t, replace a uniform entry".
    """
    if t <= memory.t_seen:
        raise ValueError(f"arrival counter must increase (got {t} after {memory.t_seen})")
    memory.t_seen = t
    if memory.capacity == 0:
        return False
    stored = np.asarray(window, dtype=np.float32)
    emb = None if emb_mean is None else np.asarray(emb_mean, dtype=np.float64).copy()
    if memory.size < memory.capacity:
        memory.entries.append(MemoryEntry(stored, t, emb, t))
        return True
    j = int(memory.rng.integers(0, t))
    if j < memory.capacity:
        memory.entries[j] = MemoryEntry(stored, t, emb, t)
        return True
    return False


def sample_replay(memory: ReplayMemory, batch_size: int, seed: int) -> list[tuple[int, MemoryEntry]]:
    """Uniform without replacement; deterministic for a given seed."""
    if batch_size < 0:
        raise ValueError("batch_size must be nonnegative")
    n = min(batch_size, memory.size)
    if n == 0:
        return []
    idx = np.random.default_rng(seed).choice(memory.size, size=n, replace=False)
    return [(int(i), memory.entries[int(i)]) for i in idx]


def simulate_reservoir(capacity: int, arrivals: int, trials: int, seed: int = 0) -> np.ndarray:
    """Monte Carlo harness for the retention law, vectorized across trials.

    Applies the same decision rule as reservoir_insert (one uniform draw per
    arrival; j < capacity replaces slot j) and returns a (trials, capacity)
    matrix of the arrival ids resting in each slot at the end.
    """
    rng = np.random.default_rng(seed)
    buf = np.tile(np.arange(1, capacity + 1, dtype=np.int64), (trials, 1))
    for t in range(capacity + 1, arrivals + 1):
        j = rng.integers(0, t, size=trials)
        hit = j < capacity
        buf[hit, j[hit]] = t
    return buf


def replay_loss(student, teacher, windows: list[np.ndarray], graph, config, seed: int = 0) -> float:
    """Consistency + graph penalty over replayed windows (fresh views each).

    Mirrors the per-window losses the adaptation step applies to its replay
    batch; kept callable standalone so it can be checked against direct loss
    evaluations.  Returns 0.0 on an empty batch.
    """
    from . import adapt as _adapt  # local import: adapt owns the loss math
    from . import model as md

    if not windows:
        return 0.0
    total = 0.0
    for i, win in enumerate(windows):
        view1, view2 = _adapt.augment(np.asarray(win, dtype=np.float64),
                                      config.augment, seed + i)
        part = _adapt.consistency_loss(student, teacher, view1, view2, graph, config)
        if not config.no_graph:
            out = md.forward(student, view2, graph, mode="eval")
            part += _adapt.graph_regularizer(out.embeddings.data[0], graph)
        total += part
    return total / len(windows)


def save_snapshot(memory: ReplayMemory, path) -> None:
    """Read-only export of the buffer for offline inspection."""
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "kind": "replay-memory",
        "capacity": memory.capacity,
        "t_seen": memory.t_seen,
        "entries": [
            {"inserted_at": e.inserted_at, "refreshed_at": e.refreshed_at,
             "has_embedding": e.emb_mean is not None}
            for e in memory.entries
        ],
    }
    for i, e in enumerate(memory.entries):
        arrays[f"window.{i}"] = e.window.astype(np.float64)
        if e.emb_mean is not None:
            arrays[f"emb.{i}"] = e.emb_mean
    binio.write_arrays(path, SNAPSHOT_MAGIC, SNAPSHOT_VERSION, meta, arrays)
