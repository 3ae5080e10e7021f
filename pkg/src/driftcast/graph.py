"""Site graph construction and normalization.

Sites (wind farms, PV plants, turbines) become nodes; edge weights come from
either a distance kernel over coordinates or thresholded Pearson correlation
of historical power profiles.  Two normalizations are kept on the graph:

  * ``alpha``: row-stochastic weights used by message passing
    (alpha[v, u] = A[v, u] / sum of A[v, :] over neighbors of v);
  * ``reg_weights``: symmetric weights A[u, v] / sqrt(d_u * d_v) used by the
    embedding-smoothness penalty, which needs nonnegative symmetric weights.

The adjacency stores no self-loops; the model adds a learned self term.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass
class SiteGraph:
    """Immutable weighted site graph. Mutating arrays after build is a bug."""

    node_names: list[str]
    adjacency: np.ndarray                 # (N, N) symmetric, zero diagonal
    alpha: Optional[np.ndarray] = None    # (N, N) row-stochastic over neighbors
    reg_weights: Optional[np.ndarray] = None  # (N, N) symmetric-normalized
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    def edges(self) -> list[tuple[int, int, float]]:
        """Unordered edges (u < v) with raw adjacency weight."""
        out = []
        n = self.n_nodes
        for u in range(n):
            for v in range(u + 1, n):
                if self.adjacency[u, v] > 0.0:
                    out.append((u, v, float(self.adjacency[u, v])))
        return out

    def component_count(self) -> int:
        n = self.n_nodes
        seen = [False] * n
        comps = 0
        for start in range(n):
            if seen[start]:
                continue
            comps += 1
            stack = [start]
            seen[start] = True
            while stack:
                v = stack.pop()
                for u in np.nonzero(self.adjacency[v] > 0.0)[0]:
                    if not seen[u]:
                        seen[u] = True
                        stack.append(int(u))
        return comps


def _validate_adjacency(A: np.ndarray) -> None:
    if not np.all(np.isfinite(A)):
        raise GraphError("adjacency contains non-finite weights")
    if np.any(A < 0.0):
        raise GraphError("adjacency weights must be nonnegative")
    if not np.allclose(A, A.T):
        raise GraphError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0.0):
        raise GraphError("adjacency must have a zero diagonal (no stored self-loops)")


def build_adjacency_distance(
    coords: np.ndarray, node_names: list[str], kappa: float, radius: float
) -> SiteGraph:
    """Gaussian distance kernel with hard cutoff.

    A[u, v] = exp(-dist(u, v)^2 / kappa) when dist <= radius, else 0.
    Duplicate coordinates are allowed (distance 0 gives weight 1).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if kappa <= 0 or radius <= 0:
        raise GraphError("kappa and radius must be positive")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise GraphError("coords must be (N, 2)")
    if not np.all(np.isfinite(coords)):
        raise GraphError("non-finite coordinate")
    n = coords.shape[0]
    if n < 1 or len(node_names) != n:
        raise GraphError("need one name per coordinate row, N >= 1")
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    A = np.exp(-(dist ** 2) / kappa) * (dist <= radius)
    np.fill_diagonal(A, 0.0)
    A = (A + A.T) / 2.0  # exact symmetry against fp asymmetries
    _validate_adjacency(A)
    g = SiteGraph(list(node_names), A, meta={"method": "distance", "kappa": kappa, "radius": radius})
    g.meta["components"] = g.component_count()
    return g


def build_adjacency_correlation(
    history: np.ndarray, node_names: list[str], rho_min: float = 0.3
) -> SiteGraph:
    """Pearson correlation of historical power profiles, negative values clamped.

    A[u, v] = max(0, corr(u, v)) if corr >= rho_min else 0.  The smoothness
    penalty needs nonnegative weights, so anti-correlated pairs get no edge.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2:
        raise GraphError("history must be (T, N)")
    T, n = history.shape
    if T < 3:
        raise GraphError("need at least 3 observations for a correlation graph")
    if len(node_names) != n:
        raise GraphError("need one name per history column")
    if np.all(history == 0.0):
        raise GraphError("all-zero history")
    std = history.std(axis=0)
    constant = std == 0.0
    if np.any(constant):
        logger.warning(
            "constant power profile for %s: zero edges assigned",
            [node_names[i] for i in np.nonzero(constant)[0]],
        )
    centered = history - history.mean(axis=0)
    denom = np.outer(std, std) * T
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (centered.T @ centered) / denom
    corr[~np.isfinite(corr)] = 0.0
    A = np.where(corr >= rho_min, np.maximum(corr, 0.0), 0.0)
    np.fill_diagonal(A, 0.0)
    A = np.minimum((A + A.T) / 2.0, 1.0)
    _validate_adjacency(A)
    g = SiteGraph(list(node_names), A, meta={"method": "correlation", "rho_min": rho_min})
    g.meta["components"] = g.component_count()
    return g


def normalize(graph: SiteGraph) -> SiteGraph:
    """Populate alpha (row-stochastic) and reg_weights (symmetric) from A."""
    A = graph.adjacency
    row_sums = A.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(row_sums > 0.0, A / row_sums, 0.0)
    deg = A.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_sqrt = np.where(deg > 0.0, 1.0 / np.sqrt(deg), 0.0)
    reg = A * np.outer(inv_sqrt, inv_sqrt)
    return SiteGraph(graph.node_names, A, alpha=alpha, reg_weights=reg, meta=dict(graph.meta))


def single_node_graph(name: str = "site0") -> SiteGraph:
    """The N=1 degenerate case: no edges, every graph term vanishes."""
    g = SiteGraph([name], np.zeros((1, 1)), meta={"method": "single"})
    return normalize(g)


def load_coords_csv(path) -> tuple[np.ndarray, list[str]]:
    """Graph spec file: header `node,x,y`."""
    names: list[str] = []
    rows: list[tuple[float, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["node", "x", "y"]:
            raise GraphError(f"expected header node,x,y in {path}")
        for row in reader:
            names.append(row["node"])
            rows.append((float(row["x"]), float(row["y"])))
    if not names:
        raise GraphError(f"no nodes in {path}")
    return np.array(rows, dtype=np.float64), names


def dump_edges_csv(graph: SiteGraph, path) -> None:
    """Serialize as an edge list `u,v,weight` (node names, unordered pairs)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "weight"])
        for u, v, w in graph.edges():
            writer.writerow([graph.node_names[u], graph.node_names[v], f"{w:.17g}"])
