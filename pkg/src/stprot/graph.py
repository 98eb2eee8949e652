"""Feature graphs over spots: exact KNN in embedding space and a spatial radius graph.

Edges are directed ``(src, dst)`` pairs meaning ``dst`` aggregates from
``src``. Every graph carries all self-loops.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import Neighbors
from .errors import KTooLarge, ShapeMismatch

# Upper bound on the floats held by one distance block.
_BLOCK_FLOATS = 4_000_000


@dataclass(frozen=True)
class FeatureGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int64, unique, lexicographically sorted
    kind: str
    param: float

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n_nodes):
            raise ShapeMismatch("edge endpoint out of range")
        order = np.lexsort((e[:, 1], e[:, 0]))
        e = e[order]
        if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
            raise ShapeMismatch("duplicate edges")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _pairwise_sq_dist_block(points: np.ndarray, rows: slice) -> np.ndarray:
    diff = points[rows, None, :] - points[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def _row_blocks(n: int, d: int):
    step = max(1, _BLOCK_FLOATS // max(1, n * d))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def build_knn_graph(embedding: np.ndarray, k: int = 3) -> FeatureGraph:
    """Directed KNN graph: each node receives edges from its ``k`` nearest other nodes.

    Exact brute force over Euclidean distance; distance ties go to the smaller
    node index.
    """
    x = np.asarray(embedding, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("embedding must be 2-D")
    n = x.shape[0]
    if k >= n:
        raise KTooLarge(f"k={k} must be smaller than the number of spots ({n})")
    if k < 1:
        raise KTooLarge(f"k must be >= 1, got {k}")
    if not np.all(np.isfinite(x)):
        raise ShapeMismatch("embedding contains non-finite values")
    nearest = np.empty((n, k), dtype=np.int64)
    for rows in _row_blocks(n, x.shape[1]):
        d2 = _pairwise_sq_dist_block(x, rows)
        idx = np.arange(rows.start, rows.stop)
        d2[idx - rows.start, idx] = np.inf
        # stable sort keeps index order among equal distances
        nearest[rows] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dst = np.repeat(np.arange(n), k)
    edges = np.concatenate(
        [np.stack([nearest.ravel(), dst], axis=1), np.stack([np.arange(n)] * 2, axis=1)]
    )
    return FeatureGraph(n_nodes=n, edges=edges, kind="knn", param=float(k))


def build_spatial_graph(coords: np.ndarray, r: float = 2.0) -> FeatureGraph:
    """Undirected radius graph: ``{i, j}`` is an edge iff ``dist(i, j) < r``."""
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeMismatch("coords must be 2-D")
    if r < 0:
        raise ValueError("radius must be >= 0")
    n = c.shape[0]
    parts = [np.stack([np.arange(n)] * 2, axis=1)]
    for rows in _row_blocks(n, c.shape[1]):
        d2 = _pairwise_sq_dist_block(c, rows)
        i, j = np.nonzero(d2 < r * r)
        i = i + rows.start
        keep = i != j
        parts.append(np.stack([i[keep], j[keep]], axis=1))
    return FeatureGraph(n_nodes=n, edges=np.concatenate(parts), kind="spatial_radius", param=float(r))


def neighbor_lists(g: FeatureGraph) -> Neighbors:
    """CSR in-neighbor lists, each sorted ascending."""
    src, dst = g.edges[:, 0], g.edges[:, 1]
    order = np.lexsort((src, dst))
    counts = np.bincount(dst, minlength=g.n_nodes)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return Neighbors(offsets, src[order])


def write_edge_csv(g: FeatureGraph, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        w.writerows(g.edges.tolist())
