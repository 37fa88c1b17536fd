"""Undirected weighted item co-occurrence graph with CSR adjacency.

Two items are connected when they appear together in a session; each session
contributes each unordered pair of distinct items once (duplicates collapse
to the item set first). Edge weights are co-occurrence counts normalized by
the global maximum count, so weights live in (0, 1] and the strongest edge
is exactly 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateGraphError
from .sessiondata import ItemCatalog, SessionCorpus

_BIN_MAGIC = b"COG1"


@dataclass
class CoGraph:
    """CSR adjacency over n nodes; both directions of every edge stored,
    neighbor lists sorted ascending."""

    n: int
    indptr: np.ndarray         # (n+1,) int64
    indices: np.ndarray        # (nnz,) int64, sorted within each row
    weights: np.ndarray        # (nnz,) float64 in (0, 1]
    c_max: int = 0
    X: np.ndarray | None = None

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.indices.shape[0] // 2

    def degree(self, node: int) -> int:
        return int(self.indptr[node + 1] - self.indptr[node])

    def neighbors(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def edge_triples(self) -> list[tuple[int, int, float]]:
        """Sorted (i, j, w) with i < j, one per undirected edge."""
        out = []
        for i in range(self.n):
            nbrs, ws = self.neighbors(i)
            for j, w in zip(nbrs, ws):
                if i < j:
                    out.append((int(i), int(j), float(w)))
        return out

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dst, src, weight) arrays sorted by (dst, src): row i aggregates
        from its sorted neighbor list."""
        dst = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        return dst, self.indices.copy(), self.weights.copy()

    @classmethod
    def from_edges(cls, n: int, triples, c_max: int = 0,
                   X: np.ndarray | None = None) -> "CoGraph":
        """Build from undirected (i, j, w) triples with i != j."""
        adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(n)}
        for i, j, w in triples:
            if i == j:
                raise DataError(f"self-loop at node {i}")
            adj[int(i)].append((int(j), float(w)))
            adj[int(j)].append((int(i), float(w)))
        indptr = np.zeros(n + 1, dtype=np.int64)
        indices = []
        weights = []
        for i in range(n):
            nbrs = sorted(adj[i])
            if len({j for j, _ in nbrs}) != len(nbrs):
                raise DataError(f"duplicate edge at node {i}")
            indptr[i + 1] = indptr[i] + len(nbrs)
            indices.extend(j for j, _ in nbrs)
            weights.extend(w for _, w in nbrs)
        return cls(n, indptr, np.array(indices, dtype=np.int64),
                   np.array(weights, dtype=np.float64), int(c_max), X)


def build_cograph(train: SessionCorpus, catalog: ItemCatalog,
                  X: np.ndarray | None = None) -> CoGraph:
    """Count session-level co-occurrences and normalize by the max count."""
    if not train.sessions:
        raise DataError("cannot build a graph from an empty corpus")
    n = len(catalog)
    counts: dict[tuple[int, int], int] = {}
    for s in train.sessions:
        distinct = sorted(set(s.items))
        if distinct and (distinct[0] < 0 or distinct[-1] >= n):
            raise DataError(f"session {s.session_id} references items outside the catalog")
        for i, j in combinations(distinct, 2):
            counts[(i, j)] = counts.get((i, j), 0) + 1
    if not counts:
        raise DegenerateGraphError("no session contains two distinct items")
    c_max = max(counts.values())
    triples = [(i, j, c / c_max) for (i, j), c in sorted(counts.items())]
    return CoGraph.from_edges(n, triples, c_max=c_max, X=X)


def validate_cograph(graph: CoGraph):
    """Raise DataError when a structural invariant is violated."""
    n = graph.n
    seen = {}
    for i in range(n):
        nbrs, ws = graph.neighbors(i)
        if np.any(np.diff(nbrs) <= 0):
            raise DataError(f"node {i}: neighbor list not strictly ascending")
        for j, w in zip(nbrs, ws):
            if j == i:
                raise DataError(f"self-loop at node {i}")
            if not (0.0 < w <= 1.0):
                raise DataError(f"edge ({i},{j}): weight {w} outside (0, 1]")
            seen[(int(i), int(j))] = float(w)
    for (i, j), w in seen.items():
        if seen.get((j, i)) != w:
            raise DataError(f"asymmetric edge ({i},{j})")
    if len(seen) and max(seen.values()) != 1.0:
        raise DataError("no edge carries the maximal weight 1.0")


@dataclass
class NeighborSample:
    """Two-hop fixed-fanout sample rooted at seed nodes.

    hop1 holds the sampled edges feeding the output layer (dst in seeds);
    hop2 feeds the input layer (dst in the hop-1 closure, which includes the
    seeds themselves since their first-layer representations are needed).
    All node ids are global; edge arrays are sorted by (dst, src).
    """

    seeds: np.ndarray
    hop1_dst: np.ndarray
    hop1_src: np.ndarray
    hop1_w: np.ndarray
    hop2_dst: np.ndarray
    hop2_src: np.ndarray
    hop2_w: np.ndarray

    @property
    def layer1_nodes(self) -> np.ndarray:
        """Nodes whose first-layer output is required (sorted, global ids)."""
        return np.unique(np.concatenate([self.seeds, self.hop1_src]))

    @property
    def input_nodes(self) -> np.ndarray:
        """Nodes whose raw features are required (sorted, global ids)."""
        return np.unique(np.concatenate([self.layer1_nodes, self.hop2_src]))


def _sample_frontier(graph: CoGraph, nodes: np.ndarray, fanout: int, rng):
    dst, src, w = [], [], []
    for node in nodes:
        nbrs, ws = graph.neighbors(int(node))
        deg = len(nbrs)
        if deg == 0:
            continue
        if deg <= fanout:
            chosen = np.arange(deg)
        else:
            chosen = np.sort(rng.choice(deg, size=fanout, replace=False))
        dst.append(np.full(len(chosen), node, dtype=np.int64))
        src.append(nbrs[chosen])
        w.append(ws[chosen])
    if not dst:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    return np.concatenate(dst), np.concatenate(src), np.concatenate(w)


def sample_neighbors(graph: CoGraph, seeds, fanouts: tuple[int, int],
                     rng: np.random.Generator) -> NeighborSample:
    """Uniform without-replacement neighbor sampling, two hops.

    Nodes with degree below the fanout keep all neighbors (no padding).
    Deterministic for a given generator state; sampled edges always exist in
    the parent graph with identical weights.
    """
    f1, f2 = fanouts
    if f1 < 1 or f2 < 1:
        raise DataError(f"fanouts must be >= 1, got {fanouts}")
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    if seeds.size and (seeds.min() < 0 or seeds.max() >= graph.n):
        raise DataError("seed outside the graph")
    h1_dst, h1_src, h1_w = _sample_frontier(graph, seeds, f1, rng)
    closure = np.unique(np.concatenate([seeds, h1_src]))
    h2_dst, h2_src, h2_w = _sample_frontier(graph, closure, f2, rng)
    return NeighborSample(seeds, h1_dst, h1_src, h1_w, h2_dst, h2_src, h2_w)


# ---------------------------------------------------------------------------
# serialization: text and binary forms must load to identical graphs
# ---------------------------------------------------------------------------

def save_graph_text(graph: CoGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{graph.n} {graph.num_edges} {graph.c_max}\n")
        for i, j, w in graph.edge_triples():
            fh.write(f"{i} {j} {w!r}\n")


def load_graph_text(path) -> CoGraph:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty graph file")
    n, m, c_max = (int(tok) for tok in lines[0].split())
    triples = []
    for line in lines[1:m + 1]:
        i, j, w = line.split()
        triples.append((int(i), int(j), float(w)))
    if len(triples) != m:
        raise DataError(f"{path}: expected {m} edges, found {len(triples)}")
    return CoGraph.from_edges(n, triples, c_max=c_max)


def save_graph_binary(graph: CoGraph, path):
    """Little-endian layout: magic 'COG1', u64 n, u64 edge_count, u64 c_max,
    then per undirected edge (i < j): u64 i, u64 j, f64 weight."""
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<QQQ", graph.n, graph.num_edges, graph.c_max))
        for i, j, w in graph.edge_triples():
            fh.write(struct.pack("<QQd", i, j, w))


def load_graph_binary(path) -> CoGraph:
    data = Path(path).read_bytes()
    if data[:4] != _BIN_MAGIC:
        raise DataError(f"{path}: not a co-occurrence graph file")
    n, m, c_max = struct.unpack_from("<QQQ", data, 4)
    triples = []
    offset = 4 + 24
    for _ in range(m):
        i, j, w = struct.unpack_from("<QQd", data, offset)
        offset += 24
        triples.append((int(i), int(j), w))
    return CoGraph.from_edges(int(n), triples, c_max=int(c_max))
