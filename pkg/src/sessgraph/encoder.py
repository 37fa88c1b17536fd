"""Attention-based graph convolution and the two-layer skip encoder.

Per directed edge (i <- j) the attention logit is
a^T LeakyReLU(W_att [h_i || h_j || e_ij]); coefficients are softmax-normalized
over each node's neighborhood and weight the transformed neighbor values
W_val h_j. A node with no neighbors gets a zero pre-activation. Each encoder
layer receives its input plus a learned projection of the raw node features
(skip connection) and applies a learnable PReLU.

Aggregation always runs in ascending neighbor-index order so full-graph and
exhaustive-fanout sampled encodings agree to floating-point reproducibility.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .cograph import CoGraph, NeighborSample
from .errors import ShapeError

LEAKY_SLOPE = 0.2
PRELU_INIT = 0.25


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class Gatv2Layer:
    """One multi-head attention convolution; head outputs are concatenated."""

    def __init__(self, d_in: int, d_out: int, heads: int = 1, d_att: int | None = None,
                 leaky_slope: float = LEAKY_SLOPE, rng: np.random.Generator | None = None):
        if d_out % heads != 0:
            raise ShapeError("gatv2_layer", (d_out,), (heads,))
        rng = rng or np.random.default_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.heads = heads
        self.d_head = d_out // heads
        self.d_att = d_att or self.d_head
        self.leaky_slope = leaky_slope
        self.W_att = [dc.Tensor(_glorot(rng, self.d_att, 2 * d_in + 1), requires_grad=True)
                      for _ in range(heads)]
        self.a = [dc.Tensor(_glorot(rng, self.d_att, 1), requires_grad=True)
                  for _ in range(heads)]
        self.W_val = [dc.Tensor(_glorot(rng, self.d_head, d_in), requires_grad=True)
                      for _ in range(heads)]
        self.prelu = dc.Tensor(np.array([PRELU_INIT]), requires_grad=True)

    def parameters(self) -> list[tuple[str, dc.Tensor]]:
        out = []
        for h in range(self.heads):
            suffix = "" if self.heads == 1 else f".{h}"
            out.append((f"W_val{suffix}", self.W_val[h]))
            out.append((f"W_att{suffix}", self.W_att[h]))
            out.append((f"a{suffix}", self.a[h]))
        out.append(("prelu", self.prelu))
        return out

    def head_logits(self, head: int, h_dst: dc.Tensor, h_src: dc.Tensor,
                    edges) -> dc.Tensor:
        """Unnormalized attention logits for one head over the given edges."""
        dst_idx, src_idx, w = edges
        n_edges = len(dst_idx)
        cat = dc.row_concat([
            dc.gather_rows(h_dst, dst_idx),
            dc.gather_rows(h_src, src_idx),
            dc.Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1)),
        ])
        z = dc.leaky_relu(dc.matmul(cat, dc.transpose(self.W_att[head])), self.leaky_slope)
        return dc.reshape(dc.matmul(z, self.a[head]), (n_edges,))

    def coefficients(self, h_dst: dc.Tensor, h_src: dc.Tensor, edges) -> list[dc.Tensor]:
        """Per-head softmax-normalized coefficients; edges sorted by (dst, src)."""
        dst_idx = edges[0]
        return [dc.segment_softmax(self.head_logits(h, h_dst, h_src, edges), dst_idx)
                for h in range(self.heads)]

    def forward(self, h_dst: dc.Tensor, h_src: dc.Tensor, edges, n_dst: int) -> dc.Tensor:
        """Aggregate src values into dst rows; empty neighborhoods give
        PReLU(0) rows. dst indices in edges must be local to [0, n_dst)."""
        alphas = self.coefficients(h_dst, h_src, edges)
        dst_idx, src_idx, _ = edges
        head_outputs = []
        for h in range(self.heads):
            values = dc.matmul(h_src, dc.transpose(self.W_val[h]))
            per_edge = dc.gather_rows(values, src_idx)
            head_outputs.append(
                dc.segment_weighted_sum(per_edge, alphas[h], dst_idx, n_dst)
            )
        agg = head_outputs[0] if self.heads == 1 else dc.row_concat(head_outputs)
        return dc.prelu(agg, self.prelu)


class SkipEncoder:
    """Two attention layers; each layer's input gains X @ W_skip^T."""

    def __init__(self, d_feat: int, d_hidden: int = 128, d_out: int = 128,
                 heads: int = 1, d_att: int | None = None,
                 leaky_slope: float = LEAKY_SLOPE,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.d_feat = d_feat
        self.layers = [
            Gatv2Layer(d_feat, d_hidden, heads, d_att, leaky_slope, rng),
            Gatv2Layer(d_hidden, d_out, heads, d_att, leaky_slope, rng),
        ]
        self.W_skip = [
            dc.Tensor(_glorot(rng, d_feat, d_feat), requires_grad=True),
            dc.Tensor(_glorot(rng, d_hidden, d_feat), requires_grad=True),
        ]
        self.d_out = d_out

    def parameters(self) -> list[tuple[str, dc.Tensor]]:
        out = []
        for k, layer in enumerate(self.layers, start=1):
            out.extend((f"layer{k}.{name}", t) for name, t in layer.parameters())
            out.append((f"skip{k}.W", self.W_skip[k - 1]))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, t in self.parameters():
            if name not in state:
                raise ShapeError("load_state_dict", (name,))
            if state[name].shape != t.data.shape:
                raise ShapeError("load_state_dict", state[name].shape, t.data.shape)
            t.data = state[name].astype(np.float64).copy()

    def clone(self) -> "SkipEncoder":
        twin = SkipEncoder(self.d_feat, self.layers[0].d_out, self.layers[1].d_out,
                           self.layers[0].heads, self.layers[0].d_att,
                           self.layers[0].leaky_slope)
        twin.load_state_dict(self.state_dict())
        return twin

    def _layer_input(self, k: int, h_prev: dc.Tensor, x: dc.Tensor) -> dc.Tensor:
        return dc.add(h_prev, dc.matmul(x, dc.transpose(self.W_skip[k])))

    def encode_full(self, X: np.ndarray, graph: CoGraph) -> dc.Tensor:
        """All-node embeddings over the full (unsampled) graph."""
        if X.shape[0] != graph.n or X.shape[1] != self.d_feat:
            raise ShapeError("encode", X.shape, (graph.n, self.d_feat))
        x = dc.Tensor(X)
        edges = graph.directed_edges()
        h = self._layer_input(0, x, x)
        h1 = self.layers[0].forward(h, h, edges, graph.n)
        h2_in = self._layer_input(1, h1, x)
        return self.layers[1].forward(h2_in, h2_in, edges, graph.n)

    def encode_sampled(self, X: np.ndarray, sample: NeighborSample) -> dc.Tensor:
        """Seed-node embeddings via the sampled 2-hop closure.

        Rows are ordered by ascending seed id (NeighborSample.seeds order).
        """
        if X.shape[1] != self.d_feat:
            raise ShapeError("encode", X.shape, (self.d_feat,))
        layer1_nodes = sample.layer1_nodes           # nodes needing H1
        input_nodes = sample.input_nodes             # nodes needing raw features
        pos_in_inputs = {int(g): i for i, g in enumerate(input_nodes)}
        pos_in_layer1 = {int(g): i for i, g in enumerate(layer1_nodes)}
        pos_in_seeds = {int(g): i for i, g in enumerate(sample.seeds)}

        x_in = dc.Tensor(X[input_nodes])
        h_in = self._layer_input(0, x_in, x_in)
        h1_edges = (
            np.array([pos_in_layer1[int(d)] for d in sample.hop2_dst if int(d) in pos_in_layer1],
                     dtype=np.int64),
            np.array([pos_in_inputs[int(s)] for d, s in zip(sample.hop2_dst, sample.hop2_src)
                      if int(d) in pos_in_layer1], dtype=np.int64),
            np.array([w for d, w in zip(sample.hop2_dst, sample.hop2_w)
                      if int(d) in pos_in_layer1]),
        )
        h_dst_l1 = dc.gather_rows(h_in, [pos_in_inputs[int(g)] for g in layer1_nodes])
        h1 = self.layers[0].forward(h_dst_l1, h_in, h1_edges, len(layer1_nodes))

        x_l1 = dc.Tensor(X[layer1_nodes])
        h2_in = self._layer_input(1, h1, x_l1)
        h2_edges = (
            np.array([pos_in_seeds[int(d)] for d in sample.hop1_dst], dtype=np.int64),
            np.array([pos_in_layer1[int(s)] for s in sample.hop1_src], dtype=np.int64),
            sample.hop1_w.astype(np.float64),
        )
        h_dst_l2 = dc.gather_rows(h2_in, [pos_in_layer1[int(g)] for g in sample.seeds])
        return self.layers[1].forward(h_dst_l2, h2_in, h2_edges, len(sample.seeds))


def attention_coeffs(layer: Gatv2Layer, H: np.ndarray,
                     graph: CoGraph) -> tuple[list[np.ndarray], tuple]:
    """Per-head attention coefficients over every directed edge of the graph.

    Returns (per-head coefficient arrays, (dst, src, weight) edge arrays);
    nodes without neighbors simply contribute no entries.
    """
    edges = graph.directed_edges()
    h = dc.Tensor(np.asarray(H, dtype=np.float64))
    alphas = layer.coefficients(h, h, edges)
    return [a.data.copy() for a in alphas], edges


def gatv2_forward(layer: Gatv2Layer, H: np.ndarray, graph: CoGraph) -> np.ndarray:
    """Full-graph single-layer forward for inspection and tests."""
    h = dc.Tensor(np.asarray(H, dtype=np.float64))
    return layer.forward(h, h, graph.directed_edges(), graph.n).data.copy()


def encode(encoder: SkipEncoder, X: np.ndarray,
           graph_or_sample: CoGraph | NeighborSample) -> np.ndarray:
    """Embedding rows (all nodes for a graph, seed nodes for a sample)."""
    if isinstance(graph_or_sample, NeighborSample):
        return encoder.encode_sampled(X, graph_or_sample).data.copy()
    return encoder.encode_full(X, graph_or_sample).data.copy()


def inductive_embed(encoder: SkipEncoder, graph: CoGraph, X: np.ndarray,
                    feature_row: np.ndarray, neighbors) -> np.ndarray:
    """Embed an item unseen at training time without touching the graph.

    neighbors is a list of (existing node id, edge weight). The new node
    aggregates from its declared neighbors, whose own representations are
    computed over their original neighborhoods; existing nodes never see the
    new node, so embedding a clone of node k reproduces k's embedding.
    """
    feature_row = np.asarray(feature_row, dtype=np.float64).reshape(-1)
    if feature_row.shape[0] != encoder.d_feat:
        raise ShapeError("inductive_embed", feature_row.shape, (encoder.d_feat,))
    new_id = graph.n
    nbr = sorted((int(j), float(w)) for j, w in neighbors)
    X_ext = np.vstack([X, feature_row[None, :]])

    hop1_dst = np.full(len(nbr), new_id, dtype=np.int64)
    hop1_src = np.array([j for j, _ in nbr], dtype=np.int64)
    hop1_w = np.array([w for _, w in nbr], dtype=np.float64)

    # hop-2 edges: the new node's layer-1 aggregation plus each neighbor's
    # full original neighborhood, ordered by destination then source
    h2_dst, h2_src, h2_w = [], [], []
    for node in sorted({new_id} | {j for j, _ in nbr}):
        if node == new_id:
            h2_dst.extend([new_id] * len(nbr))
            h2_src.extend(j for j, _ in nbr)
            h2_w.extend(w for _, w in nbr)
        else:
            nbrs, ws = graph.neighbors(node)
            h2_dst.extend([node] * len(nbrs))
            h2_src.extend(int(v) for v in nbrs)
            h2_w.extend(float(v) for v in ws)

    sample = NeighborSample(
        seeds=np.array([new_id], dtype=np.int64),
        hop1_dst=hop1_dst, hop1_src=hop1_src, hop1_w=hop1_w,
        hop2_dst=np.array(h2_dst, dtype=np.int64),
        hop2_src=np.array(h2_src, dtype=np.int64),
        hop2_w=np.array(h2_w, dtype=np.float64),
    )
    return encoder.encode_sampled(X_ext, sample).data[0].copy()
