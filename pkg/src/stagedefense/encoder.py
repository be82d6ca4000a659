"""Mean-aggregation message-passing encoder: provenance graph -> 128-d embedding.

Checkpoint blocks: ``msg1.W_self``, ``msg1.W_nbr``, ``msg1.b``, the same for
``msg2``, then ``readout.W`` and ``readout.b``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn import DenseLayer, glorot
from .provenance import FEATURE_DIM, CompactGraph, ProvenanceGraph

EMBED_DIM = 128
HIDDEN_DIM = 32
N_ROUNDS = 2


@dataclass
class GraphBatch:
    """Several graphs stacked into one disconnected graph."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_ids: np.ndarray
    n_graphs: int
    inv_indeg: np.ndarray
    inv_count: np.ndarray

    @classmethod
    def from_graphs(cls, graphs) -> "GraphBatch":
        compact = [g if isinstance(g, CompactGraph) else CompactGraph.from_graph(g) for g in graphs]
        sizes = np.array([c.n_nodes for c in compact], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]) if len(compact) else np.zeros(0, int)
        n = int(sizes.sum())
        feats = (np.concatenate([c.features for c in compact]) if n
                 else np.zeros((0, FEATURE_DIM)))
        src = np.concatenate([c.src + o for c, o in zip(compact, offsets)] or [np.zeros(0, int)])
        dst = np.concatenate([c.dst + o for c, o in zip(compact, offsets)] or [np.zeros(0, int)])
        return cls.from_arrays(feats, src.astype(np.int64), dst.astype(np.int64),
                               np.repeat(np.arange(len(compact)), sizes), len(compact))

    @classmethod
    def from_arrays(cls, features, src, dst, graph_ids, n_graphs) -> "GraphBatch":
        n = features.shape[0]
        indeg = np.bincount(dst, minlength=n).astype(np.float64)
        inv_indeg = np.divide(1.0, indeg, out=np.zeros(n), where=indeg > 0)
        counts = np.bincount(graph_ids, minlength=n_graphs).astype(np.float64)
        inv_count = np.divide(1.0, counts, out=np.zeros(n_graphs), where=counts > 0)
        return cls(features, src, dst, graph_ids, n_graphs, inv_indeg, inv_count)


class GnnEncoder:
    def __init__(self, rng: np.random.Generator | None = None, hidden: int = HIDDEN_DIM,
                 embed: int = EMBED_DIM, n_in: int = FEATURE_DIM):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        width = n_in
        for r in range(1, N_ROUNDS + 1):
            # each round is one dense map over concat(self, neighbour mean)
            self.params[f"msg{r}.W_self"] = glorot(rng, hidden, 2 * width, (hidden, width))
            self.params[f"msg{r}.W_nbr"] = glorot(rng, hidden, 2 * width, (hidden, width))
            self.params[f"msg{r}.b"] = np.zeros(hidden)
            width = hidden
        self.params["readout.W"] = glorot(rng, embed, hidden)
        self.params["readout.b"] = np.zeros(embed)

    @property
    def readout(self) -> DenseLayer:
        return DenseLayer(self.params["readout.W"], self.params["readout.b"], "tanh")

    def named_parameters(self) -> dict[str, np.ndarray]:
        return self.params

    def encode(self, graph: ProvenanceGraph | CompactGraph) -> np.ndarray:
        return self.encode_batch(GraphBatch.from_graphs([graph]))[0][0]

    def encode_batch(self, batch: GraphBatch):
        h = batch.features
        tape = []
        n = h.shape[0]
        for r in range(1, N_ROUNDS + 1):
            m = kernels.gather_segment_sum(h, batch.src, batch.dst, n) * batch.inv_indeg[:, None]
            z = h @ self.params[f"msg{r}.W_self"].T + m @ self.params[f"msg{r}.W_nbr"].T \
                + self.params[f"msg{r}.b"]
            h_next = np.tanh(z)
            tape.append((h, m, h_next))
            h = h_next
        pooled = kernels.segment_sum(h, batch.graph_ids, batch.n_graphs) * batch.inv_count[:, None]
        g, rcache = self.readout.forward(pooled)
        return g, (batch, tape, rcache)

    def backward(self, cache, dG: np.ndarray) -> dict[str, np.ndarray]:
        batch, tape, rcache = cache
        dpooled, rgrads = self.readout.backward(rcache, dG)
        grads = {"readout.W": rgrads["W"], "readout.b": rgrads["b"]}
        dh = (dpooled * batch.inv_count[:, None])[batch.graph_ids]
        n = dh.shape[0]
        for r in range(N_ROUNDS, 0, -1):
            h_prev, m, h = tape[r - 1]
            dz = dh * (1.0 - h * h)
            grads[f"msg{r}.W_self"] = dz.T @ h_prev
            grads[f"msg{r}.W_nbr"] = dz.T @ m
            grads[f"msg{r}.b"] = dz.sum(axis=0)
            dm = (dz @ self.params[f"msg{r}.W_nbr"]) * batch.inv_indeg[:, None]
            dh = dz @ self.params[f"msg{r}.W_self"] + kernels.gather_segment_sum(dm, batch.dst, batch.src, n)
        return grads
