"""Semantic graph convolution on the 21-joint hand skeleton."""

from __future__ import annotations

from collections import deque

import numpy as np

from .autodiff import Tensor, ops
from .nn import BatchNorm, Module, uniform_fan_in

NUM_JOINTS = 21
FINGER_BASES = (1, 5, 9, 13, 17)
FINGERTIPS = (4, 8, 12, 16, 20)


def hand_edges() -> list[tuple[int, int]]:
    """The 20 (parent, child) tree edges in joint order."""
    edges = []
    for base in FINGER_BASES:
        edges.append((0, base))
        edges.extend((base + k, base + k + 1) for k in range(3))
    return edges


def parents() -> np.ndarray:
    par = np.full(NUM_JOINTS, -1)
    for p, c in hand_edges():
        par[c] = p
    return par


def hand_adjacency() -> np.ndarray:
    """Symmetric 0/1 adjacency of the hand tree with self-loops on the diagonal."""
    g = np.eye(NUM_JOINTS)
    for p, c in hand_edges():
        g[p, c] = g[c, p] = 1.0
    return g


def bfs_reachable(adj: np.ndarray, start: int = 0) -> set:
    seen, queue = {start}, deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if j not in seen:
                seen.add(int(j))
                queue.append(int(j))
    return seen


def masked_softmax_adjacency(m: Tensor, g: np.ndarray) -> Tensor:
    """Row-wise softmax of logits ``m`` restricted to the support of ``g``."""
    g = np.asarray(g)
    if m.shape != g.shape or m.ndim != 2:
        raise ops.ShapeError("masked_softmax_adjacency", m.shape, g.shape)
    return ops.masked_softmax(m, g != 0)


class GCNLayer(Module):
    """ReLU(BatchNorm(W T P)) with P the masked-softmax adjacency.

    Tokens are laid out (B, J, C), i.e. the transpose of the C x J notation, so
    the product is computed as P^T X W^T.
    """

    def __init__(self, store, prefix, dim: int, rng, adjacency=None, use_batch_norm: bool = True):
        super().__init__(store, prefix)
        self.adjacency = hand_adjacency() if adjacency is None else np.asarray(adjacency, dtype=float)
        j = self.adjacency.shape[0]
        self.weight = self.param("weight", uniform_fan_in(rng, (dim, dim), dim))
        self.logits = self.param("adj_logits", np.zeros((j, j)))
        self.bn = BatchNorm(store, self._name("bn"), dim) if use_batch_norm else None

    def forward(self, x: Tensor) -> Tensor:
        return semantic_graph_conv(x, self)


def semantic_graph_conv(x: Tensor, layer: GCNLayer) -> Tensor:
    j = layer.adjacency.shape[0]
    if x.ndim != 3 or x.shape[1] != j:
        raise ops.ShapeError("semantic_graph_conv", x.shape, (j, layer.weight.shape[0]),
                             detail=f"expected {j} joint tokens")
    if x.shape[2] != layer.weight.shape[1]:
        raise ops.ShapeError("semantic_graph_conv", x.shape, layer.weight.shape)
    p = masked_softmax_adjacency(layer.logits, layer.adjacency)
    h = ops.einsum("bic,dc->bid", x, layer.weight)
    h = ops.einsum("ij,bic->bjc", p, h)
    if layer.bn is not None:
        h = layer.bn(h)
    return ops.relu(h)
