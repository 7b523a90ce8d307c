"""Device graph, top-M neighbour selection, profile similarity and model aggregation."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from dbcd.model import MlpParams, ShapeMismatch

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("similarity", "mean", "off")


class InfeasibleDegree(ValueError):
    pass


class ZeroNormProfile(ValueError):
    pass


class DeviceGraph:
    """Undirected graph given by a symmetric cost matrix; ``cost[a, b] == 0`` means no edge."""

    def __init__(self, cost):
        cost = np.array(cost, dtype=np.float64)
        if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
            raise ValueError(f"cost matrix must be square, got {cost.shape}")
        if not np.all(np.isfinite(cost)) or np.any(cost < 0):
            raise ValueError("costs must be finite and non-negative")
        if not np.allclose(cost, cost.T, rtol=0, atol=0):
            raise ValueError("cost matrix must be symmetric")
        if np.any(np.diag(cost) != 0):
            raise ValueError("cost matrix must have a zero diagonal")
        self.cost = cost

    @property
    def n_devices(self):
        return self.cost.shape[0]

    def degree(self):
        return (self.cost > 0).sum(axis=1)

    def is_connected(self):
        seen = np.zeros(self.n_devices, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            a = stack.pop()
            for b in np.flatnonzero(self.cost[a] > 0):
                if not seen[b]:
                    seen[b] = True
                    stack.append(b)
        return bool(seen.all())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(c)) for c in row] for row in self.cost])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        return cls([[float(c) for c in r] for r in rows])


def build_random_graph(n_devices, max_degree, rng, cost_range=(0.1, 1.0), edge_prob=1.0):
    """Random connected graph with every degree at most ``max_degree``.

    A random spanning tree is grown first (each node attaches to a random
    earlier node with spare degree), then the remaining pairs are visited in
    random order and joined with probability ``edge_prob`` while both ends
    have spare degree. Edge costs are uniform on ``cost_range``.
    """
    if n_devices < 2:
        raise ValueError("need at least two devices")
    if max_degree < 1:
        raise InfeasibleDegree("max_degree must be at least 1")
    if max_degree == 1 and n_devices > 2:
        raise InfeasibleDegree(f"max_degree=1 cannot connect {n_devices} devices")
    lo, hi = cost_range
    if not 0 < lo <= hi:
        raise ValueError("cost_range must satisfy 0 < low <= high")
    adj = np.zeros((n_devices, n_devices), dtype=bool)
    deg = np.zeros(n_devices, dtype=np.int64)
    order = rng.permutation(n_devices)
    for k in range(1, n_devices):
        node = order[k]
        open_ = [p for p in order[:k] if deg[p] < max_degree]
        parent = open_[rng.integers(len(open_))]
        adj[node, parent] = adj[parent, node] = True
        deg[node] += 1
        deg[parent] += 1
    rows, cols = np.triu_indices(n_devices, k=1)
    for idx in rng.permutation(rows.shape[0]):
        a, b = rows[idx], cols[idx]
        if adj[a, b] or deg[a] >= max_degree or deg[b] >= max_degree:
            continue
        if rng.random() < edge_prob:
            adj[a, b] = adj[b, a] = True
            deg[a] += 1
            deg[b] += 1
    weights = rng.uniform(lo, hi, size=(n_devices, n_devices))
    weights = np.triu(weights, 1)
    weights = weights + weights.T
    return DeviceGraph(np.where(adj, weights, 0.0))


def select_neighbors(graph, device, m):
    """Up to ``m`` peers with the lowest positive cost, ties broken by ascending id."""
    if not 0 <= device < graph.n_devices:
        raise IndexError(f"device {device} out of range")
    row = graph.cost[device]
    peers = [b for b in np.flatnonzero(row > 0) if b != device]
    peers.sort(key=lambda b: (row[b], b))
    return [int(b) for b in peers[:max(int(m), 0)]]


def similarity(ea, eb):
    """Cosine similarity of two profile vectors."""
    ea = np.asarray(ea, dtype=np.float64)
    eb = np.asarray(eb, dtype=np.float64)
    if ea.shape != eb.shape:
        raise ValueError(f"profile dimensions differ: {ea.shape} vs {eb.shape}")
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0 or nb == 0:
        raise ZeroNormProfile("cosine similarity needs non-zero profiles")
    return float(np.clip(ea @ eb / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class AggregationConfig:
    mu: float = 0.01
    mode: str = "similarity"
    similarity_floor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if self.mode not in AGGREGATION_MODES:
            raise ValueError(f"mode must be one of {AGGREGATION_MODES}, got {self.mode!r}")
        if self.similarity_floor < 0:
            raise ValueError("similarity_floor must be non-negative")


def neighbor_weights(profiles, device, members, cfg):
    """Aggregation weights ``h(device, b)`` for each member, floored at ``similarity_floor``."""
    if cfg.mode == "mean":
        return [1.0] * len(members)
    return [max(cfg.similarity_floor, similarity(profiles[device], profiles[b])) for b in members]


def aggregate(theta, neighbors, cfg):
    """Blend ``theta`` with the h-weighted mean of neighbour parameters.

    ``neighbors`` is a list of ``(MlpParams, h)``. Returns ``theta`` itself when
    there is nothing to blend (mode off, mu = 0, no neighbours, or zero total h).
    """
    if cfg.mode == "off" or cfg.mu == 0.0 or not neighbors:
        return theta
    hs = np.array([1.0 if cfg.mode == "mean" else h for _, h in neighbors], dtype=np.float64)
    if np.any(hs < 0):
        raise ValueError("similarity weights must be non-negative")
    total = hs.sum()
    if total <= 0:
        logger.warning("all neighbour similarities are zero; keeping local parameters")
        return theta
    out = []
    for i, w in enumerate(theta.weights):
        acc = np.zeros_like(w)
        for (p, _), h in zip(neighbors, hs):
            if p.weights[i].shape != w.shape:
                raise ShapeMismatch(f"neighbour layer {i + 1} has shape {p.weights[i].shape}, expected {w.shape}")
            if h:
                acc += h * p.weights[i]
        out.append((1.0 - cfg.mu) * w + (cfg.mu / total) * acc)
    return MlpParams(out)
