"""Market graphs, the normalized propagation operator, and random walks.

A market graph is one client's private data: a symmetric binary adjacency
over the item catalog (stored as a sorted edge list plus a CSR index),
dense item features, and the observed item-pair examples split into train
and held-out sets. Instances are immutable after construction and safe to
share read-only across client workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_PROPAGATION_POWER = 3

# dense conversion is fine at desk scale; guard against silly inputs
MAX_DENSE_ITEMS = 4096


class GraphError(ValueError):
    """Structurally invalid graph input."""


def canonical_pairs(pairs) -> np.ndarray:
    """Undirected pairs as a sorted, deduplicated (m, 2) array with a < b."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return arr.reshape(0, 2)
    lo = arr.min(axis=1)
    hi = arr.max(axis=1)
    out = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return out


@dataclass
class MarketGraph:
    """One market's private graph, features, and observed pair examples.

    ``edges`` is the train-split interaction graph (canonical a < b rows);
    held-out pairs never enter propagation, degrees, or negative sampling.
    """

    market_id: str
    n_items: int
    edges: np.ndarray
    features: np.ndarray
    train_pairs: np.ndarray
    test_pairs: np.ndarray
    _offsets: np.ndarray = field(init=False, repr=False)
    _neighbors: np.ndarray = field(init=False, repr=False)
    _dense: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.edges = canonical_pairs(self.edges)
        self.train_pairs = canonical_pairs(self.train_pairs)
        self.test_pairs = canonical_pairs(self.test_pairs)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.n_items
        if n < 1:
            raise GraphError(f"market {self.market_id!r}: needs at least one item")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphError(
                f"market {self.market_id!r}: features must be ({n}, d), "
                f"got {self.features.shape}"
            )
        for label, pairs in (
            ("edge", self.edges),
            ("train pair", self.train_pairs),
            ("test pair", self.test_pairs),
        ):
            if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
                raise GraphError(
                    f"market {self.market_id!r}: {label} index out of range [0, {n})"
                )
            if pairs.size and np.any(pairs[:, 0] == pairs[:, 1]):
                raise GraphError(f"market {self.market_id!r}: self-loop in {label}s")
        if self.train_pairs.size and self.test_pairs.size:
            both = np.concatenate([self.train_pairs, self.test_pairs])
            if np.unique(both, axis=0).shape[0] != both.shape[0]:
                raise GraphError(
                    f"market {self.market_id!r}: train and test pairs overlap"
                )
        counts = np.zeros(n, dtype=np.int64)
        if self.edges.size:
            np.add.at(counts, self.edges[:, 0], 1)
            np.add.at(counts, self.edges[:, 1], 1)
        self._offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self._offsets[1:])
        self._neighbors = np.zeros(self._offsets[-1], dtype=np.int64)
        cursor = self._offsets[:-1].copy()
        for a, b in self.edges:
            self._neighbors[cursor[a]] = b
            cursor[a] += 1
            self._neighbors[cursor[b]] = a
            cursor[b] += 1
        for i in range(n):
            self._neighbors[self._offsets[i]:self._offsets[i + 1]].sort()
        for arr in (self.edges, self.features, self.train_pairs, self.test_pairs):
            arr.setflags(write=False)

    @classmethod
    def build(cls, market_id, features, train_pairs, test_pairs=()) -> "MarketGraph":
        """Construct with the adjacency taken from the train pairs."""
        features = np.asarray(features, dtype=np.float64)
        train_pairs = canonical_pairs(train_pairs)
        return cls(
            market_id=market_id,
            n_items=features.shape[0],
            edges=train_pairs,
            features=features,
            train_pairs=train_pairs,
            test_pairs=canonical_pairs(test_pairs),
        )

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.diff(self._offsets)

    def neighbors(self, item: int) -> np.ndarray:
        return self._neighbors[self._offsets[item]:self._offsets[item + 1]]

    def has_edge(self, a: int, b: int) -> bool:
        nb = self.neighbors(a)
        return bool(np.searchsorted(nb, b) < nb.size and nb[np.searchsorted(nb, b)] == b)

    def dense_adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 matrix with zero diagonal (cached)."""
        if self._dense is None:
            if self.n_items > MAX_DENSE_ITEMS:
                raise GraphError(
                    f"market {self.market_id!r}: {self.n_items} items exceeds the "
                    f"dense limit of {MAX_DENSE_ITEMS}"
                )
            a = np.zeros((self.n_items, self.n_items), dtype=np.float64)
            if self.edges.size:
                a[self.edges[:, 0], self.edges[:, 1]] = 1.0
                a[self.edges[:, 1], self.edges[:, 0]] = 1.0
            a.setflags(write=False)
            self._dense = a
        return self._dense


@dataclass
class PropagationMatrix:
    """Cached symmetric normalization of (A + I), with its m-th power.

    ``matrix`` is S = D^{-1/2} (A + I) D^{-1/2} where D is the degree matrix
    of A + I (so every diagonal degree is >= 1 and the normalization never
    divides by zero). ``powered`` is S^m, materialized once.
    """

    matrix: np.ndarray
    power: int
    powered: np.ndarray = field(init=False, repr=False)
    _propagated: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.power < 1:
            raise GraphError(f"propagation power must be >= 1, got {self.power}")
        self.powered = np.linalg.matrix_power(self.matrix, self.power)
        self.matrix.setflags(write=False)
        self.powered.setflags(write=False)

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    def propagate(self, features: np.ndarray) -> np.ndarray:
        """S^m @ features, memoized per feature matrix identity."""
        key = id(features)
        hit = self._propagated.get(key)
        if hit is None:
            hit = self.powered @ features
            hit.setflags(write=False)
            self._propagated[key] = hit
        return hit


def normalize_adjacency(adjacency, power: int = DEFAULT_PROPAGATION_POWER) -> PropagationMatrix:
    """Symmetric degree normalization of A + I, raised to ``power``.

    ``adjacency`` may be a dense 0/1 matrix or a MarketGraph.
    """
    if isinstance(adjacency, MarketGraph):
        adjacency = adjacency.dense_adjacency()
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {a.shape}")
    if a.shape[0] < 1:
        raise GraphError("adjacency must have at least one node")
    if not np.array_equal(a, a.T):
        raise GraphError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise GraphError("adjacency must have a zero diagonal")
    if not np.all((a == 0) | (a == 1)):
        raise GraphError("adjacency must be binary")
    a_loop = a + np.eye(a.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_loop.sum(axis=1))
    s = a_loop * inv_sqrt[:, None] * inv_sqrt[None, :]
    return PropagationMatrix(matrix=s, power=int(power))


def sample_random_walks(
    graph: MarketGraph, walk_length: int, n_walks: int, seed: int
) -> np.ndarray:
    """Uniform random walks over the edges, as an (n_walks, walk_length) array.

    Walks start at uniformly sampled non-isolated nodes and hop to uniformly
    sampled neighbors; the result is a pure function of the seed.
    """
    if walk_length < 1:
        raise GraphError(f"walk_length must be >= 1, got {walk_length}")
    if graph.n_edges == 0:
        raise GraphError(f"market {graph.market_id!r}: no walkable structure")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(graph.degrees() > 0)
    walks = np.zeros((n_walks, walk_length), dtype=np.int64)
    for w in range(n_walks):
        node = starts[rng.integers(starts.size)]
        walks[w, 0] = node
        for step in range(1, walk_length):
            nb = graph.neighbors(node)
            node = nb[rng.integers(nb.size)]
            walks[w, step] = node
    return walks
