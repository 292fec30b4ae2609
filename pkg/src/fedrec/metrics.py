"""Ranking metrics, market heterogeneity diagnostics, and the two
non-federated reference rankers (degree popularity and a feature-only
linear embedder).

All metric computations are deterministic: score ties break by ascending
item id, and every random element (walks, k-means) is seeded.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from .encoder import Decoder, bpr_loss, score_matrix
from .graph import MarketGraph, sample_random_walks

LN2 = float(np.log(2.0))
JS_SMOOTHING = 1e-9
DEFAULT_CUTOFF = 20


@dataclass
class RankingResult:
    """Per-query reciprocal ranks and discounted-gain values at one cutoff."""

    reciprocal_ranks: np.ndarray
    ndcg_values: np.ndarray
    cutoff: int
    n_excluded: int = 0

    def __post_init__(self):
        for arr in (self.reciprocal_ranks, self.ndcg_values):
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError("per-query metric values must lie in [0, 1]")

    @property
    def mrr(self) -> float:
        return float(self.reciprocal_ranks.mean())

    @property
    def ndcg(self) -> float:
        return float(self.ndcg_values.mean()) if self.ndcg_values.size else 0.0


def _first_relevant_rank(ranking, relevant, cutoff: int) -> int:
    for pos, item in enumerate(ranking[:cutoff], start=1):
        if item in relevant:
            return pos
    return 0


def evaluate_rankings(rankings, relevants, cutoff: int = DEFAULT_CUTOFF) -> RankingResult:
    """Reciprocal rank and normalized discounted gain per query.

    Queries with no relevant item contribute 0 reciprocal rank and are
    excluded from the gain average (their count is reported).
    """
    rankings = list(rankings)
    relevants = [set(r) for r in relevants]
    if not rankings:
        raise ValueError("no queries to evaluate")
    if len(rankings) != len(relevants):
        raise ValueError(
            f"{len(rankings)} rankings vs {len(relevants)} relevance sets"
        )
    rr = np.zeros(len(rankings))
    gains = []
    excluded = 0
    for q, (ranking, relevant) in enumerate(zip(rankings, relevants)):
        rank = _first_relevant_rank(ranking, relevant, cutoff)
        rr[q] = 1.0 / rank if rank else 0.0
        if not relevant:
            excluded += 1
            continue
        dcg = sum(
            1.0 / np.log2(pos + 1)
            for pos, item in enumerate(ranking[:cutoff], start=1)
            if item in relevant
        )
        ideal = sum(
            1.0 / np.log2(pos + 1) for pos in range(1, min(len(relevant), cutoff) + 1)
        )
        gains.append(dcg / ideal)
    return RankingResult(
        reciprocal_ranks=rr,
        ndcg_values=np.asarray(gains),
        cutoff=cutoff,
        n_excluded=excluded,
    )


def mrr_at_n(rankings, relevants, cutoff: int = DEFAULT_CUTOFF) -> float:
    return evaluate_rankings(rankings, relevants, cutoff).mrr


def ndcg_at_n(rankings, relevants, cutoff: int = DEFAULT_CUTOFF) -> float:
    return evaluate_rankings(rankings, relevants, cutoff).ndcg


def rank_by_score(scores: np.ndarray, exclude: int | None = None) -> np.ndarray:
    """Candidate order by descending score, ties by ascending item id."""
    ids = np.arange(scores.size)
    order = np.lexsort((ids, -scores))
    if exclude is not None:
        order = order[order != exclude]
    return order


def test_queries(market: MarketGraph) -> tuple[list[int], list[set]]:
    """Both endpoints of each held-out pair, with their held-out partners."""
    partners: dict[int, set] = {}
    for a, b in market.test_pairs:
        partners.setdefault(int(a), set()).add(int(b))
        partners.setdefault(int(b), set()).add(int(a))
    queries = sorted(partners)
    return queries, [partners[q] for q in queries]


def evaluate_market(embeddings: np.ndarray, theta: tuple[float, float],
                    market: MarketGraph, cutoff: int = DEFAULT_CUTOFF) -> RankingResult:
    """Rank the full catalog (minus the query) for every held-out query."""
    queries, relevants = test_queries(market)
    if not queries:
        raise ValueError(f"market {market.market_id!r}: no held-out pairs")
    scores = score_matrix(theta, embeddings)
    rankings = [rank_by_score(scores[q], exclude=q) for q in queries]
    return evaluate_rankings(rankings, relevants, cutoff)


# ---------------------------------------------------------------------------
# heterogeneity diagnostics


@dataclass
class HeterogeneityMatrix:
    """Pairwise symmetric divergences between markets, zero diagonal."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"divergence matrix must be square, got {v.shape}")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("divergence matrix must be symmetric")
        if np.any(np.abs(np.diag(v)) > 1e-12):
            raise ValueError("divergence matrix must have a zero diagonal")
        if v.min() < -1e-12 or v.max() > LN2 + 1e-9:
            raise ValueError("divergences must lie in [0, ln 2]")
        self.values = v

    @property
    def n_markets(self) -> int:
        return self.values.shape[0]

    def mean_offdiag(self) -> float:
        n = self.n_markets
        if n < 2:
            return 0.0
        mask = ~np.eye(n, dtype=bool)
        return float(self.values[mask].mean())


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence (natural log) with additive bin smoothing."""
    p = np.asarray(p, dtype=np.float64) + JS_SMOOTHING
    q = np.asarray(q, dtype=np.float64) + JS_SMOOTHING
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    kl_pm = float(np.sum(p * np.log(p / m)))
    kl_qm = float(np.sum(q * np.log(q / m)))
    return min(0.5 * kl_pm + 0.5 * kl_qm, LN2)


def _pairwise_js(distributions: np.ndarray) -> np.ndarray:
    p = distributions.shape[0]
    out = np.zeros((p, p))
    for i in range(p):
        for j in range(i + 1, p):
            out[i, j] = out[j, i] = js_divergence(distributions[i], distributions[j])
    return out


def pooled_pairs(markets) -> np.ndarray:
    """Union of all observed (train and held-out) pairs across markets."""
    chunks = [m.train_pairs for m in markets] + [m.test_pairs for m in markets]
    stacked = np.concatenate([c for c in chunks if c.size], axis=0)
    return np.unique(stacked, axis=0)


def feature_heterogeneity(markets, local_embeddings, n_bins: int = 20) -> HeterogeneityMatrix:
    """Divergence of cosine-similarity histograms over the common pair pool.

    Each market scores the pooled observed pairs with its own locally trained
    embeddings; similarities are binned on a fixed [-1, 1] grid, and markets
    are compared by the divergence of the induced bin distributions.
    """
    markets = list(markets)
    if len(markets) != len(local_embeddings):
        raise ValueError("one embedding matrix per market required")
    for m in markets:
        if m.train_pairs.shape[0] == 0 or m.test_pairs.shape[0] == 0:
            raise ValueError(f"market {m.market_id!r}: missing observed or held-out pairs")
    pool = pooled_pairs(markets)
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    dists = np.zeros((len(markets), n_bins))
    for i, z in enumerate(local_embeddings):
        z = np.asarray(z, dtype=np.float64)
        za, zb = z[pool[:, 0]], z[pool[:, 1]]
        norms = np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1)
        sims = np.einsum("ij,ij->i", za, zb) / np.maximum(norms, 1e-12)
        hist, _ = np.histogram(np.clip(sims, -1.0, 1.0), bins=edges)
        dists[i] = hist / hist.sum()
    return HeterogeneityMatrix(values=_pairwise_js(dists), kind="feature")


def structure_heterogeneity(
    markets,
    walk_length: int = 16,
    n_walks: int = 200,
    n_clusters: int = 8,
    seed: int = 0,
) -> HeterogeneityMatrix:
    """Divergence of per-market categorical distributions over a shared
    clustering of random walks.

    Walks from all markets are pooled; each walk is embedded as the mean
    feature vector of its visited nodes; pooled walk embeddings are k-means
    clustered (seeded); each market then induces a distribution over the
    shared clusters. The walk seed is shared across markets, so identical
    markets produce identical walks.
    """
    markets = list(markets)
    embeddings = []
    for m in markets:
        walks = sample_random_walks(m, walk_length, n_walks, seed=seed)
        embeddings.append(m.features[walks].mean(axis=1))
    pooled = np.concatenate(embeddings, axis=0)
    n_distinct = np.unique(pooled, axis=0).shape[0]
    if n_distinct < n_clusters:
        warnings.warn(
            f"only {n_distinct} distinct walk embeddings; reducing clusters "
            f"from {n_clusters}",
            stacklevel=2,
        )
        n_clusters = max(n_distinct, 1)
    _, labels = kmeans2(pooled, n_clusters, minit="++", seed=seed)
    dists = np.zeros((len(markets), n_clusters))
    offset = 0
    for i, emb in enumerate(embeddings):
        market_labels = labels[offset:offset + emb.shape[0]]
        offset += emb.shape[0]
        counts = np.bincount(market_labels, minlength=n_clusters).astype(np.float64)
        dists[i] = counts / counts.sum()
    return HeterogeneityMatrix(values=_pairwise_js(dists), kind="structure")


# ---------------------------------------------------------------------------
# reference rankers


def popularity_baseline(market: MarketGraph):
    """Rank candidates by train-graph degree (ties by item id).

    Returns ``rank(query) -> ordering`` over all items except the query.
    """
    degrees = market.degrees().astype(np.float64)
    template = rank_by_score(degrees)

    def rank(query: int) -> np.ndarray:
        return template[template != query]

    return rank


def evaluate_popularity(market: MarketGraph, cutoff: int = DEFAULT_CUTOFF) -> RankingResult:
    rank = popularity_baseline(market)
    queries, relevants = test_queries(market)
    if not queries:
        raise ValueError(f"market {market.market_id!r}: no held-out pairs")
    return evaluate_rankings([rank(q) for q in queries], relevants, cutoff)


@dataclass
class FeatMlpResult:
    weight: np.ndarray
    theta: tuple[float, float]
    losses: list[float]
    embeddings: np.ndarray


def featmlp_baseline(
    market: MarketGraph,
    n_components: int,
    epochs: int,
    learning_rate: float,
    seed: int,
    negatives_per_positive: int = 1,
) -> FeatMlpResult:
    """Graph-blind baseline: linear item embeddings Z = X W trained on the
    pairwise ranking loss, scored with the logistic decoder."""
    from .data import sample_negatives
    from .encoder import init_weight

    rng = np.random.default_rng(seed)
    weight = ad.parameter(
        init_weight(rng, market.feature_dim, n_components), name="weight"
    )
    decoder = Decoder.init()
    params = [weight, *decoder.params]
    opt = ad.OptimizerState(learning_rate)
    features = ad.constant(market.features)
    losses = []
    for _ in range(epochs):
        triplets = sample_negatives(
            market, negatives_per_positive, seed=int(rng.integers(2**32))
        )
        ad.zero_grads(params)
        loss = bpr_loss(decoder, triplets, ad.matmul(features, weight))
        loss.backward()
        ad.sgd_step(params, opt)
        losses.append(loss.item())
    embeddings = market.features @ weight.value
    return FeatMlpResult(
        weight=weight.value.copy(),
        theta=decoder.values(),
        losses=losses,
        embeddings=embeddings,
    )
