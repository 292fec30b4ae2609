"""Dataset ingestion and synthetic heterogeneous federations.

File formats:
  * edge list — UTF-8 TSV, one ``item_a<TAB>item_b`` pair per line, 0-based
    indices, ``#`` starts a comment line;
  * features — CSV whose first line is ``n,d`` followed by n rows of d floats.

Synthetic federations share one feature matrix (same catalog everywhere) and
draw per-market block-model adjacencies. The heterogeneity knob h in [0, 1]
shuffles the community assignment of a uniform h-fraction of items per
market: h=0 keeps every market on the shared base assignment, h=1 gives
each market an independent uniform permutation of it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import GraphError, MarketGraph, canonical_pairs

TEST_FRACTION = 0.1


class DataFormatError(ValueError):
    """Unparseable dataset file."""


@dataclass
class SyntheticSpec:
    """Knobs for one synthetic cross-market federation.

    ``affinity`` modulates within-block edge probabilities by pairwise
    feature similarity (p -> p^w with w falling in the pair's standardized
    similarity), so pairs of similar items interact more often and rankings
    inside a block become learnable. 0 disables the modulation (plain block
    model); probabilities 0 and 1 are preserved exactly at any affinity.
    """

    n_markets: int = 6
    n_items: int = 300
    feature_dim: int = 32
    n_blocks: int = 4
    intra_p: float = 0.10
    inter_p: float = 0.01
    heterogeneity: float = 0.0
    pairs_per_market: int | None = None
    block_scale: float = 3.0
    noise_scale: float = 1.0
    affinity: float = 0.0
    hidden_dim: int = 0

    def __post_init__(self):
        if self.n_markets < 1 or self.n_items < 2 or self.feature_dim < 1:
            raise ValueError("spec needs >=1 market, >=2 items, >=1 feature dim")
        if self.n_blocks < 1 or self.n_blocks > self.n_items:
            raise ValueError(f"n_blocks must be in [1, {self.n_items}]")
        for name in ("intra_p", "inter_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError(f"heterogeneity must be in [0, 1], got {self.heterogeneity}")
        if self.affinity < 0:
            raise ValueError(f"affinity must be nonnegative, got {self.affinity}")
        if self.hidden_dim < 0:
            raise ValueError(f"hidden_dim must be nonnegative, got {self.hidden_dim}")


def split_pairs(pairs: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 90/10 shuffle split of canonical pairs (at least one pair stays
    in train; nothing is held out when there is only one pair)."""
    pairs = canonical_pairs(pairs)
    n = pairs.shape[0]
    if n == 0:
        raise GraphError("no observed pairs to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(TEST_FRACTION * n)) if n >= 2 else 0
    n_test = min(n_test, n - 1)
    test = pairs[np.sort(order[:n_test])]
    train = pairs[np.sort(order[n_test:])]
    return train, test


def read_edge_file(path) -> np.ndarray:
    path = Path(path)
    pairs = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'item_a<TAB>item_b', got {raw!r}"
                )
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer index: {exc}") from exc
            if a == b:
                raise DataFormatError(f"{path}:{lineno}: self-loop {a}")
            pairs.append((a, b))
    if not pairs:
        raise DataFormatError(f"{path}: no edges found")
    arr = np.asarray(pairs, dtype=np.int64)
    dedup = canonical_pairs(arr)
    if dedup.shape[0] < arr.shape[0]:
        warnings.warn(
            f"{path}: {arr.shape[0] - dedup.shape[0]} duplicate edge(s) removed",
            stacklevel=2,
        )
    return dedup


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            n_str, d_str = header.split(",")
            n, d = int(n_str), int(d_str)
        except ValueError as exc:
            raise DataFormatError(f"{path}:1: header must be 'n,d', got {header!r}") from exc
        rows = np.zeros((n, d), dtype=np.float64)
        for i in range(n):
            lineno = i + 2
            line = fh.readline()
            if not line:
                raise DataFormatError(f"{path}:{lineno}: expected {n} feature rows")
            try:
                row = np.fromstring(line, sep=",", dtype=np.float64)
            except ValueError as exc:  # pragma: no cover - numpy warns instead
                raise DataFormatError(f"{path}:{lineno}: bad float row: {exc}") from exc
            if row.size != d:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {d} values, got {row.size}"
                )
            rows[i] = row
    return rows


def write_edge_file(path, pairs: np.ndarray) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# item_a\titem_b\n")
        for a, b in canonical_pairs(pairs):
            fh.write(f"{a}\t{b}\n")


def write_feature_file(path, features: np.ndarray) -> None:
    path = Path(path)
    features = np.asarray(features, dtype=np.float64)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{features.shape[0]},{features.shape[1]}\n")
        for row in features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_market(edge_path, feature_path, market_id: str, split_seed: int = 0) -> MarketGraph:
    """Load one market and apply the seeded 90/10 train/test pair split."""
    features = read_feature_file(feature_path)
    pairs = read_edge_file(edge_path)
    n = features.shape[0]
    if pairs.max() >= n or pairs.min() < 0:
        raise DataFormatError(
            f"{edge_path}: edge index out of range for {n} items"
        )
    train, test = split_pairs(pairs, split_seed)
    return MarketGraph.build(market_id, features, train, test)


# chosen so that the share of base structure two markets still agree on
# falls linearly in h: a base pair survives one market's shuffle when both
# endpoints stay put, and must survive both markets' shuffles to be shared
_SHUFFLE_EXPONENT = 0.25


def _block_assignment(base: np.ndarray, h: float, rng: np.random.Generator) -> np.ndarray:
    """Shuffle the community assignment of a random item subset.

    The shuffled fraction is 1 - (1-h)^0.25; h=0 keeps the base assignment,
    h=1 is an independent uniform permutation of the whole vector per market,
    and between them the expected cross-market structural overlap decays
    linearly in h.
    """
    out = base.copy()
    fraction = 1.0 - max(1.0 - h, 0.0) ** _SHUFFLE_EXPONENT
    n_perm = int(round(fraction * base.size))
    if n_perm >= 2:
        idx = rng.choice(base.size, size=n_perm, replace=False)
        out[idx] = out[idx][rng.permutation(n_perm)]
    return out


def _affinity_exponents(features: np.ndarray, affinity: float) -> np.ndarray:
    """Pairwise exponents w = exp(-affinity * standardized cosine similarity):
    similar pairs get w < 1 (raising p^w), dissimilar pairs w > 1."""
    norms = np.linalg.norm(features, axis=1)
    sims = (features @ features.T) / np.maximum(np.outer(norms, norms), 1e-12)
    iu = np.triu_indices_from(sims, k=1)
    spread = sims[iu].std()
    z = (sims - sims[iu].mean()) / max(spread, 1e-12)
    return np.exp(-affinity * z)


def _sample_block_edges(assignment: np.ndarray, intra_p: float, inter_p: float,
                        rng: np.random.Generator,
                        exponents: np.ndarray | None = None) -> np.ndarray:
    n = assignment.size
    same = assignment[:, None] == assignment[None, :]
    prob = np.where(same, intra_p, inter_p)
    if exponents is not None:
        prob = prob ** exponents
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    return np.argwhere(upper).astype(np.int64)


def generate_features(spec: SyntheticSpec, assignment: np.ndarray,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(observed, latent) item features.

    Latent positions span ``feature_dim + hidden_dim`` coordinates of
    block-mean + noise structure; pairwise affinities are computed on the
    full latent positions, but markets only observe the first
    ``feature_dim`` coordinates (standardized). A nonzero hidden part makes
    edges only partially explainable from the observed features, the rest
    being recoverable through graph neighborhoods alone.
    """
    total = spec.feature_dim + spec.hidden_dim
    means = rng.normal(scale=spec.block_scale, size=(spec.n_blocks, total))
    noise = rng.normal(scale=spec.noise_scale, size=(spec.n_items, total))
    latent = means[assignment] + noise
    observed = latent[:, :spec.feature_dim]
    observed = (observed - observed.mean(axis=0)) / np.maximum(observed.std(axis=0), 1e-9)
    return observed, latent


def generate_federation(spec: SyntheticSpec, seed: int) -> list[MarketGraph]:
    """Deterministic synthetic federation: shared features, per-market
    h-permuted block structure, per-market seeded edge draws and splits."""
    root = np.random.SeedSequence(seed)
    base_rng = np.random.default_rng(root.spawn(1)[0])
    base_assignment = np.sort(base_rng.integers(0, spec.n_blocks, size=spec.n_items))
    features, latent = generate_features(spec, base_assignment, base_rng)
    exponents = _affinity_exponents(latent, spec.affinity) if spec.affinity > 0 else None
    markets = []
    for i in range(spec.n_markets):
        market_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, i)))
        assignment = _block_assignment(base_assignment, spec.heterogeneity, market_rng)
        pairs = _sample_block_edges(assignment, spec.intra_p, spec.inter_p, market_rng,
                                    exponents)
        if pairs.shape[0] == 0:
            raise GraphError(
                f"synthetic market m{i}: no edges sampled; raise intra_p/inter_p"
            )
        if spec.pairs_per_market is not None and pairs.shape[0] > spec.pairs_per_market:
            keep = market_rng.choice(
                pairs.shape[0], size=spec.pairs_per_market, replace=False
            )
            pairs = pairs[np.sort(keep)]
        split_seed = int(market_rng.integers(2**32))
        train, test = split_pairs(pairs, split_seed)
        markets.append(MarketGraph.build(f"m{i}", features, train, test))
    return markets


def sample_negatives(market: MarketGraph, per_positive: int, seed: int) -> np.ndarray:
    """(query, positive, negative) triplets over the market's train pairs.

    Each undirected pair contributes both query orientations. Negatives are
    uniform over items that are neither the query, nor one of its train-graph
    neighbors, nor one of its held-out partners — so no observed pair ever
    appears as a negative. Queries adjacent to everything are skipped with a
    warning.
    """
    if market.train_pairs.shape[0] == 0:
        raise GraphError(f"market {market.market_id!r}: no train pairs")
    rng = np.random.default_rng(seed)
    blocked: dict[int, set] = {}
    for pairs in (market.train_pairs, market.test_pairs):
        for a, b in pairs:
            blocked.setdefault(int(a), {int(a)}).add(int(b))
            blocked.setdefault(int(b), {int(b)}).add(int(a))
    candidates = {
        a: np.array(sorted(set(range(market.n_items)) - taken), dtype=np.int64)
        for a, taken in blocked.items()
    }
    triplets = []
    skipped = set()
    for a, b in market.train_pairs:
        for query, pos in ((int(a), int(b)), (int(b), int(a))):
            pool = candidates[query]
            if pool.size == 0:
                skipped.add(query)
                continue
            for neg in rng.choice(pool, size=per_positive, replace=True):
                triplets.append((query, pos, int(neg)))
    if skipped:
        warnings.warn(
            f"market {market.market_id!r}: skipped {len(skipped)} query item(s) "
            "with no admissible negatives",
            stacklevel=2,
        )
    if not triplets:
        raise GraphError(f"market {market.market_id!r}: no negative triplets drawable")
    return np.asarray(triplets, dtype=np.int64)
