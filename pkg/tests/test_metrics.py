"""Ranking metrics against a brute-force reference, divergence properties,
heterogeneity diagnostics, and the two reference rankers."""
import numpy as np
import pytest

from fedrec.data import SyntheticSpec, generate_federation
from fedrec.metrics import (
    LN2,
    HeterogeneityMatrix,
    evaluate_market,
    evaluate_popularity,
    evaluate_rankings,
    featmlp_baseline,
    feature_heterogeneity,
    js_divergence,
    mrr_at_n,
    ndcg_at_n,
    popularity_baseline,
    rank_by_score,
    structure_heterogeneity,
)
from fedrec.vgae import train_local_vgae
from tests.test_graph import market_from_edges


class TestMrr:
    def test_first_relevant_rank_one(self):
        assert mrr_at_n([[5, 3, 2]], [{5}], 20) == 1.0

    def test_first_relevant_rank_three(self):
        assert mrr_at_n([[9, 8, 5, 5]], [{5}], 20) == pytest.approx(1 / 3)

    def test_relevant_beyond_cutoff_scores_zero(self):
        ranking = list(range(30))
        assert mrr_at_n([ranking], [{20}], 20) == 0.0  # rank 21 > cutoff
        assert mrr_at_n([ranking], [{19}], 20) == pytest.approx(1 / 20)

    def test_empty_query_set_rejected(self):
        with pytest.raises(ValueError, match="no queries"):
            mrr_at_n([], [], 20)


class TestNdcg:
    def test_single_relevant_rank_one(self):
        assert ndcg_at_n([[7, 1]], [{7}], 20) == pytest.approx(1.0)

    def test_single_relevant_rank_two(self):
        assert ndcg_at_n([[1, 7]], [{7}], 20) == pytest.approx(1 / np.log2(3))

    def test_all_top_irrelevant(self):
        assert ndcg_at_n([list(range(25))], [{30}], 20) == 0.0

    def test_zero_relevant_queries_excluded_and_counted(self):
        result = evaluate_rankings([[1, 2], [2, 1]], [{1}, set()], 20)
        assert result.n_excluded == 1
        assert result.ndcg_values.shape == (1,)
        assert result.reciprocal_ranks.shape == (2,)


def brute_force_metrics(scores, queries, relevants, cutoff):
    """Independent reference ranker: python sorts and literal formulas."""
    rrs, gains = [], []
    for q, relevant in zip(queries, relevants):
        candidates = [i for i in range(scores.shape[1]) if i != q]
        ordered = sorted(candidates, key=lambda i: (-scores[q, i], i))[:cutoff]
        rr = 0.0
        for pos, item in enumerate(ordered, start=1):
            if item in relevant:
                rr = 1.0 / pos
                break
        rrs.append(rr)
        dcg = sum(1.0 / np.log2(pos + 1) for pos, item in enumerate(ordered, start=1)
                  if item in relevant)
        ideal = sum(1.0 / np.log2(pos + 1)
                    for pos in range(1, min(len(relevant), cutoff) + 1))
        gains.append(dcg / ideal)
    return float(np.mean(rrs)), float(np.mean(gains))


@pytest.mark.parametrize("seed", range(6))
def test_metrics_match_brute_force_reference_exactly(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 50))
    n_queries = int(rng.integers(1, min(20, n)))
    scores = rng.standard_normal((n, n))
    # inject score ties to exercise the id tie-break
    scores[rng.random((n, n)) < 0.2] = 0.5
    queries = rng.choice(n, size=n_queries, replace=False)
    relevants = []
    for q in queries:
        pool = [i for i in range(n) if i != q]
        relevants.append(set(rng.choice(pool, size=rng.integers(1, 4), replace=False)))
    rankings = [rank_by_score(scores[q], exclude=q) for q in queries]
    result = evaluate_rankings(rankings, relevants, cutoff=20)
    ref_mrr, ref_ndcg = brute_force_metrics(scores, queries, relevants, 20)
    assert result.mrr == ref_mrr
    assert result.ndcg == ref_ndcg


class TestJsDivergence:
    def test_self_divergence_zero(self):
        p = np.array([0.2, 0.5, 0.3])
        assert js_divergence(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_histograms_reach_ln2(self):
        p = np.array([1.0, 0.0, 0.0])
        q = np.array([0.0, 0.0, 1.0])
        assert js_divergence(p, q) == pytest.approx(LN2, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.random(8), rng.random(8)
        d1, d2 = js_divergence(p, q), js_divergence(q, p)
        assert d1 == pytest.approx(d2, abs=1e-12)
        assert 0.0 <= d1 <= LN2

    def test_matrix_validation(self):
        with pytest.raises(ValueError, match="symmetric"):
            HeterogeneityMatrix(values=np.array([[0.0, 0.1], [0.2, 0.0]]), kind="x")
        with pytest.raises(ValueError, match="diagonal"):
            HeterogeneityMatrix(values=np.full((2, 2), 0.1), kind="x")
        with pytest.raises(ValueError, match="ln 2"):
            HeterogeneityMatrix(values=np.array([[0.0, 1.0], [1.0, 0.0]]), kind="x")


def _observed_markets(seed=0, h=0.0, n_markets=3):
    spec = SyntheticSpec(n_markets=n_markets, n_items=60, feature_dim=6,
                         n_blocks=3, intra_p=0.5, inter_p=0.03,
                         heterogeneity=h, block_scale=3.0, noise_scale=1.0)
    return generate_federation(spec, seed=seed)


class TestFeatureHeterogeneity:
    def test_identical_embeddings_zero_divergence(self):
        markets = _observed_markets()
        rng = np.random.default_rng(0)
        z = rng.standard_normal((60, 4))
        matrix = feature_heterogeneity(markets, [z, z, z], n_bins=10)
        assert matrix.values.max() <= 1e-9

    def test_different_embeddings_positive(self):
        markets = _observed_markets()
        rng = np.random.default_rng(0)
        embeddings = [rng.standard_normal((60, 4)) for _ in markets]
        matrix = feature_heterogeneity(markets, embeddings, n_bins=10)
        assert matrix.kind == "feature"
        off = matrix.values[~np.eye(3, dtype=bool)]
        assert off.min() > 0.0

    def test_requires_pairs(self):
        market = market_from_edges([(0, 1)], 3)  # no held-out pairs
        with pytest.raises(ValueError, match="pairs"):
            feature_heterogeneity([market], [np.zeros((3, 2))])


class TestStructureHeterogeneity:
    def test_identical_markets_near_zero(self):
        market = _observed_markets(n_markets=1)[0]
        matrix = structure_heterogeneity([market, market, market],
                                         walk_length=8, n_walks=60, n_clusters=4,
                                         seed=3)
        assert matrix.values.max() <= 1e-6

    def test_symmetric_zero_diagonal(self):
        markets = _observed_markets(h=1.0)
        matrix = structure_heterogeneity(markets, walk_length=8, n_walks=80,
                                         n_clusters=5, seed=1)
        np.testing.assert_allclose(matrix.values, matrix.values.T, atol=1e-12)
        np.testing.assert_array_equal(np.diag(matrix.values), 0.0)

    def test_too_few_distinct_walks_reduces_clusters_with_warning(self):
        market = market_from_edges([(0, 1)], 2, d=2)
        with pytest.warns(UserWarning, match="reducing clusters"):
            matrix = structure_heterogeneity([market, market], walk_length=2,
                                             n_walks=10, n_clusters=6, seed=0)
        assert matrix.n_markets == 2


# federation used by the heterogeneity-knob checks: purely idiosyncratic
# features (no block anchor) keep locally trained encoders equally sharp at
# every knob value, so histogram divergences track structural disagreement
HETERO_SPEC = dict(n_markets=6, n_items=96, feature_dim=12, n_blocks=6,
                   intra_p=0.5, inter_p=0.005, block_scale=0.0, noise_scale=1.0)
HETERO_WALKS = dict(walk_length=64, n_walks=250, n_clusters=8)


def structure_divergence(markets, seed):
    return structure_heterogeneity(markets, seed=seed, **HETERO_WALKS).mean_offdiag()


def feature_divergence(markets, seed, reps=2):
    """Mean over training replicates; the training seed is shared across
    markets so identical inputs give identical embeddings."""
    vals = []
    for rep in range(reps):
        locals_ = [
            train_local_vgae(m, n_components=8, steps=150, learning_rate=0.1,
                             seed=1000 * rep + seed)
            for m in markets
        ]
        embeddings = [r.mean_embeddings(m.features) for r, m in zip(locals_, markets)]
        vals.append(feature_heterogeneity(markets, embeddings, n_bins=20).mean_offdiag())
    return float(np.mean(vals))


def heterogeneity_medians(h_values, seeds, kind):
    out = []
    for h in h_values:
        per_seed = []
        for seed in seeds:
            spec = SyntheticSpec(heterogeneity=h, **HETERO_SPEC)
            markets = generate_federation(spec, seed=seed)
            if kind == "structure":
                per_seed.append(structure_divergence(markets, seed))
            else:
                per_seed.append(feature_divergence(markets, seed))
        out.append(float(np.median(per_seed)))
    return out


@pytest.mark.slow
def test_structure_divergence_increases_with_heterogeneity_knob():
    medians = heterogeneity_medians((0.0, 0.5, 1.0), range(3), "structure")
    assert medians[0] < medians[1] < medians[2], medians


class TestPopularity:
    def test_star_center_ranked_first(self):
        market = market_from_edges([(0, 1), (0, 2), (0, 3), (0, 4)], 5)
        rank = popularity_baseline(market)
        for q in range(1, 5):
            assert rank(q)[0] == 0

    def test_uniform_degree_falls_back_to_id_order(self):
        market = market_from_edges([(0, 1), (1, 2), (2, 3), (0, 3)], 4)
        rank = popularity_baseline(market)
        np.testing.assert_array_equal(rank(2), [0, 1, 3])

    def test_degree_sequence_ordering(self):
        # degrees: node0=3, node1=2, node2=2, node3=1 -> order 0,1,2,3
        market = market_from_edges([(0, 1), (0, 2), (0, 3), (1, 2)], 4)
        rank = popularity_baseline(market)
        np.testing.assert_array_equal(rank(3)[:3], [0, 1, 2])


class TestFeatMlp:
    def test_zero_steps_returns_init(self):
        market = market_from_edges([(0, 1), (1, 2)], 4, d=3, test_pairs=[(0, 3)])
        result = featmlp_baseline(market, n_components=2, epochs=0,
                                  learning_rate=0.1, seed=0)
        assert result.losses == []
        np.testing.assert_allclose(result.embeddings,
                                   market.features @ result.weight)
        assert result.theta == (1.0, 0.0)

    def test_gradients_match_finite_differences(self):
        from fedrec import autodiff as ad
        from fedrec.encoder import Decoder, bpr_loss, init_weight

        market = market_from_edges([(0, 1), (1, 2), (2, 3)], 5, d=3)
        rng = np.random.default_rng(0)
        weight = ad.parameter(init_weight(rng, 3, 2), name="weight")
        decoder = Decoder.init()
        triplets = np.array([(0, 1, 4), (2, 1, 4)])

        def loss():
            return bpr_loss(decoder, triplets,
                            ad.matmul(ad.constant(market.features), weight))

        report = ad.grad_check(loss, [weight, *decoder.params])
        assert report.max_rel_error <= 1e-4

    @pytest.mark.slow
    def test_beats_popularity_on_block_synthetic(self):
        gaps = []
        for seed in range(3):
            spec = SyntheticSpec(n_markets=1, n_items=100, feature_dim=12,
                                 n_blocks=4, intra_p=0.3, inter_p=0.02,
                                 block_scale=3.0)
            market = generate_federation(spec, seed=seed)[0]
            result = featmlp_baseline(market, n_components=8, epochs=150,
                                      learning_rate=0.1, seed=seed)
            ours = evaluate_market(result.embeddings, result.theta, market).mrr
            pop = evaluate_popularity(market).mrr
            gaps.append(ours - pop)
        assert np.median(gaps) > 0, gaps
