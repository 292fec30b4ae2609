"""Graph summarization tests: assignment kernel values, summary products,
reconstruction against an independent least-squares oracle, the structural
penalty, and the bit-exact wire format."""
import numpy as np
import pytest

from fedrec import autodiff as ad
from fedrec.encoder import Decoder
from fedrec.summary import (
    ClusterMemory,
    GraphSummary,
    SummaryFormatError,
    assign,
    decode_summary,
    encode_summary,
    reconstruct,
    structural_penalty,
    summarize,
    summarize_embeddings,
)


def memory_from(centers, tau=1.0):
    return ClusterMemory(ad.parameter(np.asarray(centers, dtype=float)), tau=tau)


class TestAssign:
    def test_single_cluster_column_of_ones(self):
        rng = np.random.default_rng(0)
        mem = memory_from(rng.standard_normal((1, 3)))
        c = assign(mem, rng.standard_normal((5, 3)))
        np.testing.assert_allclose(c.value, np.ones((5, 1)))

    def test_two_center_hand_kernels(self):
        # z at the first center, second center at squared distance 1:
        # kernels (1, 1/2) -> row (2/3, 1/3)
        mem = memory_from([[0.0, 0.0], [1.0, 0.0]], tau=1.0)
        c = assign(mem, np.zeros((1, 2)))
        np.testing.assert_allclose(c.value, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_equidistant_rows_uniform(self):
        mem = memory_from([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        c = assign(mem, np.zeros((1, 2)))
        np.testing.assert_allclose(c.value, 0.25, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_rows_stochastic_and_positive(self, seed):
        rng = np.random.default_rng(seed)
        mem = memory_from(rng.standard_normal((4, 3)), tau=float(rng.uniform(0.5, 2)))
        c = assign(mem, rng.standard_normal((7, 3))).value
        np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(c > 0) and np.all(c <= 1)

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((6, 3))
        centers = rng.standard_normal((3, 3))
        shift = rng.standard_normal((1, 3))
        c0 = assign(memory_from(centers), z).value
        c1 = assign(memory_from(centers + shift), z + shift).value
        np.testing.assert_allclose(c0, c1, atol=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        centers = ad.parameter(rng.standard_normal((3, 2)), name="centers")
        z = ad.parameter(rng.standard_normal((5, 2)), name="z")
        probe = rng.standard_normal((5, 3))
        mem = ClusterMemory(centers, tau=1.0)

        def loss():
            return ad.sum_all(ad.mul(assign(mem, z), ad.constant(probe)))

        report = ad.grad_check(loss, [centers, z])
        assert report.max_rel_error <= 1e-4, report.per_param

    def test_empty_memory_rejected(self):
        with pytest.raises(ValueError):
            ClusterMemory(ad.parameter(np.zeros((0, 2))))


class TestSummarize:
    def test_single_cluster_is_column_sum(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5, 3))
        mem = memory_from(rng.standard_normal((1, 3)))
        xi = summarize(mem, z)
        np.testing.assert_allclose(xi.xi, z.sum(axis=0, keepdims=True), atol=1e-12)

    def test_zero_embeddings_zero_summary(self):
        mem = memory_from(np.random.default_rng(2).standard_normal((3, 2)))
        xi = summarize(mem, np.zeros((4, 2)))
        np.testing.assert_allclose(xi.xi, 0.0)

    def test_three_item_two_cluster_hand_product(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((3, 2))
        mem = memory_from(rng.standard_normal((2, 2)))
        c = assign(mem, z).value
        expected = np.zeros((2, 2))
        for b in range(2):
            for a in range(3):
                expected[b] += c[a, b] * z[a]
        np.testing.assert_allclose(summarize(mem, z).xi, expected, atol=1e-12)

    def test_summary_message_immutable(self):
        xi = summarize(memory_from(np.zeros((1, 2))), np.ones((2, 2)))
        with pytest.raises(ValueError):
            xi.xi[0, 0] = 5.0


def lstsq_oracle(c, xi, ridge=1e-6):
    """Independent solver: min ||C^T Zhat - xi||_F^2 + ridge ||Zhat||_F^2 via
    the stacked augmented system."""
    n = c.shape[0]
    k = xi.shape[1]
    top = c.T
    bottom = np.sqrt(ridge) * np.eye(n)
    stacked = np.vstack([top, bottom])
    target = np.vstack([xi, np.zeros((n, k))])
    out, *_ = np.linalg.lstsq(stacked, target, rcond=None)
    return out


class TestReconstruct:
    def test_full_rank_round_trip_identity(self):
        # c = n with near-diagonal assignments: summarize-then-reconstruct
        # recovers the embeddings to within the ridge floor
        z = 0.5 * np.array([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        mem = memory_from(z.copy(), tau=1e-3)
        c = assign(mem, z).value
        assert np.linalg.matrix_rank(c) == 4
        xi = summarize_embeddings(mem, ad.constant(z))
        zhat = reconstruct(mem, xi, z).value
        assert np.abs(zhat - z).max() <= 1e-6

    def test_single_cluster_rank_one_rows_equal(self):
        rng = np.random.default_rng(7)
        z = rng.standard_normal((5, 3))
        mem = memory_from(rng.standard_normal((1, 3)))
        xi = summarize_embeddings(mem, ad.constant(z))
        zhat = reconstruct(mem, xi, z).value
        np.testing.assert_allclose(zhat, np.tile(zhat[0], (5, 1)), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_independent_least_squares_oracle(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((4 + seed, 3))
        mem = memory_from(rng.standard_normal((2, 3)))
        xi = rng.standard_normal((2, 3))
        ours = reconstruct(mem, xi, z).value
        oracle = lstsq_oracle(assign(mem, z).value, xi)
        assert np.abs(ours - oracle).max() <= 1e-6

    def test_wrong_summary_rows_rejected(self):
        mem = memory_from(np.zeros((2, 3)))
        with pytest.raises(ad.ShapeMismatchError):
            reconstruct(mem, np.zeros((3, 3)), np.zeros((4, 3)))


class TestStructuralPenalty:
    def test_two_node_hand_value(self):
        # zero summary -> zero reconstruction -> every probability 1/2;
        # one edge: 2*(1-1/2)^2 off-diagonal + 2*(0-1/2)^2 diagonal = 1.0
        dec = Decoder.init()
        mem = memory_from(np.random.default_rng(0).standard_normal((2, 3)))
        adjacency = np.array([[0.0, 1.0], [1.0, 0.0]])
        z_ref = np.random.default_rng(1).standard_normal((2, 3))
        penalty = structural_penalty(dec, mem, np.zeros((2, 3)), adjacency, z_ref)
        assert penalty.item() == pytest.approx(1.0, abs=1e-12)

    def test_empty_graph_saturating_bias_limit(self):
        dec = Decoder(ad.parameter(1.0), ad.parameter(-40.0))
        mem = memory_from(np.random.default_rng(2).standard_normal((2, 2)))
        penalty = structural_penalty(dec, mem, np.zeros((2, 2)),
                                     np.zeros((3, 3)),
                                     np.random.default_rng(3).standard_normal((3, 2)))
        assert penalty.item() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        dec = Decoder.init()
        mem = memory_from(rng.standard_normal((3, 2)))
        a = rng.integers(0, 2, size=(5, 5)).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        z = rng.standard_normal((5, 2))
        xi = rng.standard_normal((3, 2))
        assert structural_penalty(dec, mem, xi, a, z).item() >= 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        dec = Decoder.init()
        centers = ad.parameter(rng.standard_normal((3, 2)), name="centers")
        mem = ClusterMemory(centers, tau=1.0)
        xi = ad.parameter(rng.standard_normal((3, 2)), name="xi")
        a = np.array([
            [0, 1, 0, 0],
            [1, 0, 1, 0],
            [0, 1, 0, 1],
            [0, 0, 1, 0],
        ], dtype=float)
        z_ref = rng.standard_normal((4, 2))

        def loss():
            return structural_penalty(dec, mem, xi, a, z_ref)

        report = ad.grad_check(loss, [centers, xi, *dec.params])
        assert report.max_rel_error <= 1e-4, report.per_param


class TestWireFormat:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(9)
        summary = GraphSummary(xi=rng.standard_normal((3, 5)))
        blob = encode_summary(summary, "market-7", 12)
        decoded, market_id, round_index = decode_summary(blob)
        assert market_id == "market-7"
        assert round_index == 12
        assert decoded.xi.tobytes() == summary.xi.tobytes()

    def test_deterministic_encoding(self):
        summary = GraphSummary(xi=np.arange(6.0).reshape(2, 3))
        assert encode_summary(summary, "m", 1) == encode_summary(summary, "m", 1)

    def test_truncated_payload_rejected(self):
        blob = encode_summary(GraphSummary(xi=np.ones((2, 2))), "m", 0)
        with pytest.raises(SummaryFormatError, match="length"):
            decode_summary(blob[:-6])

    def test_corrupted_payload_rejected(self):
        blob = bytearray(encode_summary(GraphSummary(xi=np.ones((2, 2))), "m", 0))
        blob[-8] ^= 0xFF  # flip a payload byte
        with pytest.raises(SummaryFormatError, match="checksum"):
            decode_summary(bytes(blob))

    def test_bad_magic_rejected(self):
        with pytest.raises(SummaryFormatError, match="magic"):
            decode_summary(b"XXXX" + b"\x00" * 30)
