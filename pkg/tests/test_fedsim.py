"""Federation orchestration: determinism, checkpoint/replay, message
envelopes, leakage audit, and mode-equivalence oracles."""
import json
from pathlib import Path

import numpy as np
import pytest

from fedrec.data import SyntheticSpec, generate_federation
from fedrec.fedsim import (
    CheckpointError,
    FederationState,
    ModelConfig,
    decode_envelope,
    derive_seed,
    encode_envelope,
    evaluate_checkpoint,
    market_fingerprint,
    replay,
    run_federation,
)
from fedrec.pfl import AdaptationConfig
from fedrec.summary import decode_summary


def small_federation(n_markets=2, seed=3, h=0.5):
    spec = SyntheticSpec(n_markets=n_markets, n_items=24, feature_dim=6,
                         n_blocks=3, intra_p=0.5, inter_p=0.05,
                         heterogeneity=h, block_scale=1.0)
    return generate_federation(spec, seed=seed)


def small_config(**overrides):
    base = dict(lambda_w=1.0, lambda_s=0.01, n_tau=3, n_r=1, inner_steps=4,
                server_mix=0.9, learning_rate=0.05)
    base.update(overrides)
    return AdaptationConfig(**base)


def small_model():
    return ModelConfig(n_components=3, n_clusters=2, power=2, tau=1.0, cutoff=5)


class TestEnvelopes:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        arrays = {"phi_0": rng.standard_normal((3, 2)),
                  "phi_1": rng.standard_normal((3, 2))}
        blobs = {"xi": b"payload-bytes"}
        blob = encode_envelope("message", "m0", 4, arrays, blobs)
        header, out_arrays, out_blobs = decode_envelope(blob)
        assert header["market_id"] == "m0"
        assert header["round"] == 4
        for name in arrays:
            np.testing.assert_array_equal(out_arrays[name], arrays[name])
        assert out_blobs["xi"] == b"payload-bytes"

    def test_deterministic_bytes(self):
        arrays = {"phi_0": np.arange(6.0).reshape(2, 3)}
        assert encode_envelope("global", "*server*", 1, arrays) == \
            encode_envelope("global", "*server*", 1, arrays)

    def test_tampered_length_rejected(self):
        blob = encode_envelope("message", "m", 0, {"phi_0": np.ones((2, 2))})
        with pytest.raises(CheckpointError, match="length"):
            decode_envelope(blob[:-10])

    def test_corrupt_payload_rejected(self):
        blob = bytearray(encode_envelope("message", "m", 0, {"phi_0": np.ones((2, 2))}))
        blob[-10] ^= 0x55
        with pytest.raises(CheckpointError, match="checksum"):
            decode_envelope(bytes(blob))


class TestSeedSchedule:
    def test_streams_differ_by_round_and_client(self):
        a = derive_seed(5, 1, round_index=1, client_index=0).generate_state(4)
        b = derive_seed(5, 1, round_index=2, client_index=0).generate_state(4)
        c = derive_seed(5, 1, round_index=1, client_index=1).generate_state(4)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_reproducible(self):
        a = derive_seed(5, 1, 3, 2).generate_state(4)
        b = derive_seed(5, 1, 3, 2).generate_state(4)
        np.testing.assert_array_equal(a, b)


class TestRunFederation:
    def test_zero_rounds_returns_initial_state_no_trace(self, tmp_path):
        markets = small_federation()
        state = run_federation(markets, small_config(n_tau=0), "pf-gnn-plus",
                               master_seed=1, model=small_model(),
                               checkpoint_dir=tmp_path / "run")
        assert state.round == 0
        assert state.trace == []
        assert state.phi_star is not None and state.xi_star is not None
        assert (tmp_path / "run" / "rounds" / "round_0000" / "global.bin").is_file()

    @pytest.mark.parametrize("mode", ["pf-gnn", "pf-gnn-plus", "f-gnn", "local"])
    def test_all_modes_produce_full_traces(self, mode):
        markets = small_federation()
        state = run_federation(markets, small_config(), mode,
                               master_seed=2, model=small_model())
        assert state.round == 3
        assert len(state.trace) == 3 * len(markets)
        for row in state.trace:
            assert np.isfinite(row.loss)
            assert 0.0 <= row.mrr20 <= 1.0

    def test_mismatched_feature_dims_rejected(self):
        markets = small_federation()
        bad = generate_federation(
            SyntheticSpec(n_markets=1, n_items=24, feature_dim=9, n_blocks=3,
                          intra_p=0.5, inter_p=0.05), seed=0)
        with pytest.raises(ValueError, match="feature dim"):
            run_federation(markets + bad, small_config(), "local")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            run_federation(small_federation(), small_config(), "bogus")

    def test_determinism_identical_traces_and_checkpoints(self, tmp_path):
        markets = small_federation()
        for mode in ("pf-gnn-plus", "local"):
            dirs = [tmp_path / f"{mode}-{i}" for i in range(2)]
            for d in dirs:
                run_federation(small_federation(), small_config(), mode,
                               master_seed=7, model=small_model(),
                               checkpoint_dir=d)
            for name in ("trace.csv", "manifest.json"):
                assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
            files0 = sorted(p.relative_to(dirs[0])
                            for p in dirs[0].rglob("*") if p.is_file())
            files1 = sorted(p.relative_to(dirs[1])
                            for p in dirs[1].rglob("*") if p.is_file())
            assert files0 == files1
            for rel in files0:
                assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes(), rel

    def test_duplicated_markets_symmetry_under_shared_round_scheme(self):
        # identical market content + shared per-round stream -> identical
        # adapted feature weights for every client at every round
        spec = SyntheticSpec(n_markets=1, n_items=24, feature_dim=6, n_blocks=3,
                             intra_p=0.5, inter_p=0.05)
        base = generate_federation(spec, seed=9)[0]
        twin_a = base
        from fedrec.graph import MarketGraph

        twin_b = MarketGraph(market_id="twin", n_items=base.n_items,
                             edges=base.edges.copy(), features=base.features.copy(),
                             train_pairs=base.train_pairs.copy(),
                             test_pairs=base.test_pairs.copy())
        state = run_federation([twin_a, twin_b], small_config(n_tau=2),
                               "pf-gnn-plus", master_seed=4, model=small_model(),
                               seed_scheme="shared-round")
        by_round = {}
        for row in state.trace:
            by_round.setdefault(row.round, []).append(row)
        for rows in by_round.values():
            assert rows[0].loss == rows[1].loss
            assert rows[0].mrr20 == rows[1].mrr20

    def test_single_client_full_mix_no_pull_matches_chained_adaptation(self):
        from fedrec.fedsim import _client_stream
        from fedrec.pfl import adapt_client
        from fedrec.graph import normalize_adjacency

        markets = small_federation(n_markets=1)
        config = small_config(lambda_w=0.0, lambda_s=0.0, server_mix=1.0, n_tau=2)
        model = small_model()
        state = run_federation(markets, config, "pf-gnn", master_seed=11,
                               model=model)
        # oracle: chain adapt_client by hand under the same seed schedule
        from fedrec.fedsim import _init_state

        init = _init_state(markets, config, "pf-gnn", model, 11)
        phi = init.phi_star
        prop = normalize_adjacency(markets[0].dense_adjacency(), model.power)
        losses = []
        for t in (1, 2):
            stream = _client_stream(11, t, 0, "per-client")
            ret = adapt_client(
                phi, None, markets[0], config,
                seed=np.random.default_rng(stream).integers(2**63),
                include_structure=False, propagation=prop,
                tau=model.tau, cutoff=model.cutoff,
            )
            losses.append(ret.local_metrics["loss"])
            phi = ret.phi  # beta=1, single client: global = client return
        np.testing.assert_array_equal(state.phi_star[0], phi[0])
        assert [r.loss for r in state.trace] == losses

    def test_local_single_market_matches_direct_encoder_training(self):
        from fedrec.encoder import train_bpr
        from fedrec.fedsim import _client_stream, _init_state
        from fedrec.graph import normalize_adjacency
        from fedrec.metrics import evaluate_market

        markets = small_federation(n_markets=1)
        config = small_config(n_tau=2)
        model = small_model()
        state = run_federation(markets, config, "local", master_seed=13,
                               model=model)
        init = _init_state(markets, config, "local", model, 13)
        w = init.local_weights[markets[0].market_id]
        prop = normalize_adjacency(markets[0].dense_adjacency(), model.power)
        metrics = []
        for t in (1, 2):
            stream = _client_stream(13, t, 0, "per-client")
            res = train_bpr(markets[0], prop, w, epochs=config.epochs_per_round,
                            learning_rate=config.learning_rate,
                            rng=np.random.default_rng(stream))
            w = res.weight
            metrics.append(
                evaluate_market(res.embeddings, res.theta, markets[0],
                                model.cutoff).mrr)
        np.testing.assert_array_equal(
            state.local_weights[markets[0].market_id], w)
        assert [r.mrr20 for r in state.trace] == metrics


class TestLeakageAudit:
    ALLOWED = {
        "pf-gnn": {"phi_0", "phi_1"},
        "pf-gnn-plus": {"phi_0", "phi_1", "xi"},
        "f-gnn": {"phi_0"},
    }
    FORBIDDEN_TOKENS = ("adjacency", "theta", "alpha", "raw_z", "edges")

    @pytest.mark.parametrize("mode", ["pf-gnn", "pf-gnn-plus", "f-gnn", "local"])
    def test_messages_expose_only_permitted_fields(self, tmp_path, mode):
        markets = small_federation()
        run_dir = tmp_path / mode
        run_federation(markets, small_config(n_tau=2), mode, master_seed=5,
                       model=small_model(), checkpoint_dir=run_dir)
        message_files = sorted(run_dir.glob("rounds/*/message_*.bin"))
        if mode == "local":
            assert message_files == []  # nothing is transmitted at all
            return
        assert message_files
        for path in message_files:
            header, arrays, blobs = decode_envelope(path.read_bytes())
            fields = {f["name"] for f in header["fields"]}
            assert fields == self.ALLOWED[mode], path
            for name in fields:
                assert not any(tok in name for tok in self.FORBIDDEN_TOKENS)
            if mode == "pf-gnn-plus":
                summary, market_id, round_index = decode_summary(blobs["xi"])
                assert market_id == header["market_id"]
                assert summary.xi.shape == (2, 3)

    def test_client_return_type_has_no_private_fields(self):
        from fedrec.pfl import ClientReturn

        assert set(ClientReturn.__dataclass_fields__) == {
            "market_id", "phi", "xi", "local_metrics"
        }


class TestReplay:
    def _run_pair(self, tmp_path, mode, n_tau=4, stop_after=2):
        config = small_config(n_tau=n_tau)
        model = small_model()
        full_dir = tmp_path / f"{mode}-full"
        part_dir = tmp_path / f"{mode}-part"
        full = run_federation(small_federation(), config, mode, master_seed=21,
                              model=model, checkpoint_dir=full_dir)
        run_federation(small_federation(), config, mode, master_seed=21,
                       model=model, checkpoint_dir=part_dir,
                       stop_after=stop_after)
        resumed = replay(part_dir, small_federation())
        return full, resumed, full_dir, part_dir

    @pytest.mark.parametrize("mode", ["pf-gnn-plus", "f-gnn", "local"])
    def test_resume_reproduces_uninterrupted_run_bit_exactly(self, tmp_path, mode):
        full, resumed, full_dir, part_dir = self._run_pair(tmp_path, mode)
        assert resumed.round == full.round
        assert (full_dir / "trace.csv").read_bytes() == \
            (part_dir / "trace.csv").read_bytes()
        full_files = sorted(p.relative_to(full_dir)
                            for p in full_dir.rglob("*.bin"))
        part_files = sorted(p.relative_to(part_dir)
                            for p in part_dir.rglob("*.bin"))
        assert full_files == part_files
        for rel in full_files:
            assert (full_dir / rel).read_bytes() == (part_dir / rel).read_bytes(), rel

    def test_empty_directory_rejected(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        with pytest.raises(CheckpointError, match="manifest"):
            replay(empty)

    def test_tampered_global_payload_rejected(self, tmp_path):
        run_dir = tmp_path / "run"
        run_federation(small_federation(), small_config(n_tau=1), "pf-gnn-plus",
                       master_seed=2, model=small_model(), checkpoint_dir=run_dir)
        target = run_dir / "rounds" / "round_0001" / "global.bin"
        blob = bytearray(target.read_bytes())
        blob = blob[:-20]  # truncate payload
        target.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="length|checksum"):
            replay(run_dir, small_federation())

    def test_market_mismatch_rejected(self, tmp_path):
        run_dir = tmp_path / "run"
        run_federation(small_federation(), small_config(n_tau=1), "pf-gnn-plus",
                       master_seed=2, model=small_model(), checkpoint_dir=run_dir)
        other = small_federation(seed=99)
        with pytest.raises(CheckpointError, match="does not match"):
            replay(run_dir, other)

    def test_replay_regenerates_synthetic_markets_from_manifest(self, tmp_path):
        spec = dict(n_markets=2, n_items=24, feature_dim=6, n_blocks=3,
                    intra_p=0.5, inter_p=0.05, heterogeneity=0.5,
                    pairs_per_market=None, block_scale=1.0, noise_scale=1.0)
        markets = generate_federation(SyntheticSpec(**spec), seed=3)
        run_dir = tmp_path / "run"
        run_federation(markets, small_config(n_tau=3), "pf-gnn-plus",
                       master_seed=2, model=small_model(),
                       checkpoint_dir=run_dir,
                       data_manifest={"source": "synthetic", "seed": 3, "spec": spec},
                       stop_after=1)
        resumed = replay(run_dir)  # markets rebuilt from the manifest
        assert resumed.round == 3

    def test_evaluate_checkpoint_matches_final_trace_rows(self, tmp_path):
        run_dir = tmp_path / "run"
        full = run_federation(small_federation(), small_config(n_tau=3),
                              "pf-gnn-plus", master_seed=17, model=small_model(),
                              checkpoint_dir=run_dir)
        rows = evaluate_checkpoint(run_dir, small_federation())
        final = [r for r in full.trace if r.round == 3]
        assert [(r.client, r.loss, r.mrr20, r.ndcg20) for r in rows] == \
            [(r.client, r.loss, r.mrr20, r.ndcg20) for r in final]

    def test_fingerprint_sensitive_to_content(self):
        a, b = small_federation(seed=1)[0], small_federation(seed=2)[0]
        assert market_fingerprint(a) != market_fingerprint(b)
