"""Round-synchronous federation simulator.

Runs the server-client workflow end to end over a set of markets in one of
four modes:

* ``pf-gnn-plus`` — personalized federation of feature weights and graph
  summaries (proximal client adaptation, server mixing);
* ``pf-gnn``      — personalized federation of feature weights only;
* ``f-gnn``       — plain federated averaging of feature weights;
* ``local``       — per-market training, no communication.

Everything is a pure function of (markets, config, master seed): randomness
flows through counter-derived per-(purpose, round, client) streams, every
round is checkpointed in a bit-exact binary envelope format, and an
interrupted run resumed from its checkpoint reproduces the uninterrupted
continuation byte for byte.
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, _sigmoid
from .data import SyntheticSpec, generate_federation, load_market
from .encoder import init_weight
from .graph import MarketGraph, normalize_adjacency
from .metrics import evaluate_market
from .pfl import AdaptationConfig, adapt_client, fedavg_round, server_update
from .summary import GraphSummary, decode_summary, encode_summary
from .vgae import train_local_vgae  # noqa: F401  (re-exported for experiment drivers)

MODES = ("pf-gnn", "pf-gnn-plus", "f-gnn", "local")
SEED_SCHEMES = ("per-client", "shared-round")

# purpose codes for the counter-based seed derivation
_STREAM_INIT = 0
_STREAM_CLIENT = 1
_STREAM_SPLIT = 2

_ENVELOPE_MAGIC = b"FENV"
_ENVELOPE_VERSION = 1
_MANIFEST_VERSION = 1

XI_INIT_SCALE = 0.01


class CheckpointError(ValueError):
    """Missing, corrupt, or incompatible checkpoint data."""


@dataclass
class ModelConfig:
    """Shared model dimensions (identical across clients and server)."""

    n_components: int = 16
    n_clusters: int = 8
    power: int = 3
    tau: float = 1.0
    cutoff: int = 20

    def __post_init__(self):
        if self.n_components < 1 or self.n_clusters < 1 or self.power < 1:
            raise ValueError("model dimensions must be positive")


@dataclass
class TraceRow:
    round: int
    client: str
    loss: float
    mrr20: float
    ndcg20: float


@dataclass
class FederationState:
    """Outcome of a federation run: globals, registry, and per-round trace."""

    mode: str
    round: int
    master_seed: int
    market_ids: list[str]
    config: AdaptationConfig
    model: ModelConfig
    phi_star: list[np.ndarray] | None = None
    xi_star: np.ndarray | None = None
    weight_star: np.ndarray | None = None
    local_weights: dict[str, np.ndarray] | None = None
    trace: list[TraceRow] = field(default_factory=list)


def derive_seed(master_seed: int, purpose: int, round_index: int = 0,
                client_index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        int(master_seed), spawn_key=(purpose, round_index, client_index)
    )


def split_seed(master_seed: int, client_index: int) -> int:
    return int(derive_seed(master_seed, _STREAM_SPLIT, 0, client_index).generate_state(1)[0])


def _client_stream(master_seed, round_index, client_index, scheme) -> np.random.SeedSequence:
    idx = client_index if scheme == "per-client" else 0
    return derive_seed(master_seed, _STREAM_CLIENT, round_index, idx)


# ---------------------------------------------------------------------------
# binary envelopes (messages, globals, local state)


def encode_envelope(kind: str, market_id: str, round_index: int,
                    arrays: dict[str, np.ndarray] | None = None,
                    blobs: dict[str, bytes] | None = None) -> bytes:
    arrays = arrays or {}
    blobs = blobs or {}
    fields = []
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        fields.append({"name": name, "type": "array", "rows": arr.shape[0],
                       "cols": arr.shape[1]})
        chunks.append(arr.tobytes())
    for name in sorted(blobs):
        fields.append({"name": name, "type": "blob", "size": len(blobs[name])})
        chunks.append(blobs[name])
    header = json.dumps(
        {"kind": kind, "market_id": market_id, "round": round_index, "fields": fields},
        sort_keys=True,
    ).encode("utf-8")
    payload = b"".join(chunks)
    return (
        _ENVELOPE_MAGIC
        + struct.pack("<BI", _ENVELOPE_VERSION, len(header))
        + header
        + struct.pack("<Q", len(payload))
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def decode_envelope(blob: bytes):
    """Returns (header dict, arrays dict, blobs dict); validates integrity."""
    if blob[:4] != _ENVELOPE_MAGIC:
        raise CheckpointError("bad envelope magic")
    version, header_len = struct.unpack_from("<BI", blob, 4)
    if version != _ENVELOPE_VERSION:
        raise CheckpointError(f"unsupported envelope version {version}")
    offset = 4 + struct.calcsize("<BI")
    header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    (payload_len,) = struct.unpack_from("<Q", blob, offset)
    offset += struct.calcsize("<Q")
    expected = sum(
        8 * f["rows"] * f["cols"] if f["type"] == "array" else f["size"]
        for f in header["fields"]
    )
    if payload_len != expected or len(blob) != offset + payload_len + 4:
        raise CheckpointError(
            f"payload length mismatch: header expects {expected}, "
            f"envelope carries {len(blob) - offset - 4}"
        )
    payload = blob[offset:offset + payload_len]
    (crc,) = struct.unpack_from("<I", blob, offset + payload_len)
    if crc != zlib.crc32(payload):
        raise CheckpointError("payload checksum mismatch")
    arrays, blobs, cursor = {}, {}, 0
    for f in header["fields"]:
        if f["type"] == "array":
            size = 8 * f["rows"] * f["cols"]
            arrays[f["name"]] = np.frombuffer(
                payload[cursor:cursor + size], dtype="<f8"
            ).reshape(f["rows"], f["cols"]).astype(np.float64)
        else:
            size = f["size"]
            blobs[f["name"]] = payload[cursor:cursor + size]
        cursor += size
    return header, arrays, blobs


def market_fingerprint(market: MarketGraph) -> dict:
    crc = zlib.crc32(np.ascontiguousarray(market.edges, "<i8").tobytes())
    crc = zlib.crc32(np.ascontiguousarray(market.features, "<f8").tobytes(), crc)
    crc = zlib.crc32(np.ascontiguousarray(market.test_pairs, "<i8").tobytes(), crc)
    return {
        "market_id": market.market_id,
        "n_items": market.n_items,
        "n_edges": market.n_edges,
        "n_train": int(market.train_pairs.shape[0]),
        "n_test": int(market.test_pairs.shape[0]),
        "crc": crc,
    }


# ---------------------------------------------------------------------------
# checkpoint layout helpers


def _round_dir(root: Path, round_index: int) -> Path:
    return root / "rounds" / f"round_{round_index:04d}"


def _trace_to_csv(rows: list[TraceRow]) -> str:
    lines = ["round,client,loss,mrr20,ndcg20"]
    for r in rows:
        lines.append(f"{r.round},{r.client},{r.loss!r},{r.mrr20!r},{r.ndcg20!r}")
    return "\n".join(lines) + "\n"


def _trace_from_csv(text: str) -> list[TraceRow]:
    rows = []
    lines = text.strip().splitlines()
    for line in lines[1:]:
        rnd, client, loss, mrr, ndcg = line.split(",")
        rows.append(TraceRow(int(rnd), client, float(loss), float(mrr), float(ndcg)))
    return rows


def _write_checkpoint_round(root: Path, state: FederationState, round_index: int,
                            messages: dict[str, bytes], states: dict[str, bytes]):
    rdir = _round_dir(root, round_index)
    rdir.mkdir(parents=True, exist_ok=True)
    arrays = {}
    blobs = {}
    if state.phi_star is not None:
        arrays = {f"phi_{j}": w for j, w in enumerate(state.phi_star)}
        if state.xi_star is not None:
            blobs["xi"] = encode_summary(
                GraphSummary(xi=state.xi_star), "*server*", round_index
            )
    elif state.weight_star is not None:
        arrays = {"phi_0": state.weight_star}
    (rdir / "global.bin").write_bytes(
        encode_envelope("global", "*server*", round_index, arrays, blobs)
    )
    for mid, blob in messages.items():
        (rdir / f"message_{mid}.bin").write_bytes(blob)
    for mid, blob in states.items():
        (rdir / f"state_{mid}.bin").write_bytes(blob)
    (root / "trace.csv").write_text(_trace_to_csv(state.trace), encoding="utf-8")


def _write_manifest(root: Path, state: FederationState, seed_scheme: str,
                    markets, data_manifest):
    manifest = {
        "version": _MANIFEST_VERSION,
        "mode": state.mode,
        "master_seed": state.master_seed,
        "seed_scheme": seed_scheme,
        "config": asdict(state.config),
        "model": asdict(state.model),
        "markets": [market_fingerprint(m) for m in markets],
    }
    if data_manifest is not None:
        manifest["data"] = data_manifest
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _client_message(ret, round_index: int) -> bytes:
    arrays = {f"phi_{j}": w for j, w in enumerate(ret.phi)}
    blobs = {}
    if ret.xi is not None:
        blobs["xi"] = encode_summary(ret.xi, ret.market_id, round_index)
    return encode_envelope("message", ret.market_id, round_index, arrays, blobs)


# ---------------------------------------------------------------------------
# the round loop


def _init_state(markets, config, mode, model, master_seed) -> FederationState:
    rng = np.random.default_rng(derive_seed(master_seed, _STREAM_INIT))
    d = markets[0].feature_dim
    state = FederationState(
        mode=mode, round=0, master_seed=master_seed,
        market_ids=[m.market_id for m in markets], config=config, model=model,
    )
    if mode in ("pf-gnn", "pf-gnn-plus"):
        state.phi_star = [
            init_weight(rng, d, model.n_components),
            init_weight(rng, d, model.n_components),
        ]
        if mode == "pf-gnn-plus":
            state.xi_star = XI_INIT_SCALE * rng.standard_normal(
                (model.n_clusters, model.n_components)
            )
    elif mode == "f-gnn":
        state.weight_star = init_weight(rng, d, model.n_components)
    else:
        w0 = init_weight(rng, d, model.n_components)
        state.local_weights = {m.market_id: w0.copy() for m in markets}
    return state


def _nan_row(round_index: int, market_id: str) -> TraceRow:
    return TraceRow(round_index, market_id, float("nan"), float("nan"), float("nan"))


def _eval_or_nan(embeddings, theta, market, cutoff):
    if market.test_pairs.size == 0:
        return float("nan"), float("nan")
    res = evaluate_market(embeddings, theta, market, cutoff)
    return res.mrr, res.ndcg


def run_federation(
    markets,
    config: AdaptationConfig,
    mode: str,
    *,
    master_seed: int = 0,
    model: ModelConfig | None = None,
    checkpoint_dir=None,
    seed_scheme: str = "per-client",
    data_manifest: dict | None = None,
    stop_after: int | None = None,
) -> FederationState:
    """Execute ``config.n_tau`` rounds in the given mode.

    ``stop_after`` limits how many rounds run (simulating an interruption);
    ``replay`` on the checkpoint directory finishes the remaining rounds.
    """
    markets = list(markets)
    if not markets:
        raise ValueError("run_federation: at least one market required")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; pick one of {MODES}")
    if seed_scheme not in SEED_SCHEMES:
        raise ValueError(f"unknown seed scheme {seed_scheme!r}")
    d = markets[0].feature_dim
    for m in markets:
        if m.feature_dim != d:
            raise ValueError(
                f"market {m.market_id!r} has feature dim {m.feature_dim}, expected {d}"
            )
    model = model or ModelConfig()
    state = _init_state(markets, config, mode, model, master_seed)
    root = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if root is not None:
        _write_manifest(root, state, seed_scheme, markets, data_manifest)
        _write_checkpoint_round(root, state, 0, {}, {})
    return _run_rounds(markets, state, seed_scheme, root, start_round=0,
                       stop_after=stop_after)


def _run_rounds(markets, state: FederationState, seed_scheme: str, root,
                start_round: int, stop_after: int | None) -> FederationState:
    config, model, mode = state.config, state.model, state.mode
    propagations = [normalize_adjacency(m.dense_adjacency(), model.power) for m in markets]
    last_round = config.n_tau if stop_after is None else min(config.n_tau, stop_after)
    for t in range(start_round + 1, last_round + 1):
        messages: dict[str, bytes] = {}
        states: dict[str, bytes] = {}
        if mode in ("pf-gnn", "pf-gnn-plus"):
            returns = []
            for ci, market in enumerate(markets):
                stream = _client_stream(state.master_seed, t, ci, seed_scheme)
                try:
                    ret = adapt_client(
                        state.phi_star,
                        state.xi_star if mode == "pf-gnn-plus" else None,
                        market, config,
                        seed=np.random.default_rng(stream).integers(2**63),
                        include_structure=(mode == "pf-gnn-plus"),
                        propagation=propagations[ci],
                        tau=model.tau,
                        cutoff=model.cutoff,
                    )
                except NonFiniteError as exc:
                    warnings.warn(
                        f"round {t}: client {market.market_id!r} failed ({exc}); skipped",
                        stacklevel=2,
                    )
                    state.trace.append(_nan_row(t, market.market_id))
                    continue
                returns.append(ret)
                messages[market.market_id] = _client_message(ret, t)
                state.trace.append(TraceRow(
                    t, market.market_id,
                    ret.local_metrics["loss"],
                    ret.local_metrics.get("mrr", float("nan")),
                    ret.local_metrics.get("ndcg", float("nan")),
                ))
            state.phi_star, state.xi_star = server_update(
                returns, state.phi_star, state.xi_star, config
            )
        elif mode == "f-gnn":
            clients = []
            for ci, market in enumerate(markets):
                stream = _client_stream(state.master_seed, t, ci, seed_scheme)
                clients.append(
                    (market, propagations[ci], np.random.default_rng(stream).integers(2**63))
                )
            new_weight, results = fedavg_round(clients, state.weight_star, config)
            for ci, (market, res) in enumerate(zip(markets, results)):
                # plain federated averaging serves ONE global model: metrics
                # evaluate the post-aggregation weights on each market
                z_global = _sigmoid(propagations[ci].propagate(market.features) @ new_weight)
                mrr, ndcg = _eval_or_nan(z_global, res.theta, market, model.cutoff)
                state.trace.append(TraceRow(t, market.market_id, res.losses[-1], mrr, ndcg))
                messages[market.market_id] = encode_envelope(
                    "message", market.market_id, t, {"phi_0": res.weight}
                )
            state.weight_star = new_weight
        else:  # local
            from .encoder import train_bpr

            for ci, market in enumerate(markets):
                stream = _client_stream(state.master_seed, t, ci, seed_scheme)
                rng = np.random.default_rng(stream)
                res = train_bpr(
                    market, propagations[ci], state.local_weights[market.market_id],
                    epochs=config.epochs_per_round,
                    learning_rate=config.learning_rate,
                    rng=rng,
                    negatives_per_positive=config.negatives_per_positive,
                )
                state.local_weights[market.market_id] = res.weight
                mrr, ndcg = _eval_or_nan(res.embeddings, res.theta, market, model.cutoff)
                state.trace.append(TraceRow(t, market.market_id, res.losses[-1], mrr, ndcg))
                states[market.market_id] = encode_envelope(
                    "state", market.market_id, t, {"phi_0": res.weight}
                )
        state.round = t
        if root is not None:
            _write_checkpoint_round(root, state, t, messages, states)
    return state


# ---------------------------------------------------------------------------
# checkpoint loading and replay


def _latest_round(root: Path) -> int:
    rounds_dir = root / "rounds"
    if not rounds_dir.is_dir():
        raise CheckpointError(f"{root}: no rounds directory")
    indices = sorted(
        int(p.name.split("_")[1]) for p in rounds_dir.iterdir()
        if p.is_dir() and p.name.startswith("round_")
    )
    if not indices:
        raise CheckpointError(f"{root}: empty checkpoint")
    return indices[-1]


def load_manifest(checkpoint_dir) -> dict:
    root = Path(checkpoint_dir)
    path = root / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"{root}: manifest.json missing")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("version") != _MANIFEST_VERSION:
        raise CheckpointError(
            f"{root}: manifest version {manifest.get('version')} unsupported"
        )
    return manifest


def _markets_from_manifest(manifest: dict):
    data = manifest.get("data")
    if data is None:
        raise CheckpointError(
            "checkpoint has no dataset description; pass the markets explicitly"
        )
    if data["source"] == "synthetic":
        return generate_federation(SyntheticSpec(**data["spec"]), data["seed"])
    if data["source"] == "files":
        return [
            load_market(
                entry["edges"], entry["features"], entry["market_id"],
                split_seed=split_seed(manifest["master_seed"], i),
            )
            for i, entry in enumerate(data["markets"])
        ]
    raise CheckpointError(f"unknown data source {data['source']!r}")


def _state_from_checkpoint(root: Path, manifest: dict, markets, round_index: int) -> FederationState:
    config = AdaptationConfig(**manifest["config"])
    model = ModelConfig(**manifest["model"])
    mode = manifest["mode"]
    state = FederationState(
        mode=mode, round=round_index, master_seed=manifest["master_seed"],
        market_ids=[m.market_id for m in markets], config=config, model=model,
    )
    rdir = _round_dir(root, round_index)
    global_path = rdir / "global.bin"
    if not global_path.is_file():
        raise CheckpointError(f"{rdir}: global.bin missing")
    _, arrays, blobs = decode_envelope(global_path.read_bytes())
    if mode in ("pf-gnn", "pf-gnn-plus"):
        state.phi_star = [arrays[f"phi_{j}"] for j in range(len(arrays))]
        if mode == "pf-gnn-plus":
            summary, _, _ = decode_summary(blobs["xi"])
            state.xi_star = np.array(summary.xi)
    elif mode == "f-gnn":
        state.weight_star = arrays["phi_0"]
    else:
        state.local_weights = {}
        for m in markets:
            spath = rdir / f"state_{m.market_id}.bin"
            if round_index == 0:
                # round 0 stores no per-client states; rebuild the shared init
                state.local_weights = _init_state(
                    markets, config, mode, model, state.master_seed
                ).local_weights
                break
            if not spath.is_file():
                raise CheckpointError(f"{rdir}: state for {m.market_id!r} missing")
            _, sarrays, _ = decode_envelope(spath.read_bytes())
            state.local_weights[m.market_id] = sarrays["phi_0"]
    trace_path = root / "trace.csv"
    if trace_path.is_file():
        state.trace = [
            r for r in _trace_from_csv(trace_path.read_text(encoding="utf-8"))
            if r.round <= round_index
        ]
    return state


def _check_markets(manifest: dict, markets) -> None:
    expected = manifest["markets"]
    if len(expected) != len(markets):
        raise CheckpointError(
            f"checkpoint has {len(expected)} markets, got {len(markets)}"
        )
    for want, market in zip(expected, markets):
        got = market_fingerprint(market)
        if want != got:
            raise CheckpointError(
                f"market {market.market_id!r} does not match the checkpoint "
                f"(expected {want}, got {got})"
            )


def replay(checkpoint_dir, markets=None, stop_after: int | None = None) -> FederationState:
    """Resume an interrupted run from its checkpoint directory.

    Continues from the latest completed round to the configured total and
    writes the continuation back into the same directory; the result is
    byte-identical to the uninterrupted run under the stored seed schedule.
    """
    root = Path(checkpoint_dir)
    manifest = load_manifest(root)
    if markets is None:
        markets = _markets_from_manifest(manifest)
    markets = list(markets)
    _check_markets(manifest, markets)
    start = _latest_round(root)
    state = _state_from_checkpoint(root, manifest, markets, start)
    return _run_rounds(markets, state, manifest["seed_scheme"], root,
                       start_round=start, stop_after=stop_after)


def evaluate_checkpoint(checkpoint_dir, markets=None) -> list[TraceRow]:
    """Final-model metrics: deterministically re-runs the last trained round
    client-side (no files written) and returns its per-market rows, which
    match the in-training trace rows for that round exactly."""
    root = Path(checkpoint_dir)
    manifest = load_manifest(root)
    if markets is None:
        markets = _markets_from_manifest(manifest)
    markets = list(markets)
    _check_markets(manifest, markets)
    last = _latest_round(root)
    if last == 0:
        raise CheckpointError(f"{root}: no trained rounds to evaluate")
    state = _state_from_checkpoint(root, manifest, markets, last - 1)
    state.trace = []
    final = _run_rounds(markets, state, manifest["seed_scheme"], None,
                        start_round=last - 1, stop_after=last)
    return [r for r in final.trace if r.round == last]
