"""Command-line entry point: reproducible experiment drivers.

Subcommands: ``generate`` (synthetic dataset to files), ``train`` (run a
federation, checkpointing every round), ``evaluate`` (final-model metrics
from a checkpoint, or the weight-free popularity reference), and
``heterogeneity`` (pairwise market divergence matrices to CSV). All
randomness flows from the single master seed; reruns with the same config
and seed are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .data import generate_federation, load_market, write_edge_file, write_feature_file
from .fedsim import (
    MODES,
    CheckpointError,
    evaluate_checkpoint,
    replay,
    run_federation,
    split_seed,
)
from .graph import GraphError
from .metrics import evaluate_popularity, feature_heterogeneity, structure_heterogeneity
from .vgae import train_local_vgae


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrec",
        description="Personalized federated graph recommendation experiments",
    )
    parser.add_argument("--version", action="version", version=f"fedrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI config file")
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument("--out", type=Path, default=None, help="output directory override")
    common.add_argument("--force", action="store_true",
                        help="overwrite a non-empty output directory")

    gen = sub.add_parser("generate", parents=[common],
                         help="write a synthetic federation to disk")
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", parents=[common],
                           help="run a federation and checkpoint every round")
    train.add_argument("--mode", choices=MODES, default=None, help="federation mode")
    train.add_argument("--resume", type=Path, default=None,
                       help="checkpoint directory to resume instead of starting fresh")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", parents=[common],
                        help="final-model ranking metrics from a checkpoint")
    ev.add_argument("--checkpoint", type=Path, default=None,
                    help="checkpoint directory (defaults to the config's out dir)")
    ev.add_argument("--baseline", choices=["popularity"], default=None,
                    help="evaluate a weight-free reference instead of a checkpoint")
    ev.set_defaults(func=cmd_evaluate)

    het = sub.add_parser("heterogeneity", parents=[common],
                         help="pairwise market divergence matrices")
    het.set_defaults(func=cmd_heterogeneity)
    return parser


def _load_config(args, require_out: bool = True) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["experiment.seed"] = args.seed
    if args.out is not None:
        overrides["experiment.out"] = str(args.out)
    if getattr(args, "mode", None) is not None:
        overrides["experiment.mode"] = args.mode
    cfg = parse_config(args.config, overrides)
    if require_out and not cfg.out:
        raise ConfigError("an output directory is required (--out or experiment.out)")
    return cfg


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(
                f"{path} exists and is not empty; pass --force to overwrite"
            )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_markets(cfg: ExperimentConfig):
    """Markets plus the data-manifest block recorded in checkpoints."""
    if cfg.source == "synthetic":
        markets = generate_federation(cfg.synthetic, cfg.effective_data_seed)
        manifest = {
            "source": "synthetic",
            "seed": cfg.effective_data_seed,
            "spec": {
                "n_markets": cfg.synthetic.n_markets,
                "n_items": cfg.synthetic.n_items,
                "feature_dim": cfg.synthetic.feature_dim,
                "n_blocks": cfg.synthetic.n_blocks,
                "intra_p": cfg.synthetic.intra_p,
                "inter_p": cfg.synthetic.inter_p,
                "heterogeneity": cfg.synthetic.heterogeneity,
                "pairs_per_market": cfg.synthetic.pairs_per_market,
                "block_scale": cfg.synthetic.block_scale,
                "noise_scale": cfg.synthetic.noise_scale,
            },
        }
        return markets, manifest
    dataset = json.loads((Path(cfg.data_dir) / "dataset.json").read_text("utf-8"))
    entries = []
    markets = []
    for i, entry in enumerate(dataset["markets"]):
        edges = str(Path(cfg.data_dir) / entry["edges"])
        features = str(Path(cfg.data_dir) / entry["features"])
        markets.append(
            load_market(edges, features, entry["market_id"],
                        split_seed=split_seed(cfg.seed, i))
        )
        entries.append({"market_id": entry["market_id"], "edges": edges,
                        "features": features})
    return markets, {"source": "files", "markets": entries}


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(Path(cfg.out), args.force)
    markets = generate_federation(cfg.synthetic, cfg.effective_data_seed)
    entries = []
    for m in markets:
        mdir = out / m.market_id
        mdir.mkdir(exist_ok=True)
        observed = list(map(tuple, m.train_pairs)) + list(map(tuple, m.test_pairs))
        write_edge_file(mdir / "edges.tsv", observed)
        write_feature_file(mdir / "features.csv", m.features)
        entries.append({
            "market_id": m.market_id,
            "edges": f"{m.market_id}/edges.tsv",
            "features": f"{m.market_id}/features.csv",
        })
    manifest = {
        "version": 1,
        "seed": cfg.effective_data_seed,
        "spec": {
            "n_markets": cfg.synthetic.n_markets,
            "n_items": cfg.synthetic.n_items,
            "feature_dim": cfg.synthetic.feature_dim,
            "n_blocks": cfg.synthetic.n_blocks,
            "intra_p": cfg.synthetic.intra_p,
            "inter_p": cfg.synthetic.inter_p,
            "heterogeneity": cfg.synthetic.heterogeneity,
            "pairs_per_market": cfg.synthetic.pairs_per_market,
            "block_scale": cfg.synthetic.block_scale,
            "noise_scale": cfg.synthetic.noise_scale,
        },
        "markets": entries,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                      encoding="utf-8")
    print(f"wrote {len(markets)} markets to {out}")
    return 0


def cmd_train(args) -> int:
    if args.resume is not None:
        state = replay(args.resume)
        print(f"resumed {state.mode} to round {state.round} in {args.resume}")
        return 0
    cfg = _load_config(args)
    out = _prepare_out(Path(cfg.out), args.force)
    markets, data_manifest = _load_markets(cfg)
    children = cfg.expand_grid()
    for label, child in children:
        run_dir = out / label if label else out
        run_dir.mkdir(parents=True, exist_ok=True)
        state = run_federation(
            markets,
            child.adaptation_config(),
            child.mode,
            master_seed=child.seed,
            model=child.model,
            checkpoint_dir=run_dir,
            seed_scheme=child.seed_scheme,
            data_manifest=data_manifest,
        )
        tag = f" [{label}]" if label else ""
        print(f"{state.mode}{tag}: {state.round} rounds, trace in {run_dir / 'trace.csv'}")
    return 0


def _print_metric_table(rows) -> None:
    print(f"{'market':<12}{'mrr20':>10}{'ndcg20':>10}")
    for r in rows:
        print(f"{r['market']:<12}{r['mrr20']:>10.4f}{r['ndcg20']:>10.4f}")


def cmd_evaluate(args) -> int:
    cfg = _load_config(args, require_out=False)
    if args.baseline == "popularity":
        markets, _ = _load_markets(cfg)
        rows = []
        for m in markets:
            res = evaluate_popularity(m, cfg.cutoff)
            rows.append({"market": m.market_id, "mrr20": res.mrr, "ndcg20": res.ndcg})
    else:
        checkpoint = args.checkpoint if args.checkpoint is not None else Path(cfg.out)
        if not Path(checkpoint).is_dir():
            raise CheckpointError(f"checkpoint directory {checkpoint} missing")
        trace_rows = evaluate_checkpoint(checkpoint)
        rows = [
            {"market": r.client, "mrr20": r.mrr20, "ndcg20": r.ndcg20}
            for r in trace_rows
        ]
    _print_metric_table(rows)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        lines = ["market,mrr20,ndcg20"]
        lines += [f"{r['market']},{r['mrr20']!r},{r['ndcg20']!r}" for r in rows]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"metrics written to {out}")
    return 0


def _matrix_csv(matrix, market_ids) -> str:
    lines = ["market," + ",".join(market_ids)]
    for mid, row in zip(market_ids, matrix.values):
        lines.append(mid + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def cmd_heterogeneity(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(Path(cfg.out), args.force)
    markets, _ = _load_markets(cfg)
    locals_ = [
        train_local_vgae(
            m, cfg.model.n_components, cfg.local_vgae_steps,
            cfg.learning_rate[0], seed=cfg.seed + i, power=cfg.model.power,
        )
        for i, m in enumerate(markets)
    ]
    embeddings = [res.mean_embeddings(m.features) for res, m in zip(locals_, markets)]
    feature = feature_heterogeneity(markets, embeddings, n_bins=cfg.bins)
    structure = structure_heterogeneity(
        markets, walk_length=cfg.walk_length, n_walks=cfg.walks_per_market,
        n_clusters=cfg.walk_clusters, seed=cfg.seed,
    )
    ids = [m.market_id for m in markets]
    (out / "feature_js.csv").write_text(_matrix_csv(feature, ids), encoding="utf-8")
    (out / "structure_js.csv").write_text(_matrix_csv(structure, ids), encoding="utf-8")
    print(f"feature mean divergence    {feature.mean_offdiag():.4f}")
    print(f"structure mean divergence  {structure.mean_offdiag():.4f}")
    print(f"matrices written to {out}")
    return 0


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, GraphError, FileExistsError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
