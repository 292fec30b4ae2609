"""Experiment configuration: INI-style files with strict schema validation.

Files use ``key = value`` sections. Unknown sections or keys are rejected.
Every value can be overridden by an environment variable named
``FEDREC_<SECTION>_<KEY>`` (upper case), and the three grid-searchable keys
(``train.learning_rate``, ``train.lambda_w``, ``train.lambda_s``) accept
comma-separated lists that expand into child runs with derived seeds.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticSpec
from .fedsim import MODES, SEED_SCHEMES, ModelConfig
from .pfl import AdaptationConfig

ENV_PREFIX = "FEDREC"
_GRID_STREAM = 9


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _parse_float_list(raw: str) -> tuple[float, ...]:
    values = tuple(float(v.strip()) for v in raw.split(",") if v.strip())
    if not values:
        raise ConfigError(f"expected at least one float, got {raw!r}")
    return values


def _parse_optional_int(raw: str):
    raw = raw.strip()
    return int(raw) if raw else None


def _parse_optional_str(raw: str):
    raw = raw.strip()
    return raw or None


# section -> key -> (parser, default-as-string)
SCHEMA = {
    "experiment": {
        "mode": (str.strip, "pf-gnn-plus"),
        "seed": (int, "0"),
        "out": (str.strip, "runs/experiment"),
        "seed_scheme": (str.strip, "per-client"),
    },
    "data": {
        "source": (str.strip, "synthetic"),
        "n_markets": (int, "6"),
        "n_items": (int, "300"),
        "feature_dim": (int, "32"),
        "n_blocks": (int, "4"),
        "intra_p": (float, "0.10"),
        "inter_p": (float, "0.01"),
        "heterogeneity": (float, "0.7"),
        "pairs_per_market": (_parse_optional_int, ""),
        "block_scale": (float, "3.0"),
        "noise_scale": (float, "1.0"),
        "data_dir": (_parse_optional_str, ""),
        "data_seed": (_parse_optional_int, ""),
    },
    "model": {
        "embedding_dim": (int, "16"),
        "clusters": (int, "8"),
        "propagation_power": (int, "3"),
        "tau": (float, "1.0"),
    },
    "train": {
        "rounds": (int, "30"),
        "learning_rate": (_parse_float_list, "0.1"),
        "lambda_w": (_parse_float_list, "1.0"),
        "lambda_s": (_parse_float_list, "0.01"),
        "local_iterations": (int, "2"),
        "inner_steps": (int, "20"),
        "server_mix": (float, "0.9"),
        "negatives_per_positive": (int, "1"),
    },
    "eval": {
        "cutoff": (int, "20"),
        "bins": (int, "20"),
        "walk_length": (int, "16"),
        "walks_per_market": (int, "200"),
        "walk_clusters": (int, "8"),
        "local_vgae_steps": (int, "200"),
    },
}


@dataclass
class ExperimentConfig:
    """Validated union of all section values."""

    mode: str = "pf-gnn-plus"
    seed: int = 0
    out: str = "runs/experiment"
    seed_scheme: str = "per-client"
    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_dir: str | None = None
    data_seed: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    rounds: int = 30
    learning_rate: tuple[float, ...] = (0.1,)
    lambda_w: tuple[float, ...] = (1.0,)
    lambda_s: tuple[float, ...] = (0.01,)
    local_iterations: int = 2
    inner_steps: int = 20
    server_mix: float = 0.9
    negatives_per_positive: int = 1
    cutoff: int = 20
    bins: int = 20
    walk_length: int = 16
    walks_per_market: int = 200
    walk_clusters: int = 8
    local_vgae_steps: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed_scheme not in SEED_SCHEMES:
            raise ConfigError(
                f"seed_scheme must be one of {SEED_SCHEMES}, got {self.seed_scheme!r}"
            )
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"data source must be synthetic or files, got {self.source!r}")
        if self.source == "files" and not self.data_dir:
            raise ConfigError("data source 'files' requires data_dir")

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def is_grid(self) -> bool:
        return max(len(self.learning_rate), len(self.lambda_w), len(self.lambda_s)) > 1

    def adaptation_config(self, learning_rate=None, lambda_w=None, lambda_s=None) -> AdaptationConfig:
        return AdaptationConfig(
            lambda_w=self.lambda_w[0] if lambda_w is None else lambda_w,
            lambda_s=self.lambda_s[0] if lambda_s is None else lambda_s,
            n_tau=self.rounds,
            n_r=self.local_iterations,
            inner_steps=self.inner_steps,
            server_mix=self.server_mix,
            learning_rate=self.learning_rate[0] if learning_rate is None else learning_rate,
            negatives_per_positive=self.negatives_per_positive,
        )

    def expand_grid(self) -> list[tuple[str, "ExperimentConfig"]]:
        """Cartesian product of the grid keys; each child gets a derived seed
        and keeps scalar values. Single-point grids yield one unnamed child."""
        children = []
        idx = 0
        for lr in self.learning_rate:
            for lw in self.lambda_w:
                for ls in self.lambda_s:
                    if self.is_grid():
                        seed = int(
                            np.random.SeedSequence(
                                self.seed, spawn_key=(_GRID_STREAM, idx)
                            ).generate_state(1)[0]
                        )
                        label = f"run{idx:03d}_lr{lr:g}_lw{lw:g}_ls{ls:g}"
                    else:
                        seed = self.seed
                        label = ""
                    children.append((
                        label,
                        replace(
                            self,
                            learning_rate=(lr,),
                            lambda_w=(lw,),
                            lambda_s=(ls,),
                            seed=seed,
                        ),
                    ))
                    idx += 1
        return children


def _apply_env_overrides(raw: dict) -> None:
    for section, keys in SCHEMA.items():
        for key in keys:
            env_name = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
            if env_name in os.environ:
                raw[section][key] = os.environ[env_name]


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load and validate a config file; ``overrides`` maps 'section.key' to
    raw string values (CLI flags use this)."""
    raw = {section: dict() for section in SCHEMA}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file {path!r} not found")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                raw[section][key] = value
    _apply_env_overrides(raw)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override {dotted!r}")
        raw[section][key] = str(value)

    values = {}
    for section, keys in SCHEMA.items():
        for key, (parse, default) in keys.items():
            raw_value = raw[section].get(key, default)
            try:
                values[(section, key)] = parse(raw_value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw_value!r} ({exc})"
                ) from exc

    try:
        synthetic = SyntheticSpec(
            n_markets=values[("data", "n_markets")],
            n_items=values[("data", "n_items")],
            feature_dim=values[("data", "feature_dim")],
            n_blocks=values[("data", "n_blocks")],
            intra_p=values[("data", "intra_p")],
            inter_p=values[("data", "inter_p")],
            heterogeneity=values[("data", "heterogeneity")],
            pairs_per_market=values[("data", "pairs_per_market")],
            block_scale=values[("data", "block_scale")],
            noise_scale=values[("data", "noise_scale")],
        )
        model = ModelConfig(
            n_components=values[("model", "embedding_dim")],
            n_clusters=values[("model", "clusters")],
            power=values[("model", "propagation_power")],
            tau=values[("model", "tau")],
            cutoff=values[("eval", "cutoff")],
        )
        return ExperimentConfig(
            mode=values[("experiment", "mode")],
            seed=values[("experiment", "seed")],
            out=values[("experiment", "out")],
            seed_scheme=values[("experiment", "seed_scheme")],
            source=values[("data", "source")],
            synthetic=synthetic,
            data_dir=values[("data", "data_dir")],
            data_seed=values[("data", "data_seed")],
            model=model,
            rounds=values[("train", "rounds")],
            learning_rate=values[("train", "learning_rate")],
            lambda_w=values[("train", "lambda_w")],
            lambda_s=values[("train", "lambda_s")],
            local_iterations=values[("train", "local_iterations")],
            inner_steps=values[("train", "inner_steps")],
            server_mix=values[("train", "server_mix")],
            negatives_per_positive=values[("train", "negatives_per_positive")],
            cutoff=values[("eval", "cutoff")],
            bins=values[("eval", "bins")],
            walk_length=values[("eval", "walk_length")],
            walks_per_market=values[("eval", "walks_per_market")],
            walk_clusters=values[("eval", "walk_clusters")],
            local_vgae_steps=values[("eval", "local_vgae_steps")],
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
