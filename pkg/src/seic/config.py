"""Run configuration: one JSON file plus dotted command-line overrides.

Every section is a dataclass; unknown keys anywhere are rejected. Defaults
are the published training settings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .pairgen import PairGenConfig
from .trainer import Stage2Config, Stage3Config, TrainConfig


@dataclass
class PairGenSection:
    k1: int = 200
    k2: int = 50
    text_temp: float = 0.01
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300


@dataclass
class PathsSection:
    embeddings: str | None = None
    nouns: str | None = None
    noun_embeddings: str | None = None
    pairs_dir: str | None = None
    images: str | None = None
    labels: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None
    out_dir: str = "runs/default"
    runs: list = field(default_factory=list)


@dataclass
class EncoderSection:
    kind: str = "stub"
    dim: int = 64
    image_size: int = 16
    patch: int = 4
    n_blocks: int = 2
    n_heads: int = 4
    seed: int = 0


@dataclass
class SynthSection:
    kind: str = "embeddings"
    N: int = 2000
    D: int = 64
    separation_deg: float = 60.0
    spread_deg: float = 25.0
    imbalance: float = 1.0
    nouns_per_cluster: int = 40
    distractors: int = 200
    signal: float = 3.0
    clutter: float = 1.0
    seed: int = 0


@dataclass
class MetricsSection:
    decimals: int = 3


@dataclass
class RunConfig:
    K: int = 10
    seed: int = 0
    pairgen: PairGenSection = field(default_factory=PairGenSection)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    weights: LossWeights = field(default_factory=LossWeights)
    tau_init: float = 0.07
    tau_hat: float = 1.0
    head_bias: bool = True
    center_strategy: str = "weighted"
    balance_mode: str = "dynamic"
    balance_momentum: float = 0.99
    self_mode: str = "softmatch"
    allow_collapse: bool = False
    deterministic: bool = True
    checkpoint_every: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    synth: SynthSection = field(default_factory=SynthSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            stage2=self.stage2,
            stage3=self.stage3,
            weights=self.weights,
            seed=self.seed,
            tau_init=self.tau_init,
            tau_hat=self.tau_hat,
            head_bias=self.head_bias,
            center_strategy=self.center_strategy,
            balance_mode=self.balance_mode,
            balance_momentum=self.balance_momentum,
            self_mode=self.self_mode,
            allow_collapse=self.allow_collapse,
            deterministic=self.deterministic,
            checkpoint_every=self.checkpoint_every,
        )
        cfg.validate()
        return cfg

    def pairgen_config(self) -> PairGenConfig:
        p = self.pairgen
        return PairGenConfig(self.K, p.k1, p.k2, p.text_temp, p.kmeans_restarts, p.kmeans_max_iter, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, current, where + name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(value, default, key):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            out = type(default)(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from exc
        if isinstance(default, int) and isinstance(value, float) and value != out:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return out
    if isinstance(default, str):
        return str(value)
    if isinstance(default, list):
        if isinstance(value, str):
            return [v for v in value.split(",") if v]
        return list(value)
    return value


def _set_dotted(data: dict, dotted: str, raw: str):
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-object key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[parts[-1]] = value


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            raw = tokens[i + 1]
            i += 2
        pairs.append((key, raw))
    return pairs


def load_config(path=None, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    for key, raw in overrides:
        _set_dotted(data, key, raw)
    return _build(RunConfig, data, "")
