"""Configuration dataclasses and the key-value config file reader."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 512          # C_f, identity feature channels
    style_channels: int = 64     # C_M, channels per style tap
    n_taps: int = 2
    gamma_dim: int = 64
    norm_dim: int = 64           # c, sinusoidal norm embedding size
    n_centers: int = 4           # M
    n_layers: int = 2            # key transformer depth
    n_heads: int = 4
    ffn_mult: int = 4
    mixer_depth: int = 2
    token_hidden: int = 64
    channel_hidden: int = 256
    q: int = 10
    k: float = 3.0
    bn_momentum: float = 0.1
    max_batch: int = 256         # largest N' accepted by a streaming update

    @property
    def style_dim(self) -> int:
        return self.gamma_dim + self.norm_dim

    def validate(self) -> "ModelConfig":
        if self.q < 1 or self.k <= 0:
            raise ConfigError("need q >= 1 and k > 0")
        if self.norm_dim % 2:
            raise ConfigError("norm_dim must be even")
        if self.style_dim % self.n_heads:
            raise ConfigError("style_dim must divide evenly into heads")
        if self.n_centers < 1 or self.max_batch < 1:
            raise ConfigError("n_centers and max_batch must be positive")
        return self


@dataclass(frozen=True)
class CorpusConfig:
    n_ids: int = 640
    per_id: int = 32
    low_quality_frac: float = 0.7
    world_seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(feat_dim=128, style_channels=32))
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0
    epochs: int = 10
    subjects_per_step: int = 32          # B
    min_set: int = 2
    max_set: int = 16
    lr: float = 1e-3
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    decay_epochs: tuple[int, ...] = (6, 9)   # 1-based epochs at which lr is multiplied by 0.1
    lambda_t: float = 1.0
    lambda_p: float = 1.0
    style_noise: float = 0.05            # train-time augmentation on style stats
    averaged_targets: bool = False       # use per-subject feature means as f_GT
    max_splits: int = 4


def _coerce(value: str):
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        return value


def _replace(obj, updates: dict, prefix: str):
    names = {f.name for f in dataclasses.fields(obj)}
    for key in updates:
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
    return dataclasses.replace(obj, **updates)


def parse_train_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines into a TrainConfig.

    Keys may be prefixed with ``model.`` or ``corpus.``; ``#`` starts a
    comment; values are Python literals (numbers, tuples, booleans) or bare
    strings.
    """
    cfg = base or TrainConfig()
    top, model, corpus = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        val = _coerce(value)
        if key.startswith("model."):
            model[key[6:]] = val
        elif key.startswith("corpus."):
            corpus[key[7:]] = val
        else:
            top[key] = val
    for key in ("betas", "decay_epochs"):
        if key in top:
            top[key] = tuple(top[key]) if isinstance(top[key], (list, tuple)) else (top[key],)
    cfg = _replace(cfg, top, "")
    cfg = dataclasses.replace(
        cfg,
        model=_replace(cfg.model, model, "model.").validate(),
        corpus=_replace(cfg.corpus, corpus, "corpus."),
    )
    return cfg


def load_train_config(path: str | Path) -> TrainConfig:
    return parse_train_config(Path(path).read_text())
