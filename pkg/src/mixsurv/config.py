"""Pipeline configuration and the flat ``key = value`` config file format.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Values may be quoted.  Tuples are comma separated (``synth_alphas = 5,50``).
Resolution order: defaults < config file < ``--set`` overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # patch selection
    quantile: float = 0.25
    scorer_hidden: int = 128
    # graph-guided clustering
    knn_k: int = 10
    group_size: int = 64
    omega_morph: float = 0.5
    omega_spatial: float = 0.5
    kmeans_iters: int = 100
    # hierarchical attention
    heads: int = 8
    dropout: float = 0.1
    attn_hidden: int = 256
    # survival head
    experts: int = 5
    components: int = 100
    lambda_ent: float = 0.01
    entropy_sign: int = -1
    # optimisation
    epochs: int = 20
    lr: float = 2e-4
    weight_decay: float = 1e-3
    batch_size: int = 1
    grad_clip: float = 5.0
    seed: int = 0
    folds: int = 5
    # ablations
    disable_qgps: bool = False
    disable_ggc_hca: bool = False
    # synthetic cohort generator
    synth_slides: int = 300
    synth_min_patches: int = 32
    synth_max_patches: int = 96
    synth_dim: int = 32
    synth_alphas: tuple = (5.0, 50.0)
    synth_betas: tuple = (3.0, 3.0)
    synth_censoring: float = 0.2

    def __post_init__(self):
        validate(self)

    def replace(self, **kw) -> PipelineConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


DESCRIPTIONS = {
    "quantile": "q: keep the top ceil((1-q) n) patches, 0 <= q < 1",
    "scorer_hidden": "hidden width of the patch scorer",
    "knn_k": "neighbours per node in the similarity graph",
    "group_size": "patches per cluster (last cluster holds the remainder)",
    "omega_morph": "weight of cosine feature similarity",
    "omega_spatial": "weight of spatial kernel similarity",
    "kmeans_iters": "max balanced k-means iterations",
    "heads": "attention heads (must divide feature width)",
    "dropout": "dropout on attention weights and pooled embedding",
    "attn_hidden": "attention-pool hidden width",
    "experts": "number of experts in the survival head",
    "components": "log-logistic components per expert",
    "lambda_ent": "gating-entropy loss weight",
    "entropy_sign": "-1 rewards diverse expert use, +1 penalises it",
    "epochs": "training epochs",
    "lr": "Adam learning rate",
    "weight_decay": "decoupled weight decay",
    "batch_size": "slides per optimiser step",
    "grad_clip": "global gradient-norm clip (0 disables)",
    "seed": "master random seed",
    "folds": "cross-validation folds",
    "disable_qgps": "ablation: keep every patch",
    "disable_ggc_hca": "ablation: pool raw patch features directly",
    "synth_slides": "synthetic cohort size",
    "synth_min_patches": "min patches per synthetic slide",
    "synth_max_patches": "max patches per synthetic slide",
    "synth_dim": "synthetic feature width",
    "synth_alphas": "per-phenotype log-logistic scale (months)",
    "synth_betas": "per-phenotype log-logistic shape",
    "synth_censoring": "fraction of censored synthetic slides",
}

_POSITIVE = {
    "scorer_hidden", "knn_k", "group_size", "kmeans_iters", "heads", "attn_hidden",
    "experts", "components", "epochs", "batch_size", "folds", "synth_slides",
    "synth_min_patches", "synth_dim",
}


def validate(cfg: PipelineConfig) -> None:
    for name in _POSITIVE:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if not 0.0 <= cfg.quantile < 1.0:
        raise ConfigError(f"quantile must lie in [0, 1), got {cfg.quantile}")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ConfigError(f"dropout must lie in [0, 1), got {cfg.dropout}")
    for name in ("omega_morph", "omega_spatial", "lambda_ent", "weight_decay", "grad_clip", "lr"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.omega_morph + cfg.omega_spatial <= 0:
        raise ConfigError("omega_morph + omega_spatial must be positive")
    if cfg.entropy_sign not in (-1, 1):
        raise ConfigError("entropy_sign must be -1 or 1")
    if cfg.folds < 2:
        raise ConfigError("folds must be >= 2")
    if cfg.synth_max_patches < cfg.synth_min_patches:
        raise ConfigError("synth_max_patches < synth_min_patches")
    if not 0.0 <= cfg.synth_censoring < 1.0:
        raise ConfigError("synth_censoring must lie in [0, 1)")
    if len(cfg.synth_alphas) != len(cfg.synth_betas) or not cfg.synth_alphas:
        raise ConfigError("synth_alphas and synth_betas need one entry per phenotype")
    if min(cfg.synth_alphas) <= 0 or min(cfg.synth_betas) <= 0:
        raise ConfigError("synthetic alphas/betas must be positive")


_FIELD_TYPES = {f.name: f.default for f in fields(PipelineConfig)}


def coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELD_TYPES[key]
    raw = raw.strip().strip("\"'")
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.strip("()[]").split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(default).__name__}") from None
    return raw


def parse_assignment(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    return key, coerce(key, raw)


def read_config_file(path) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            k, v = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        out[k] = v
    return out


def resolve_config(path=None, overrides=(), **extra) -> PipelineConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    for item in overrides:
        k, v = parse_assignment(item)
        values[k] = v
    values.update({k: v for k, v in extra.items() if v is not None})
    return PipelineConfig(**values)


def config_from_dict(d: dict[str, Any]) -> PipelineConfig:
    vals = {}
    for k, v in d.items():
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        vals[k] = tuple(v) if isinstance(_FIELD_TYPES[k], tuple) else v
    return PipelineConfig(**vals)
