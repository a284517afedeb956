"""Experiment configuration: typed sections, strict loading, stable hashing.

One YAML file configures the whole pipeline. Unknown keys are rejected
(typos must not silently fall back to defaults), and the config hash is
computed over the canonical resolved dict so two files that resolve to the
same settings hash identically regardless of key order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

LOSS_NAMES = ("seg", "cls", "txt", "rec")


@dataclass
class DataConfig:
    num_clips: int = 8
    frames: int = 6  # fixed clip length; loaders reject anything else
    height: int = 32
    width: int = 32
    voxel_dim: int = 2048
    max_objects: int = 2
    noise_scale: float = 0.01


@dataclass
class ConceptConfig:
    priority_multiplier: float = 2.0
    # None -> package data-file defaults
    priority: list[str] | None = None
    background: list[str] | None = None


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    mlp_blocks: int = 2
    prior_blocks: int = 2
    tokens: int = 16  # per-frame token count, laid out on a sqrt(N) grid
    channels: int = 64
    text_tokens: int = 8
    attention_dim: int = 32
    latent_channels: int = 4
    vocab_size: int = 512
    text_layers: int = 2
    text_heads: int = 4
    text_width: int = 64
    dropout: float = 0.0


@dataclass
class BrainTrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    ridge_weight_decay: float = 1e-4
    tau: float = 0.006
    mixco_alpha: float = 0.15


@dataclass
class DecouplerTrainConfig:
    epochs: int = 400
    batch_size: int = 4
    lr: float = 5e-3
    prior_lr_mult: float = 0.1
    period_epochs: int = 20
    period_starts: list[int] = field(default_factory=lambda: [0, 5, 10, 15])
    # test/debug escape hatch: force a loss weight to a constant
    weight_overrides: dict[str, float] = field(default_factory=dict)
    max_caption_len: int = 32


@dataclass
class InferConfig:
    mask_threshold: float = 0.5
    source_fps: float = 3.0
    target_fps: float = 8.0
    control_blend: float = 0.3
    noise_scale: float = 0.02
    backend: str = "stub"


@dataclass
class EvalConfig:
    nway_repeats: int = 100
    top_k: int = 1
    num_labels: int = 64
    verb_sim_threshold: float = 0.8


@dataclass
class ExperimentConfig:
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    concepts: ConceptConfig = field(default_factory=ConceptConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    brain: BrainTrainConfig = field(default_factory=BrainTrainConfig)
    decoupler: DecouplerTrainConfig = field(default_factory=DecouplerTrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{path}' must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{path}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        fld = known[name]
        default = fld.default if fld.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"'{path}.{name}' must be a bool")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"'{path}.{name}' must be an int, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{path}.{name}' must be a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"'{path}.{name}' must be a string, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    """Build a validated config from a (possibly partial) nested dict."""
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    seed = raw.pop("seed", 7)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"'seed' must be an int, got {seed!r}")

    section_cls = {
        "data": DataConfig,
        "concepts": ConceptConfig,
        "model": ModelConfig,
        "brain": BrainTrainConfig,
        "decoupler": DecouplerTrainConfig,
        "infer": InferConfig,
        "eval": EvalConfig,
    }
    kwargs: dict[str, Any] = {"seed": seed}
    for name, cls in section_cls.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name)
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    d, m = cfg.data, cfg.model
    if d.frames != 6:
        raise ConfigError(f"data.frames is fixed at 6, got {d.frames}")
    if d.num_clips < 1:
        raise ConfigError("data.num_clips must be >= 1")
    for dim_name in ("height", "width"):
        v = getattr(d, dim_name)
        if v <= 0 or v % 8 != 0:
            raise ConfigError(f"data.{dim_name} must be a positive multiple of 8, got {v}")
    if d.voxel_dim < 1:
        raise ConfigError("data.voxel_dim must be >= 1")
    if d.max_objects < 1:
        raise ConfigError("data.max_objects must be >= 1")
    if d.noise_scale < 0:
        raise ConfigError("data.noise_scale must be >= 0")

    if cfg.concepts.priority_multiplier <= 0:
        raise ConfigError("concepts.priority_multiplier must be > 0")

    root = int(round(m.tokens ** 0.5))
    if root * root != m.tokens:
        raise ConfigError(f"model.tokens must be a perfect square, got {m.tokens}")
    for name in ("hidden_dim", "channels", "text_tokens", "attention_dim",
                 "latent_channels", "text_width", "text_layers", "text_heads"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be >= 1")
    if m.text_width % m.text_heads != 0:
        raise ConfigError("model.text_width must be divisible by model.text_heads")
    if m.vocab_size < 4:
        raise ConfigError("model.vocab_size must be >= 4 (pad/bos/eos/unk)")
    if not 0.0 <= m.dropout < 1.0:
        raise ConfigError("model.dropout must be in [0, 1)")

    for section_name, section in (("brain", cfg.brain), ("decoupler", cfg.decoupler)):
        if section.epochs < 1:
            raise ConfigError(f"{section_name}.epochs must be >= 1")
        if section.batch_size < 1:
            raise ConfigError(f"{section_name}.batch_size must be >= 1")
        if section.lr <= 0:
            raise ConfigError(f"{section_name}.lr must be > 0")
    if cfg.brain.tau <= 0:
        raise ConfigError("brain.tau must be > 0")
    if cfg.brain.mixco_alpha <= 0:
        raise ConfigError("brain.mixco_alpha must be > 0")

    dec = cfg.decoupler
    if dec.period_epochs < 1:
        raise ConfigError("decoupler.period_epochs must be >= 1")
    if len(dec.period_starts) != 4:
        raise ConfigError("decoupler.period_starts needs one start per loss (seg, cls, txt, rec)")
    if any((isinstance(s, bool) or not isinstance(s, int) or s < 0) for s in dec.period_starts):
        raise ConfigError("decoupler.period_starts must be non-negative ints")
    bad = sorted(set(dec.weight_overrides) - set(LOSS_NAMES))
    if bad:
        raise ConfigError(f"decoupler.weight_overrides has unknown loss name(s): {', '.join(bad)}")
    for k, v in dec.weight_overrides.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
            raise ConfigError(f"decoupler.weight_overrides['{k}'] must be a number >= 0")
    if dec.max_caption_len < 1:
        raise ConfigError("decoupler.max_caption_len must be >= 1")

    inf = cfg.infer
    if not 0.0 < inf.mask_threshold < 1.0:
        raise ConfigError("infer.mask_threshold must be in (0, 1)")
    if inf.source_fps <= 0 or inf.target_fps <= 0:
        raise ConfigError("infer fps values must be > 0")
    if not 0.0 <= inf.control_blend <= 1.0:
        raise ConfigError("infer.control_blend must be in [0, 1]")
    if inf.noise_scale < 0:
        raise ConfigError("infer.noise_scale must be >= 0")

    ev = cfg.eval
    if ev.nway_repeats < 1:
        raise ConfigError("eval.nway_repeats must be >= 1")
    if ev.top_k < 1:
        raise ConfigError("eval.top_k must be >= 1")
    if ev.num_labels < 51:
        raise ConfigError("eval.num_labels must be >= 51 so 50-way retrieval is defined")
    if not 0.0 < ev.verb_sim_threshold <= 1.0:
        raise ConfigError("eval.verb_sim_threshold must be in (0, 1]")


def load_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a YAML config file. Missing keys take defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical resolved config; stable under key reordering."""
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode("utf-8")).hexdigest()
