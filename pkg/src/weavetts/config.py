"""Engine configuration: one JSON file drives every command.

Schema (all sections optional; omitted fields take the defaults shown by
``default_config()``):

    {
      "model":    {"d_model", "n_layers", "n_heads", "d_ff", "n_mels",
                   "d_latent", "vocab_size", "max_positions", "frames_per_step"},
      "schedule": {"tokens_per_group", "frames_per_group", "frames_per_step"},
      "weights":  {"reg_weight", "kl_weight", "flux_weight", "stop_weight",
                   "stop_pos_weight", "flux_variant"},
      "runtime":  {"stop_threshold", "min_frames", "max_frames", "sample_times",
                   "seed", "clock_mode", "step_cost_ms", "emit_cost_ms"},
      "training": {"learning_rate", "batch_size", "max_steps", "eval_interval",
                   "grad_clip_norm", "warmup_steps", "seed"},
      "corpus":   {"vocab_size", "n_mels", "frames_per_token", "n_utterances",
                   "min_tokens", "max_tokens", "speaker_count", "noise_std", "seed"},
      "paths":    {"corpus_dir", "checkpoint", "out_dir"}
    }

Unknown keys are rejected, and cross-field consistency (shared reduction
factor, matching vocabulary and mel sizes) is checked up front so every
command fails before doing any work. Every run embeds the config hash in
its outputs for provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError, WeaveTtsError
from .loss import LossWeights
from .model import ModelConfig
from .runtime import RuntimeConfig
from .schedule import ScheduleConfig
from .synthdata import CorpusSpec


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_steps: int = 5000
    eval_interval: int = 250
    grad_clip_norm: float = 1.0
    warmup_steps: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if min(self.batch_size, self.max_steps, self.eval_interval) < 1:
            raise ConfigError("batch_size, max_steps, eval_interval must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: str = "corpus"
    checkpoint: str = "model.smel"
    out_dir: str = "out"


@dataclass
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        if self.model.frames_per_step != self.schedule.frames_per_step:
            raise ConfigError(
                "model.frames_per_step must equal schedule.frames_per_step "
                f"({self.model.frames_per_step} != {self.schedule.frames_per_step})"
            )
        if self.model.vocab_size != self.corpus.vocab_size:
            raise ConfigError(
                "model.vocab_size must equal corpus.vocab_size "
                f"({self.model.vocab_size} != {self.corpus.vocab_size})"
            )
        if self.model.n_mels != self.corpus.n_mels:
            raise ConfigError(
                f"model.n_mels must equal corpus.n_mels "
                f"({self.model.n_mels} != {self.corpus.n_mels})"
            )
        if self.runtime.schedule != self.schedule:
            raise ConfigError("runtime.schedule must mirror the top-level schedule")
        # ScheduleConfig itself enforces frames_per_group % frames_per_step


_SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "weights": LossWeights,
    "runtime": RuntimeConfig,
    "training": TrainingConfig,
    "corpus": CorpusSpec,
    "paths": PathsConfig,
}

# runtime fields that live in the config file (prompt and schedule are
# injected programmatically)
_RUNTIME_FILE_FIELDS = (
    "stop_threshold", "min_frames", "max_frames", "sample_times", "seed",
    "clock_mode", "step_cost_ms", "emit_cost_ms",
)


def _build_section(name: str, cls, data: Dict[str, Any], schedule: Optional[ScheduleConfig]):
    allowed = {f.name for f in fields(cls)}
    if name == "runtime":
        allowed = set(_RUNTIME_FILE_FIELDS)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    try:
        if name == "runtime":
            return RuntimeConfig(schedule=schedule, **data)
        return cls(**data)
    except ConfigError:
        raise
    except (ValueError, TypeError, WeaveTtsError) as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def config_from_dict(raw: Dict[str, Any]) -> EngineConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    schedule = _build_section("schedule", ScheduleConfig, raw.get("schedule", {}), None)
    parts = {"schedule": schedule}
    for name, cls in _SECTIONS.items():
        if name == "schedule":
            continue
        parts[name] = _build_section(name, cls, raw.get(name, {}), schedule)
    cfg = EngineConfig(**parts)
    cfg.validate()
    return cfg


def config_to_dict(cfg: EngineConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        data = asdict(section)
        if name == "runtime":
            data = {k: v for k, v in data.items() if k in _RUNTIME_FILE_FIELDS}
        out[name] = data
    return out


def load_config(path: str | Path) -> EngineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


def save_config(cfg: EngineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n")


def default_config() -> EngineConfig:
    cfg = EngineConfig()
    cfg.validate()
    return cfg


def config_hash(cfg: EngineConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()
