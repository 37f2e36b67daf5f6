"""Engine configuration with defaults from the reference deployment."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
import json
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

RELATION_MODES = ("utility", "privacy")
DATE_GRANULARITIES = ("year", "month", "full")
PHASE_NAMES = ("Topic", "Refine", "Predict")
CHANNELS = ("brain", "hand")
PROVIDERS = ("openai", "anthropic", "scripted")


@dataclass(frozen=True)
class PrivacyPolicy:
    """What the remote channel may see."""

    relation_mode: str = "utility"
    anonymization_ratio: float = 1.0
    node_budget: int = 100
    cluster_min_size: int = 2
    date_granularity: str = "year"
    number_bucket_width: float = 10.0
    expose_type_tags: bool = True
    sanitize: bool = True

    def __post_init__(self) -> None:
        if self.relation_mode not in RELATION_MODES:
            raise ValueError(f"relation_mode must be one of {RELATION_MODES}")
        if not 0.0 <= self.anonymization_ratio <= 1.0:
            raise ValueError("anonymization_ratio must be within [0, 1]")
        if self.node_budget < 1:
            raise ValueError("node_budget must be positive")
        if self.cluster_min_size < 2:
            raise ValueError("cluster_min_size must be >= 2")
        if self.date_granularity not in DATE_GRANULARITIES:
            raise ValueError(f"date_granularity must be one of {DATE_GRANULARITIES}")
        if self.number_bucket_width <= 0:
            raise ValueError("number_bucket_width must be positive")

    @property
    def plaintext(self) -> bool:
        return self.anonymization_ratio == 0.0

    def fingerprint(self) -> str:
        return f"{self.relation_mode}:{self.anonymization_ratio:.2f}"

    def compatible_with(self, tag: str, tolerance: float = 0.2) -> bool:
        mode, _, ratio = tag.partition(":")
        try:
            other = float(ratio)
        except ValueError:
            return False
        return mode == self.relation_mode and abs(other - self.anonymization_ratio) <= tolerance + 1e-9


@dataclass(frozen=True)
class SearchLimits:
    d_max: int = 3
    w1: int = 80
    w_max: int = 3
    alpha: float = 0.6
    w_beam: int | None = None
    top_k: int = 5
    similarity_floor: float = 0.35
    brain_select: bool = True
    followup_channel: str = "brain"
    expansion_cap: int = 64

    def __post_init__(self) -> None:
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.w1 < 1 or self.w_max < 1:
            raise ValueError("w1 and w_max must be >= 1")
        if self.w_max > self.w1:
            raise ValueError("w_max must be <= w1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be within [0, 1]")
        if self.w_beam is not None and self.w_beam < 1:
            raise ValueError("w_beam must be >= 1 when set")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 <= self.similarity_floor <= 1.0:
            raise ValueError("similarity_floor must be within [0, 1]")
        if self.followup_channel not in CHANNELS:
            raise ValueError(f"followup_channel must be one of {CHANNELS}")
        if self.expansion_cap < 1:
            raise ValueError("expansion_cap must be >= 1")

    @property
    def beam_width(self) -> int:
        return self.w_beam if self.w_beam is not None else self.w1


@dataclass(frozen=True)
class MemoryConfig:
    enabled: bool = True
    lambda_q: float = 0.5
    lambda_i: float = 0.5
    lambda_sim: float = 0.7
    lambda_hit: float = 0.3
    w_exp: int = 5
    buffer_capacity: int = 1000
    pool_cap: int = 10_000
    useful_score: float = 0.85
    ratio_tolerance: float = 0.2
    store_path: str | None = None
    seed_exemplars: bool = True
    hand_summary: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda_q", "lambda_i", "lambda_sim", "lambda_hit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.w_exp < 1:
            raise ValueError("w_exp must be >= 1")
        if self.buffer_capacity < 1 or self.pool_cap < 1:
            raise ValueError("buffer_capacity and pool_cap must be positive")
        if not 0.0 <= self.useful_score <= 1.0:
            raise ValueError("useful_score must be within [0, 1]")


@dataclass(frozen=True)
class ControllerConfig:
    gate_threshold: float = 0.85
    max_brain_calls: int = 12
    max_retries: int = 1
    phases: tuple[str, ...] = PHASE_NAMES
    llm_gate: bool = False
    hand_policy: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must be within [0, 1]")
        if self.max_brain_calls < 0:
            raise ValueError("max_brain_calls must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not self.phases or any(p not in PHASE_NAMES for p in self.phases):
            raise ValueError(f"phases must be a non-empty subset of {PHASE_NAMES}")
        if "Topic" not in self.phases:
            raise ValueError("the Topic phase cannot be disabled")


@dataclass(frozen=True)
class BackendConfig:
    provider: str = "openai"
    endpoint: str | None = None
    model: str = "gpt-4o-mini"
    key_env: str = "PRIVGEMO_BRAIN_KEY"
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ValueError(f"provider must be one of {PROVIDERS}")


@dataclass(frozen=True)
class EmbedderConfig:
    backend: str = "hashing"
    dim: int = 256
    ngram: int = 3

    def __post_init__(self) -> None:
        if self.backend != "hashing":
            raise ValueError("only the 'hashing' embedder backend is built in")
        if self.dim < 8:
            raise ValueError("dim must be >= 8")
        if self.ngram < 1:
            raise ValueError("ngram must be >= 1")


@dataclass(frozen=True)
class GenerationConfig:
    explore_temperature: float = 0.4
    answer_temperature: float = 0.0
    max_tokens: int = 256
    timeout_s: float = 60.0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


def _default_hand() -> BackendConfig:
    return BackendConfig(
        provider="openai",
        endpoint="http://localhost:8000/v1",
        model="qwen2.5-7b-instruct",
        key_env="PRIVGEMO_HAND_KEY",
    )


@dataclass(frozen=True)
class EngineConfig:
    """All tunables, grouped the way the config file nests them."""

    privacy: PrivacyPolicy = field(default_factory=PrivacyPolicy)
    search: SearchLimits = field(default_factory=SearchLimits)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    brain: BackendConfig = field(default_factory=BackendConfig)
    hand: BackendConfig = field(default_factory=_default_hand)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    @classmethod
    def from_mapping(cls, payload: Mapping[str, Any]) -> "EngineConfig":
        return cls().with_values(_flatten(payload))

    def with_values(self, values: Mapping[str, Any]) -> "EngineConfig":
        """Apply dotted keys such as `privacy.ratio` or `brain.model`."""
        sections: dict[str, dict[str, Any]] = {}
        for dotted, value in values.items():
            section, _, key = dotted.partition(".")
            section = _SECTION_ALIASES.get(section, section)
            if not key or section not in _SECTIONS:
                raise ConfigError(f"unknown config key: {dotted}")
            key = _ALIASES.get(dotted, key)
            current = getattr(self, section)
            known = {f.name: f for f in fields(current)}
            if key not in known:
                raise ConfigError(f"unknown config key: {dotted}")
            sections.setdefault(section, {})[key] = _coerce(value, str(known[key].type), dotted)
        updated = self
        for section, changes in sections.items():
            try:
                updated = replace(updated, **{section: replace(getattr(updated, section), **changes)})
            except ValueError as e:
                raise ConfigError(f"{section}: {e}") from e
        return updated

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in _SECTIONS:
            obj = getattr(self, section)
            out[section] = {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
        return out


_SECTIONS = ("privacy", "search", "memory", "controller", "brain", "hand", "embedder", "generation")
_ALIASES = {"privacy.ratio": "anonymization_ratio"}
_SECTION_ALIASES = {"retrieval": "search"}


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


def _flatten(payload: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in payload.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            flat.update(_flatten(value, dotted))
        else:
            flat[dotted] = value
    return flat


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: Any, annotation: str, key: str) -> Any:
    optional = "None" in annotation
    if value is None or (optional and isinstance(value, str) and value.strip().lower() in {"none", "null", ""}):
        if optional:
            return None
        raise ConfigError(f"{key} may not be null")
    base = annotation.replace("| None", "").strip()
    try:
        if base == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if base == "int":
            if isinstance(value, bool):
                raise ValueError("boolean given for integer")
            return int(value)
        if base == "float":
            return float(value)
        if base.startswith("tuple"):
            if isinstance(value, str):
                return tuple(part.strip() for part in value.split(",") if part.strip())
            return tuple(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e}") from e


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> EngineConfig:
    """Read a JSON config file (optional) and apply dotted overrides on top."""
    config = EngineConfig()
    if path is not None:
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as handle:
                payload = json.load(handle)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError("config file must contain a JSON object")
        from .validation import validate_config_payload

        ok, errors = validate_config_payload(payload)
        if not ok:
            raise ConfigError("; ".join(errors))
        config = EngineConfig.from_mapping(payload)
    if overrides:
        config = config.with_values(overrides)
    return config
