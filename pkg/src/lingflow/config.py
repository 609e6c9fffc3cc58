"""Pipeline configuration: one JSON document, every value overridable by dotted path."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from lingflow.errors import ConfigError
from lingflow.reward import RewardConfig

GEN_KEY_ENV = "LF_GEN_API_KEY"
JUDGE_KEY_ENV = "LF_JUDGE_API_KEY"


@dataclass
class CurationConfig:
    k: int = 7
    normalize: bool = True


@dataclass
class RetrievalConfig:
    k: int = 3
    similarity: str = "dot"


@dataclass
class ClientConfig:
    generation_endpoint: str | None = None
    judge_endpoint: str | None = None
    generation_model: str = ""
    judge_model: str = ""
    timeout_seconds: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    temperature: float = 1.0
    judge_temperature: float = 0.0
    judge_max_attempts: int = 3
    inline_images: bool = False
    # stub modes: a JSONL fixture path; for the judge, "exact" selects the exact-match stub
    stub_generation: str | None = None
    stub_judge: str | None = None
    stub_latency_seconds: float = 0.25


@dataclass
class EvaluationConfig:
    answer_mode: str = "judge"
    hit_policy: str = "intersect"
    group_keys: list[str] = field(default_factory=lambda: ["benchmark", "hop"])


@dataclass
class PipelineConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    clients: ClientConfig = field(default_factory=ClientConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> PipelineConfig:
        c = self.clients
        if c.timeout_seconds <= 0:
            raise ConfigError("clients.timeout_seconds must be > 0")
        if c.max_in_flight < 1:
            raise ConfigError("clients.max_in_flight must be >= 1")
        if c.max_retries < 0:
            raise ConfigError("clients.max_retries must be >= 0")
        if self.curation.k < 1 or self.retrieval.k < 1:
            raise ConfigError("k values must be >= 1")
        if self.retrieval.similarity not in ("dot", "cosine"):
            raise ConfigError("retrieval.similarity must be 'dot' or 'cosine'")
        if self.evaluation.answer_mode not in ("judge", "exact"):
            raise ConfigError("evaluation.answer_mode must be 'judge' or 'exact'")
        try:
            RewardConfig(**dataclasses.asdict(self.reward))
            from lingflow.evaluation import HitPolicy

            HitPolicy.parse(self.evaluation.hit_policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where + key!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    return _build(PipelineConfig, data, "").validate()


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    for item in overrides or []:
        apply_override(data, item)
    return config_from_dict(data)


def apply_override(data: dict[str, Any], item: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON, falling back to a plain string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = value
