"""Run configuration.

One declarative YAML document with four sections -- endpoints, pipeline,
sandbox, eval -- holds every tunable constant of the workflow. Nothing
numeric is hardcoded elsewhere: instance/feature thresholds, the proposal
count, the retry budget, the QA quota and mix, sandbox limits, and the CI
level all live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ValidationError
from .gateway import ModelEndpoint
from .model import DEFAULT_ALLOWED_FAMILIES, DEFAULT_FAMILY_SYNONYMS


@dataclass(frozen=True)
class PipelineConfig:
    # Dataset pre-filter bounds, both inclusive.
    min_instances: int = 200
    max_features: int = 2000
    preview_rows: int = 10
    sample_size: int | None = None

    # Plot proposal.
    proposal_count: int = 10
    diversity_check: bool = True
    diversity_floor: int = 4
    allowed_families: tuple[str, ...] = DEFAULT_ALLOWED_FAMILIES
    family_synonyms: Mapping[str, str] = field(
        default_factory=lambda: dict(DEFAULT_FAMILY_SYNONYMS)
    )

    # Render-check-regenerate loop.
    retry_budget: int = 3
    image_dpi: int = 150

    # QA quota: 20 questions split 7 easy / 6 medium / 7 hard, with an
    # acceptance band of [18, 22] total and at most 1 off per difficulty.
    qa_total: int = 20
    qa_mix: tuple[int, int, int] = (7, 6, 7)
    qa_total_band: tuple[int, int] = (18, 22)
    qa_mix_tolerance: int = 1

    # Sampling temperatures: diversity for generation, determinism for checks.
    temperature_generation: float = 0.7
    temperature_checker: float = 0.0
    max_output_tokens: int = 4096

    seed: int | None = None

    def __post_init__(self):
        if self.min_instances < 0 or self.max_features < 0:
            raise ValidationError("prefilter bounds must be >= 0")
        if self.proposal_count < 1:
            raise ValidationError("proposal_count must be >= 1")
        if self.retry_budget < 0:
            raise ValidationError("retry_budget must be >= 0")
        if sum(self.qa_mix) != self.qa_total:
            raise ValidationError("qa_mix must sum to qa_total")


@dataclass(frozen=True)
class SandboxConfig:
    wall_seconds: float = 60.0
    memory_mb: int = 1024
    allow_network: bool = False
    # Command used when rendering through the external runner; empty means
    # use the in-process runner.
    runner_command: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvalConfig:
    candidate_models: tuple[str, ...] = ()
    judge_model: str = "judge"
    ci_level: float = 0.95
    bootstrap_resamples: int = 10_000
    bootstrap_seed: int = 0
    temperature_judge: float = 0.0
    temperature_answer: float = 0.0
    max_output_tokens: int = 1024
    workers: int = 1

    def __post_init__(self):
        if not (0.0 < self.ci_level < 1.0):
            raise ValidationError("ci_level must be inside (0, 1)")
        if self.bootstrap_resamples < 1:
            raise ValidationError("bootstrap_resamples must be >= 1")


# Default endpoint roster mirrors the reference deployment: one mid-size
# model for every generation and checking stage, a smaller one as judge.
DEFAULT_ENDPOINTS: dict[str, ModelEndpoint] = {
    "generator": ModelEndpoint(model_id="qwen3.5-27b", api_key_env="CHARTFORGE_API_KEY"),
    "checker": ModelEndpoint(model_id="qwen3.5-27b", api_key_env="CHARTFORGE_API_KEY"),
    "judge": ModelEndpoint(model_id="qwen3.5-9b", api_key_env="CHARTFORGE_API_KEY"),
}


@dataclass(frozen=True)
class Config:
    endpoints: Mapping[str, ModelEndpoint] = field(
        default_factory=lambda: dict(DEFAULT_ENDPOINTS)
    )
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # Optional scripted-backend fixture, used by --dry-run.
    fixture_path: str | None = None

    def endpoint(self, role: str) -> ModelEndpoint:
        try:
            return self.endpoints[role]
        except KeyError:
            raise ValidationError(f"no endpoint configured for role {role!r}") from None


def _build(cls, section: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in known:
            raise ValidationError(f"config: unknown field {where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"config: bad section {where}: {exc}") from exc


def _tuplify(section: dict, *keys: str) -> None:
    for key in keys:
        if key in section and isinstance(section[key], list):
            section[key] = tuple(section[key])


def load_config(path: str | Path) -> Config:
    """Parse and validate the YAML config document.

    Raises :class:`ValidationError` naming the offending field on any
    unknown key or malformed value.
    """
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ValidationError("config: document root must be a mapping")
    return config_from_dict(raw)


def config_from_dict(raw: Mapping[str, Any]) -> Config:
    allowed_sections = {"endpoints", "pipeline", "sandbox", "eval", "fixture_path"}
    unknown = set(raw) - allowed_sections
    if unknown:
        raise ValidationError(f"config: unknown section(s): {sorted(unknown)}")

    endpoints = dict(DEFAULT_ENDPOINTS)
    for role, spec in (raw.get("endpoints") or {}).items():
        if not isinstance(spec, Mapping):
            raise ValidationError(f"config: endpoints.{role} must be a mapping")
        endpoints[role] = _build(ModelEndpoint, spec, f"endpoints.{role}")

    pipeline_raw = dict(raw.get("pipeline") or {})
    _tuplify(pipeline_raw, "allowed_families", "qa_mix", "qa_total_band")
    pipeline = _build(PipelineConfig, pipeline_raw, "pipeline")

    sandbox_raw = dict(raw.get("sandbox") or {})
    _tuplify(sandbox_raw, "runner_command")
    sandbox = _build(SandboxConfig, sandbox_raw, "sandbox")

    eval_raw = dict(raw.get("eval") or {})
    _tuplify(eval_raw, "candidate_models")
    eval_cfg = _build(EvalConfig, eval_raw, "eval")

    return Config(
        endpoints=endpoints,
        pipeline=pipeline,
        sandbox=sandbox,
        eval=eval_cfg,
        fixture_path=raw.get("fixture_path"),
    )
