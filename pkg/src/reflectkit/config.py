"""Declarative run configuration: one TOML file, four tables.

Tables: [endpoint] (where completions come from), [policy] (generation
knobs), [curation] (pairing and judging), [eval] (turn count, binning).
Every key has a default, so an empty file is a valid config.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .core import GenerationPolicy
from .curation import PairingPolicy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Config file missing, unparsable, or holding a value of the wrong shape."""


@dataclass(frozen=True)
class EndpointConfig:
    url: str | None = None
    model: str = "default"
    timeout_s: float = 60.0
    retries: int = 3
    backoff_s: float = 0.5
    max_in_flight: int = 8
    api_key_env: str = "REFLECT_API_KEY"


@dataclass(frozen=True)
class EvalConfig:
    turns: int = 2
    reflection_mode: str = "plain"  # "plain" | "one_stage"
    n_bins: int = 10
    judge_model: str = "default"


@dataclass(frozen=True)
class RunConfig:
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    policy: GenerationPolicy = field(default_factory=GenerationPolicy)
    curation: PairingPolicy = field(default_factory=PairingPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)
    reflection_source: str = "pool"  # "pool" | "plain"
    workers: int = 4

    def to_dict(self) -> dict:
        return {
            "endpoint": {
                "url": self.endpoint.url,
                "model": self.endpoint.model,
                "timeout_s": self.endpoint.timeout_s,
                "retries": self.endpoint.retries,
                "backoff_s": self.endpoint.backoff_s,
                "max_in_flight": self.endpoint.max_in_flight,
                "api_key_env": self.endpoint.api_key_env,
            },
            "policy": {
                "k": self.policy.k,
                "m": self.policy.m,
                "max_turns": self.policy.max_turns,
                "seed": self.policy.seed,
                "sample_temperature": self.policy.sample_temperature,
                "qa_temperature": self.policy.qa_temperature,
                "max_new_tokens": self.policy.max_new_tokens,
                "step_budget": self.policy.step_budget,
                "per_dataset_cap": self.policy.per_dataset_cap,
                "per_question_instructions": self.policy.per_question_instructions,
                "reflection_source": self.reflection_source,
            },
            "curation": {
                "mode": self.curation.mode,
                "cap": self.curation.cap,
                "seed": self.curation.seed,
                "debias": self.curation.debias,
            },
            "eval": {
                "turns": self.eval.turns,
                "reflection_mode": self.eval.reflection_mode,
                "n_bins": self.eval.n_bins,
                "judge_model": self.eval.judge_model,
            },
            "workers": self.workers,
        }


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_KNOWN_TABLES = {"endpoint", "policy", "curation", "eval"}
_TOP_KEYS = {"workers"}


def _build(section: str, raw: dict, cls, known: dict) -> object:
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(
                f"[{section}] has unknown key {key!r}; known keys: {sorted(known)}"
            )
        expected = known[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or (
            expected is not bool and isinstance(value, bool)
        ):
            raise ConfigError(
                f"[{section}].{key} must be {getattr(expected, '__name__', expected)}, "
                f"got {type(value).__name__}"
            )
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    unknown = set(raw) - _KNOWN_TABLES - _TOP_KEYS
    if unknown:
        raise ConfigError(
            f"unknown config tables/keys: {sorted(unknown)}; "
            f"expected tables {sorted(_KNOWN_TABLES)}"
        )
    for table in _KNOWN_TABLES:
        if table in raw and not isinstance(raw[table], dict):
            raise ConfigError(f"[{table}] must be a table")

    endpoint = _build(
        "endpoint",
        raw.get("endpoint", {}),
        EndpointConfig,
        {
            "url": str,
            "model": str,
            "timeout_s": float,
            "retries": int,
            "backoff_s": float,
            "max_in_flight": int,
            "api_key_env": str,
        },
    )
    policy_raw = dict(raw.get("policy", {}))
    reflection_source = policy_raw.pop("reflection_source", "pool")
    if reflection_source not in ("pool", "plain"):
        raise ConfigError("[policy].reflection_source must be 'pool' or 'plain'")
    policy = _build(
        "policy",
        policy_raw,
        GenerationPolicy,
        {
            "k": int,
            "m": int,
            "max_turns": int,
            "seed": int,
            "sample_temperature": float,
            "qa_temperature": float,
            "max_new_tokens": int,
            "step_budget": int,
            "per_dataset_cap": int,
            "per_question_instructions": bool,
        },
    )
    curation = _build(
        "curation",
        raw.get("curation", {}),
        PairingPolicy,
        {"mode": str, "cap": int, "seed": int, "debias": bool},
    )
    eval_cfg = _build(
        "eval",
        raw.get("eval", {}),
        EvalConfig,
        {"turns": int, "reflection_mode": str, "n_bins": int, "judge_model": str},
    )
    workers = raw.get("workers", 4)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ConfigError("workers must be a positive integer")
    return RunConfig(
        endpoint=endpoint,
        policy=policy,
        curation=curation,
        eval=eval_cfg,
        reflection_source=reflection_source,
        workers=workers,
    )


def load_config(path: str | Path | None) -> RunConfig:
    """Read a TOML config; None means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return parse_config(raw)


def config_from_dict(d: dict) -> RunConfig:
    """Rebuild a RunConfig from the dict form stored in a run manifest."""
    raw = json.loads(json.dumps(d))  # deep copy, drops any odd types
    for table in ("endpoint", "policy", "curation", "eval"):
        table_raw = raw.get(table)
        if isinstance(table_raw, dict):
            raw[table] = {k: v for k, v in table_raw.items() if v is not None}
    return parse_config(raw)
