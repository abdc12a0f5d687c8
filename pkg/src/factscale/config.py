"""Declarative toolkit configuration: endpoints, roles, store root, defaults.

Config lives in one YAML file; ``${VAR}`` references in string values are
interpolated from the environment at load time, and API keys are named by
environment variable so secrets never live in the file itself.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .llmclient import EndpointConfig, SamplingParams

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

DEFAULT_SPARQL_ENDPOINT = "https://query.wikidata.org/sparql"
ROLES = ("generator", "embedder", "judge")


def _interpolate(value):
    if isinstance(value, str):

        def repl(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset environment variable {name!r}")
            return os.environ[name]

        return _ENV_RE.sub(repl, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


@dataclass
class ToolConfig:
    """Validated toolkit configuration."""

    store_root: Path
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)
    sampling: SamplingParams = field(default_factory=SamplingParams)
    sparql_endpoint: str = DEFAULT_SPARQL_ENDPOINT
    sparql_rate: float = 5.0
    max_workers: int = 8
    judge_include_question: bool = False
    kg_max_paths: int = 5
    kg_max_lines: int = 12

    def __post_init__(self):
        for role, name in self.roles.items():
            if name not in self.endpoints:
                raise ConfigError(
                    f"role {role!r} references undefined endpoint {name!r} "
                    f"(defined: {sorted(self.endpoints)})"
                )

    def endpoint(self, name: str) -> EndpointConfig:
        if name not in self.endpoints:
            raise ConfigError(f"unknown endpoint {name!r} (defined: {sorted(self.endpoints)})")
        return self.endpoints[name]

    def endpoint_for_role(self, role: str) -> EndpointConfig:
        if role not in self.roles:
            raise ConfigError(f"no endpoint configured for role {role!r}")
        return self.endpoint(self.roles[role])

    def summary(self) -> dict:
        return {
            "store_root": str(self.store_root),
            "roles": dict(self.roles),
            "endpoints": {
                name: {"base_url": ep.base_url, "model": ep.model}
                for name, ep in self.endpoints.items()
            },
            "sampling": self.sampling.to_dict(),
            "sparql_endpoint": self.sparql_endpoint,
        }


def _endpoint_from_obj(name: str, obj: dict) -> EndpointConfig:
    if "base_url" not in obj or "model" not in obj:
        raise ConfigError(f"endpoint {name!r} needs base_url and model")
    return EndpointConfig(
        name=name,
        base_url=obj["base_url"],
        model=obj["model"],
        api_key_env=obj.get("api_key_env"),
        supports_chat=obj.get("supports_chat", True),
        supports_completions=obj.get("supports_completions", False),
        supports_embeddings=obj.get("supports_embeddings", False),
        max_in_flight=obj.get("max_in_flight", 8),
        max_attempts=obj.get("max_attempts", 3),
        backoff_base=obj.get("backoff_base", 1.0),
        timeout=obj.get("timeout", 120.0),
    )


def load_config(path: str | Path) -> ToolConfig:
    """Parse and validate a YAML config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    raw = _interpolate(raw)
    if "store_root" not in raw:
        raise ConfigError("config must set store_root")
    endpoints = {
        name: _endpoint_from_obj(name, obj or {})
        for name, obj in (raw.get("endpoints") or {}).items()
    }
    sampling_obj = raw.get("sampling") or {}
    sampling = SamplingParams(
        temperature=sampling_obj.get("temperature", 0.7),
        top_p=sampling_obj.get("top_p", 0.8),
        max_tokens=sampling_obj.get("max_tokens", 4096),
        stop_sequences=tuple(sampling_obj.get("stop", ())),
        seed=sampling_obj.get("seed"),
    )
    sparql_obj = raw.get("sparql") or {}
    kg_obj = raw.get("kg") or {}
    store_root = Path(raw["store_root"])
    if not store_root.is_absolute():
        store_root = (path.parent / store_root).resolve()
    return ToolConfig(
        store_root=store_root,
        endpoints=endpoints,
        roles=dict(raw.get("roles") or {}),
        sampling=sampling,
        sparql_endpoint=sparql_obj.get("endpoint_url", DEFAULT_SPARQL_ENDPOINT),
        sparql_rate=sparql_obj.get("rate_limit", 5.0),
        max_workers=raw.get("concurrency", {}).get("max_workers", 8),
        judge_include_question=raw.get("judge_include_question", False),
        kg_max_paths=kg_obj.get("max_paths", 5),
        kg_max_lines=kg_obj.get("max_lines", 12),
    )
