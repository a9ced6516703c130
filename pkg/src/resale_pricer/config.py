"""Key-value configuration with environment-variable overrides.

Config files are YAML (or JSON, which YAML subsumes). Endpoint credentials
never live in the file: only the *name* of the environment variable holding
the API key does.
"""

from __future__ import annotations

import os
from pathlib import Path

import yaml

from .errors import ValidationError
from .llm_gateway import EndpointConfig

ENV_PREFIX = "RESALE_PRICER_"


def load_config(path: str | Path | None) -> dict:
    """Read the config file (if any) and apply RESALE_PRICER_* env overrides.

    An env var RESALE_PRICER_BASE_URL overrides key `base_url`, and so on.
    """
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        data.update(loaded)
    for env_key, value in os.environ.items():
        if env_key.startswith(ENV_PREFIX):
            data[env_key[len(ENV_PREFIX):].lower()] = value
    return data


def endpoint_from_config(data: dict) -> EndpointConfig:
    if "base_url" not in data or "model_id" not in data:
        raise ValidationError("endpoint config requires 'base_url' and 'model_id'")
    return EndpointConfig(
        base_url=str(data["base_url"]),
        model_id=str(data["model_id"]),
        api_key_env=str(data.get("api_key_env", "LLM_API_KEY")),
        timeout_s=float(data.get("timeout_s", 60.0)),
        max_attempts=int(data.get("max_attempts", 3)),
        backoff_s=float(data.get("backoff_s", 0.5)),
        max_concurrency=int(data.get("max_concurrency", 4)),
    )
