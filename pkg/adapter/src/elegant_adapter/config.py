"""Adapter configuration: model roster per role, device, serving limits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

DEFAULT_MODELS = {
    "observer": "builtin:hash-detector",
    "thinker": "builtin:echo-reasoner",
    "verifier": "builtin:hash-vqa",
    "embedder": "builtin:hash-embedder",
}

ROLES = ("observer", "thinker", "verifier", "embedder")


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    """Serving parameters; every enabled role must name a loadable model."""

    models: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_MODELS))
    device: str = "cpu"
    max_batch_size: int = 1
    host: str = "127.0.0.1"
    port: int = 0
    embed_dim: int = 16
    expected_token: str | None = None

    def __post_init__(self) -> None:
        unknown = set(self.models) - set(ROLES)
        if unknown:
            raise AdapterConfigError(f"unknown roles in model roster: {sorted(unknown)}")
        if self.max_batch_size < 1:
            raise AdapterConfigError("max_batch_size must be >= 1")
        if self.embed_dim < 1:
            raise AdapterConfigError("embed_dim must be >= 1")
        merged = dict(DEFAULT_MODELS)
        merged.update(self.models)
        object.__setattr__(self, "models", merged)

    @classmethod
    def from_file(cls, path: str | Path) -> "AdapterConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_json_dict(data)

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "AdapterConfig":
        return cls(
            models=data.get("models", {}),
            device=data.get("device", "cpu"),
            max_batch_size=int(data.get("max_batch_size", 1)),
            host=data.get("host", "127.0.0.1"),
            port=int(data.get("port", 0)),
            embed_dim=int(data.get("embed_dim", 16)),
            expected_token=data.get("expected_token"),
        )
